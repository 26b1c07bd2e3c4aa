//! Fixed domains `Ωᵃ = ωᵃ×(0,L)` and `Ωᵇ = ωᵇ×(−1,0)` with square
//! cross-sections, their tensor hex meshes, the reduced interval and
//! triangle meshes, the junction map and averaged fields.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat3x2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// Half-width of `ωᵃ`.
    pub sa: f64,
    /// Half-width of `ωᵇ`.
    pub sb: f64,
    /// Tube height.
    #[serde(rename = "L")]
    pub l: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { sa: 0.25, sb: 1.0, l: 1.0 }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.sa > 0.0 && self.sa < self.sb && self.l > 0.0 && self.sb.is_finite() && self.l.is_finite()) {
            return Err(Error::Config(format!(
                "geometry needs 0 < sa < sb and L > 0 (got sa = {}, sb = {}, L = {})",
                self.sa, self.sb, self.l
            )));
        }
        Ok(())
    }

    /// `ā = |ωᵃ|`.
    pub fn a_bar(&self) -> f64 {
        4.0 * self.sa * self.sa
    }

    /// Perimeter of `ωᵃ`.
    pub fn perimeter_a(&self) -> f64 {
        8.0 * self.sa
    }

    pub fn area_b(&self) -> f64 {
        4.0 * self.sb * self.sb
    }
}

/// Tensor-product hexahedral mesh with trilinear elements.
#[derive(Clone, Debug)]
pub struct HexMesh {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Gauss points of the two-point rule on `[0, 1]`.
pub const GAUSS2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

impl HexMesh {
    pub fn uniform(lo: [f64; 3], hi: [f64; 3], n: [usize; 3]) -> Self {
        Self { x: linspace(lo[0], hi[0], n[0]), y: linspace(lo[1], hi[1], n[1]), z: linspace(lo[2], hi[2], n[2]) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.len(), self.y.len(), self.z.len())
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len() * self.y.len() * self.z.len()
    }

    pub fn n_cells(&self) -> usize {
        (self.x.len() - 1) * (self.y.len() - 1) * (self.z.len() - 1)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.y.len() + j) * self.x.len() + i
    }

    pub fn coords(&self, id: usize) -> Vec3 {
        let nx = self.x.len();
        let ny = self.y.len();
        Vec3::new(self.x[id % nx], self.y[(id / nx) % ny], self.z[id / (nx * ny)])
    }

    pub fn cell_ijk(&self, c: usize) -> (usize, usize, usize) {
        let cx = self.x.len() - 1;
        let cy = self.y.len() - 1;
        (c % cx, (c / cx) % cy, c / (cx * cy))
    }

    /// Node ids of a cell, ordered by local `(a, b, c) ∈ {0,1}³` at `a + 2b + 4c`.
    pub fn cell_nodes(&self, c: usize) -> [usize; 8] {
        let (i, j, k) = self.cell_ijk(c);
        let mut out = [0; 8];
        for (l, o) in out.iter_mut().enumerate() {
            *o = self.node(i + (l & 1), j + ((l >> 1) & 1), k + ((l >> 2) & 1));
        }
        out
    }

    pub fn cell_size(&self, c: usize) -> Vec3 {
        let (i, j, k) = self.cell_ijk(c);
        Vec3::new(self.x[i + 1] - self.x[i], self.y[j + 1] - self.y[j], self.z[k + 1] - self.z[k])
    }

    pub fn cell_volume(&self, c: usize) -> f64 {
        let s = self.cell_size(c);
        s.x * s.y * s.z
    }

    pub fn volume(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_volume(c)).sum()
    }

    /// Shape-function gradients at local point `ξ ∈ [0,1]³` of a cell.
    pub fn shape_gradients(&self, c: usize, xi: [f64; 3]) -> [Vec3; 8] {
        let h = self.cell_size(c);
        let mut out = [Vec3::zeros(); 8];
        for (l, o) in out.iter_mut().enumerate() {
            let s = [(l & 1) as f64, ((l >> 1) & 1) as f64, ((l >> 2) & 1) as f64];
            let f = |d: usize| if s[d] == 1.0 { xi[d] } else { 1.0 - xi[d] };
            let df = |d: usize| if s[d] == 1.0 { 1.0 } else { -1.0 };
            *o = Vec3::new(df(0) * f(1) * f(2) / h.x, f(0) * df(1) * f(2) / h.y, f(0) * f(1) * df(2) / h.z);
        }
        out
    }

    /// Shape-function values at a local point.
    pub fn shape_values(xi: [f64; 3]) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (l, o) in out.iter_mut().enumerate() {
            let s = [(l & 1) as f64, ((l >> 1) & 1) as f64, ((l >> 2) & 1) as f64];
            *o = (0..3).map(|d| if s[d] == 1.0 { xi[d] } else { 1.0 - xi[d] }).product();
        }
        out
    }

    /// Gradient `∇ψ` (columns `∂₁ψ, ∂₂ψ, ∂₃ψ`) at a local point of a cell.
    pub fn gradient(&self, field: &[Vec3], c: usize, xi: [f64; 3]) -> crate::tensor::Mat3 {
        let nodes = self.cell_nodes(c);
        let g = self.shape_gradients(c, xi);
        let mut m = crate::tensor::Mat3::zeros();
        for l in 0..8 {
            m += field[nodes[l]] * g[l].transpose();
        }
        m
    }

    /// Value of a nodal field at a local point of a cell.
    pub fn interpolate(&self, field: &[Vec3], c: usize, xi: [f64; 3]) -> Vec3 {
        let nodes = self.cell_nodes(c);
        let s = Self::shape_values(xi);
        (0..8).fold(Vec3::zeros(), |a, l| a + field[nodes[l]] * s[l])
    }

    /// Physical point of a local coordinate.
    pub fn point(&self, c: usize, xi: [f64; 3]) -> Vec3 {
        let (i, j, k) = self.cell_ijk(c);
        let h = self.cell_size(c);
        Vec3::new(self.x[i] + xi[0] * h.x, self.y[j] + xi[1] * h.y, self.z[k] + xi[2] * h.z)
    }

    /// Nodal interpolant of a map.
    pub fn sample(&self, f: impl Fn(&Vec3) -> Vec3) -> Vec<Vec3> {
        (0..self.n_nodes()).map(|id| f(&self.coords(id))).collect()
    }
}

/// Uniform mesh of `(0, L)`.
#[derive(Clone, Debug)]
pub struct IntervalMesh {
    pub nodes: Vec<f64>,
}

impl IntervalMesh {
    pub fn uniform(l: f64, n: usize) -> Self {
        Self { nodes: linspace(0.0, l, n) }
    }

    pub fn n_elements(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn length(&self, e: usize) -> f64 {
        self.nodes[e + 1] - self.nodes[e]
    }

    pub fn midpoint(&self, e: usize) -> f64 {
        0.5 * (self.nodes[e] + self.nodes[e + 1])
    }
}

/// P1 triangulation of `ωᵇ`.
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub nodes: Vec<[f64; 2]>,
    pub tris: Vec<[usize; 3]>,
    pub boundary: Vec<bool>,
    /// Index of the node at `0_α`.
    pub origin: usize,
}

impl TriMesh {
    /// `n × n` grid (n even) on `(−s, s)²` graded toward the origin by
    /// `x = s·sign(t)|t|^grading`, each square cut into two triangles.
    pub fn graded_square(s: f64, n: usize, grading: f64) -> Result<Self> {
        if n < 2 || n % 2 == 1 || !(grading >= 1.0) {
            return Err(Error::Mesh("triangulation needs even n ≥ 2 and grading ≥ 1".into()));
        }
        let coord: Vec<f64> = (0..=n)
            .map(|i| {
                let t = -1.0 + 2.0 * i as f64 / n as f64;
                s * t.signum() * t.abs().powf(grading)
            })
            .collect();
        let mut nodes = Vec::new();
        let mut boundary = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                nodes.push([coord[i], coord[j]]);
                boundary.push(i == 0 || j == 0 || i == n || j == n);
            }
        }
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let mut tris = Vec::new();
        for j in 0..n {
            for i in 0..n {
                // diagonals point away from the origin so the refinement stays symmetric
                let flip = (i < n / 2) != (j < n / 2);
                if flip {
                    tris.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
                    tris.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
                } else {
                    tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                    tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                }
            }
        }
        Ok(Self { nodes, tris, boundary, origin: id(n / 2, n / 2) })
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t].map(|i| self.nodes[i]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.tris[t].map(|i| self.nodes[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Barycentric coordinates of `p` in triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.tris[t].map(|i| self.nodes[i]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Triangle containing `p` (clamped to the square) and its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> (usize, [f64; 3]) {
        let n = (self.nodes.len() as f64).sqrt().round() as usize - 1;
        let xs: Vec<f64> = (0..=n).map(|i| self.nodes[i][0]).collect();
        let q = [p[0].clamp(xs[0], xs[n]), p[1].clamp(xs[0], xs[n])];
        let (i, _) = locate(&xs, q[0]);
        let (j, _) = locate(&xs, q[1]);
        let base = 2 * (j * n + i);
        let mut best = (base, self.barycentric(base, q));
        for t in [base, base + 1] {
            let l = self.barycentric(t, q);
            let worst = l.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst > best.1.iter().cloned().fold(f64::INFINITY, f64::min) {
                best = (t, l);
            }
        }
        best
    }

    /// Value of a P1 field at `p`.
    pub fn eval(&self, field: &[Vec3], p: [f64; 2]) -> Vec3 {
        let (t, l) = self.locate(p);
        self.tris[t].iter().zip(l).fold(Vec3::zeros(), |a, (&v, w)| a + field[v] * w)
    }

    /// Gradients of the three barycentric functions.
    pub fn basis_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.tris[t].map(|i| self.nodes[i]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        [
            [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
            [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
            [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
        ]
    }

    /// `∇_αψ` of a P1 field on a triangle.
    pub fn gradient(&self, field: &[Vec3], t: usize) -> Mat3x2 {
        let g = self.basis_gradients(t);
        let mut m = Mat3x2::zeros();
        for (l, &v) in self.tris[t].iter().enumerate() {
            m += field[v] * nalgebra::RowVector2::new(g[l][0], g[l][1]);
        }
        m
    }
}

/// Bilinear interpolation stencil: four node ids and weights.
pub type Stencil = [(usize, f64); 4];

/// Locates `p` in a tensor grid row `xs` and returns `(cell, local coordinate)`.
fn locate(xs: &[f64], p: f64) -> (usize, f64) {
    let n = xs.len() - 1;
    let i = xs.partition_point(|&x| x <= p).saturating_sub(1).min(n - 1);
    (i, (p - xs[i]) / (xs[i + 1] - xs[i]))
}

/// In-plane plate nodes: the scaled tube nodes `r·xs` on the footprint,
/// then `n_out` geometrically growing cells on each side up to `±sb`, the
/// first as wide as a footprint cell.
pub fn plate_axis(xs: &[f64], r_eps: f64, sb: f64, n_out: usize) -> Vec<f64> {
    let a = r_eps * xs[xs.len() - 1];
    let d = r_eps * (xs[1] - xs[0]);
    let span = sb - a;
    let n = n_out as i32;
    let q = if d * n_out as f64 >= span {
        1.0
    } else {
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        while d * (hi.powi(n) - 1.0) / (hi - 1.0) < span {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d * (mid.powi(n) - 1.0) / (mid - 1.0) < span {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut out_side = Vec::with_capacity(n_out);
    let (mut x, mut w) = (a, if q == 1.0 { span / n_out as f64 } else { d });
    for k in 0..n_out {
        x = if k + 1 == n_out { sb } else { x + w };
        out_side.push(x);
        w *= q;
    }
    let mut axis: Vec<f64> = out_side.iter().rev().map(|v| -v).collect();
    axis.extend(xs.iter().map(|v| r_eps * v));
    axis.extend(out_side);
    axis
}

/// Junction coupling `ψᵃ(x_α, 0) = ψᵇ(r x_α, 0)` by master–slave elimination.
#[derive(Clone, Debug)]
pub struct JunctionMap {
    /// Tube bottom-face nodes.
    pub slaves: Vec<usize>,
    /// Plate top-face stencils at `r x_α`.
    pub masters: Vec<Stencil>,
    pub targets: Vec<[f64; 2]>,
}

impl JunctionMap {
    pub fn apply(&self, psi_a: &mut [Vec3], psi_b: &[Vec3]) {
        for (s, st) in self.slaves.iter().zip(&self.masters) {
            psi_a[*s] = st.iter().fold(Vec3::zeros(), |a, &(m, w)| a + psi_b[m] * w);
        }
    }

    /// Moves slave gradient contributions onto the masters and zeroes them.
    pub fn adjoint(&self, g_a: &mut [Vec3], g_b: &mut [Vec3]) {
        for (s, st) in self.slaves.iter().zip(&self.masters) {
            let gs = g_a[*s];
            for &(m, w) in st {
                g_b[m] += gs * w;
            }
            g_a[*s] = Vec3::zeros();
        }
    }
}

/// Discretization resolutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Resolution {
    /// Tube cells per in-plane direction.
    pub na: usize,
    /// Tube cells along `x₃`.
    pub nz: usize,
    /// Plate cells per in-plane direction outside the junction footprint.
    pub nb: usize,
    /// Plate cells across the thickness.
    pub nh: usize,
    /// Interval elements of the string mesh.
    pub interval: usize,
    /// Grid size of the membrane triangulation.
    pub tri: usize,
    pub tri_grading: f64,
}

impl Default for Resolution {
    fn default() -> Self {
        Self { na: 8, nz: 16, nb: 24, nh: 6, interval: 16, tri: 20, tri_grading: 1.5 }
    }
}

impl Resolution {
    pub fn validate(&self) -> Result<()> {
        if self.na < 1 || self.nz < 1 || self.nb < 2 || self.nb % 2 == 1 || self.nh < 1 || self.interval < 1 {
            return Err(Error::Config("mesh resolutions must be positive, nb even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiStructureMesh {
    pub geometry: Geometry,
    pub r_eps: f64,
    pub hex_a: HexMesh,
    pub hex_b: HexMesh,
    pub limit: LimitMesh,
    pub junction: JunctionMap,
    /// Γᵃ: tube top face.
    pub clamped_a: Vec<bool>,
    /// Γᵇ: plate lateral boundary.
    pub clamped_b: Vec<bool>,
}

pub fn build_multistructure(geom: &Geometry, res: &Resolution, r_eps: f64) -> Result<MultiStructureMesh> {
    geom.validate()?;
    res.validate()?;
    if !(r_eps > 0.0) || r_eps * geom.sa >= geom.sb {
        return Err(Error::Mesh(format!(
            "junction footprint r·sa = {} must lie inside the plate (sb = {})",
            r_eps * geom.sa,
            geom.sb
        )));
    }
    let (sa, sb) = (geom.sa, geom.sb);
    let hex_a = HexMesh::uniform([-sa, -sa, 0.0], [sa, sa, geom.l], [res.na, res.na, res.nz]);
    let axis = plate_axis(&hex_a.x, r_eps, sb, res.nb / 2);
    let hex_b = HexMesh { x: axis.clone(), y: axis, z: linspace(-1.0, 0.0, res.nh) };
    let (nxa, nya, nza) = hex_a.dims();
    let (nxb, nyb, nzb) = hex_b.dims();
    let mut clamped_a = vec![false; hex_a.n_nodes()];
    for j in 0..nya {
        for i in 0..nxa {
            clamped_a[hex_a.node(i, j, nza - 1)] = true;
        }
    }
    let mut clamped_b = vec![false; hex_b.n_nodes()];
    for k in 0..nzb {
        for j in 0..nyb {
            for i in 0..nxb {
                if i == 0 || j == 0 || i == nxb - 1 || j == nyb - 1 {
                    clamped_b[hex_b.node(i, j, k)] = true;
                }
            }
        }
    }
    let mut junction = JunctionMap { slaves: Vec::new(), masters: Vec::new(), targets: Vec::new() };
    for j in 0..nya {
        for i in 0..nxa {
            let p = [r_eps * hex_a.x[i], r_eps * hex_a.y[j]];
            let (ci, u) = locate(&hex_b.x, p[0]);
            let (cj, v) = locate(&hex_b.y, p[1]);
            let top = nzb - 1;
            junction.slaves.push(hex_a.node(i, j, 0));
            junction.masters.push([
                (hex_b.node(ci, cj, top), (1.0 - u) * (1.0 - v)),
                (hex_b.node(ci + 1, cj, top), u * (1.0 - v)),
                (hex_b.node(ci, cj + 1, top), (1.0 - u) * v),
                (hex_b.node(ci + 1, cj + 1, top), u * v),
            ]);
            junction.targets.push(p);
        }
    }
    Ok(MultiStructureMesh {
        geometry: *geom,
        r_eps,
        hex_a,
        hex_b,
        limit: build_limit_mesh(geom, res)?,
        junction,
        clamped_a,
        clamped_b,
    })
}

/// Reduced meshes of the limit problems: `(0, L)` and `ωᵇ`.
#[derive(Clone, Debug)]
pub struct LimitMesh {
    pub geometry: Geometry,
    pub interval: IntervalMesh,
    pub tri: TriMesh,
}

pub fn build_limit_mesh(geom: &Geometry, res: &Resolution) -> Result<LimitMesh> {
    geom.validate()?;
    res.validate()?;
    Ok(LimitMesh {
        geometry: *geom,
        interval: IntervalMesh::uniform(geom.l, res.interval),
        tri: TriMesh::graded_square(geom.sb, res.tri, res.tri_grading)?,
    })
}

/// Unknowns of the limit problems: `ψᵃ` per interval node, `b̄ᵃ` per interval
/// element, `ψᵇ` per triangle node and `b̄ᵇ` per triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitState {
    pub psi_a: Vec<Vec3>,
    pub bbar_a: Vec<Mat3x2>,
    pub psi_b: Vec<Vec3>,
    pub bbar_b: Vec<Vec3>,
}

impl LimitState {
    /// `ψᵃ = (0_α, x₃)`, `b̄ᵃ = ā I_α`, `ψᵇ = (x_α, 0)`, `b̄ᵇ = e₃`.
    pub fn natural(mesh: &LimitMesh) -> Self {
        let a_bar = mesh.geometry.a_bar();
        Self {
            psi_a: mesh.interval.nodes.iter().map(|z| Vec3::new(0.0, 0.0, *z)).collect(),
            bbar_a: vec![crate::tensor::i_alpha() * a_bar; mesh.interval.n_elements()],
            psi_b: mesh.tri.nodes.iter().map(|p| Vec3::new(p[0], p[1], 0.0)).collect(),
            bbar_b: vec![Vec3::z(); mesh.tri.tris.len()],
        }
    }

    pub fn check_layout(&self, mesh: &LimitMesh) -> Result<()> {
        if self.psi_a.len() != mesh.interval.nodes.len()
            || self.bbar_a.len() != mesh.interval.n_elements()
            || self.psi_b.len() != mesh.tri.nodes.len()
            || self.bbar_b.len() != mesh.tri.tris.len()
        {
            return Err(Error::Mismatch("limit state does not match the limit mesh".into()));
        }
        Ok(())
    }
}

/// Nodal deformation pair on the hex meshes.
#[derive(Clone, Debug)]
pub struct DeformationState {
    pub psi_a: Vec<Vec3>,
    pub psi_b: Vec<Vec3>,
}

impl MultiStructureMesh {
    /// Clamped-identity data `φᵃ = (r x_α, x₃)`, `φᵇ = (x_α, h x₃)`.
    pub fn identity_state(&self, h_eps: f64) -> DeformationState {
        let r = self.r_eps;
        DeformationState {
            psi_a: self.hex_a.sample(|x| Vec3::new(r * x.x, r * x.y, x.z)),
            psi_b: self.hex_b.sample(|x| Vec3::new(x.x, x.y, h_eps * x.z)),
        }
    }

    pub fn apply_junction(&self, state: &mut DeformationState) {
        self.junction.apply(&mut state.psi_a, &state.psi_b);
    }

    /// Tube bottom-face nodes `(i, j)` with their in-plane coordinates.
    pub fn bottom_nodes(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        let (nx, ny, _) = self.hex_a.dims();
        (0..ny).flat_map(move |j| (0..nx).map(move |i| (self.hex_a.node(i, j, 0), [self.hex_a.x[i], self.hex_a.y[j]])))
    }

    /// Trapezoid weights of tube bottom nodes on `ωᵃ` (sum `ā`).
    pub fn bottom_weights(&self) -> Vec<f64> {
        let w = |xs: &[f64], i: usize| {
            let n = xs.len() - 1;
            let left = if i > 0 { xs[i] - xs[i - 1] } else { 0.0 };
            let right = if i < n { xs[i + 1] - xs[i] } else { 0.0 };
            0.5 * (left + right)
        };
        let (nx, ny, _) = self.hex_a.dims();
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push(w(&self.hex_a.x, i) * w(&self.hex_a.y, j));
            }
        }
        out
    }

    /// Plate top/bottom node pairs per in-plane node.
    pub fn plate_columns(&self) -> Vec<(usize, usize)> {
        let (nx, ny, nz) = self.hex_b.dims();
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push((self.hex_b.node(i, j, nz - 1), self.hex_b.node(i, j, 0)));
            }
        }
        out
    }

    /// Bilinear stencil of a point of `ω̄ᵇ` on the plate's in-plane node grid.
    pub fn plate_stencil(&self, p: [f64; 2]) -> Stencil {
        let (ci, u) = locate(&self.hex_b.x, p[0]);
        let (cj, v) = locate(&self.hex_b.y, p[1]);
        let nx = self.hex_b.x.len();
        let id = |i: usize, j: usize| j * nx + i;
        [
            (id(ci, cj), (1.0 - u) * (1.0 - v)),
            (id(ci + 1, cj), u * (1.0 - v)),
            (id(ci, cj + 1), (1.0 - u) * v),
            (id(ci + 1, cj + 1), u * v),
        ]
    }

    /// Whether a point lies in the closed footprint `r ω̄ᵃ`.
    pub fn in_footprint(&self, p: [f64; 2]) -> bool {
        let s = self.r_eps * self.geometry.sa;
        p[0].abs() <= s && p[1].abs() <= s
    }

    /// In-plane cells of the plate whose centres lie outside `r ω̄ᵃ`.
    pub fn plate_face_cells_outside(&self) -> Vec<(usize, usize)> {
        let (nx, ny, _) = self.hex_b.dims();
        let mut out = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let c = [0.5 * (self.hex_b.x[i] + self.hex_b.x[i + 1]), 0.5 * (self.hex_b.y[j] + self.hex_b.y[j + 1])];
                if !self.in_footprint(c) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let w: Vec<f64> = self.junction.masters.iter().map(|m| m.iter().map(|x| x.1).sum()).collect();
        let min_w = self.junction.masters.iter().flatten().map(|x| x.1).fold(f64::INFINITY, f64::min);
        serde_json::json!({
            "r_eps": self.r_eps,
            "volume_a": self.hex_a.volume(),
            "volume_b": self.hex_b.volume(),
            "nodes_a": self.hex_a.n_nodes(),
            "nodes_b": self.hex_b.n_nodes(),
            "interval_elements": self.limit.interval.n_elements(),
            "triangles": self.limit.tri.tris.len(),
            "clamped_a": self.clamped_a.iter().filter(|b| **b).count(),
            "clamped_b": self.clamped_b.iter().filter(|b| **b).count(),
            "junction_nodes": self.junction.slaves.len(),
            "junction_weight_sum_max_error": w.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max),
            "junction_min_weight": min_w,
        })
    }
}

/// `b̄ᵃ_ε = r⁻¹∫_{ωᵃ}∇_αψᵃ dx_α` at every tube node level (piecewise linear in `x₃`).
pub fn average_bbar_a(psi_a: &[Vec3], r_eps: f64, mesh: &HexMesh) -> Vec<Mat3x2> {
    let (nx, ny, nz) = mesh.dims();
    let mut out = vec![Mat3x2::zeros(); nz];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Mat3x2::zeros();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let (hx, hy) = (mesh.x[i + 1] - mesh.x[i], mesh.y[j + 1] - mesh.y[j]);
                let v = |a: usize, b: usize| psi_a[mesh.node(i + a, j + b, k)];
                // exact cell integrals of the in-plane derivatives of a bilinear field
                let d1 = ((v(1, 0) - v(0, 0)) + (v(1, 1) - v(0, 1))) * (0.5 * hy);
                let d2 = ((v(0, 1) - v(0, 0)) + (v(1, 1) - v(1, 0))) * (0.5 * hx);
                acc.set_column(0, &(acc.column(0) + d1));
                acc.set_column(1, &(acc.column(1) + d2));
            }
        }
        *o = acc / r_eps;
    }
    out
}

/// `b̄ᵇ_ε = h⁻¹∫₋₁⁰∇₃ψᵇ dx₃ = (ψ^{b,+} − ψ^{b,−})/h` at every in-plane plate node.
pub fn average_bbar_b(psi_b: &[Vec3], h_eps: f64, mesh: &HexMesh) -> Vec<Vec3> {
    let (nx, ny, nz) = mesh.dims();
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push((psi_b[mesh.node(i, j, nz - 1)] - psi_b[mesh.node(i, j, 0)]) / h_eps);
        }
    }
    out
}

/// Cross-section average `ā⁻¹∫_{ωᵃ}ψᵃ dx_α` at every tube node level.
pub fn cross_section_average(psi_a: &[Vec3], mesh: &HexMesh) -> Vec<Vec3> {
    let (nx, ny, nz) = mesh.dims();
    let area = (mesh.x[nx - 1] - mesh.x[0]) * (mesh.y[ny - 1] - mesh.y[0]);
    (0..nz)
        .map(|k| {
            let mut acc = Vec3::zeros();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let a = (mesh.x[i + 1] - mesh.x[i]) * (mesh.y[j + 1] - mesh.y[j]);
                    let s = psi_a[mesh.node(i, j, k)]
                        + psi_a[mesh.node(i + 1, j, k)]
                        + psi_a[mesh.node(i, j + 1, k)]
                        + psi_a[mesh.node(i + 1, j + 1, k)];
                    acc += s * (0.25 * a);
                }
            }
            acc / area
        })
        .collect()
}

/// Thickness average `∫₋₁⁰ψᵇ dx₃` at every in-plane plate node.
pub fn thickness_average(psi_b: &[Vec3], mesh: &HexMesh) -> Vec<Vec3> {
    let (nx, ny, nz) = mesh.dims();
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = Vec3::zeros();
            for k in 0..nz - 1 {
                acc += (psi_b[mesh.node(i, j, k)] + psi_b[mesh.node(i, j, k + 1)]) * (0.5 * (mesh.z[k + 1] - mesh.z[k]));
            }
            out.push(acc);
        }
    }
    out
}

/// Closed form of the `p`-capacity of `B(0, γr)` in `B(0, γ√r)`, `p ∈ (1, 2]`.
pub fn annulus_capacity_closed_form(p: f64, r: f64, gamma: f64) -> Result<f64> {
    check_capacity_args(p, r, gamma)?;
    if p == 2.0 {
        return Ok(2.0 * std::f64::consts::PI / (-r.sqrt().ln()));
    }
    let a = (p - 2.0) / (p - 1.0);
    let (r1, r2) = (gamma * r, gamma * r.sqrt());
    Ok(2.0 * std::f64::consts::PI * ((2.0 - p).abs() / (p - 1.0)).powf(p - 1.0) * (r1.powf(a) - r2.powf(a)).abs().powf(1.0 - p))
}

fn check_capacity_args(p: f64, r: f64, gamma: f64) -> Result<()> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::Config(format!("capacity diagnostic needs p ∈ (1, 2], got {p}")));
    }
    if !(r > 0.0 && r < 1.0) || !(gamma > 0.0) {
        return Err(Error::Config(format!("capacity diagnostic needs r ∈ (0, 1) and γ > 0, got r = {r}")));
    }
    Ok(())
}

/// Radially symmetric P1 estimate of the annulus capacity on `n` geometrically
/// graded elements; an upper bound of the exact value.
pub fn annulus_capacity_fem(p: f64, r: f64, gamma: f64, n: usize) -> Result<f64> {
    check_capacity_args(p, r, gamma)?;
    let n = n.max(2);
    let (r1, r2) = (gamma * r, gamma * r.sqrt());
    let rho: Vec<f64> = (0..=n).map(|i| r1 * (r2 / r1).powf(i as f64 / n as f64)).collect();
    let area: Vec<f64> = (0..n).map(|e| std::f64::consts::PI * (rho[e + 1] * rho[e + 1] - rho[e] * rho[e])).collect();
    let len: Vec<f64> = (0..n).map(|e| rho[e + 1] - rho[e]).collect();
    // start from the harmonic (p = 2) profile
    let mut u: Vec<f64> = rho.iter().map(|x| (r2 / x).ln() / (r2 / r1).ln()).collect();
    let energy = |u: &[f64]| -> f64 { (0..n).map(|e| area[e] * ((u[e + 1] - u[e]) / len[e]).abs().powf(p)).sum() };
    let mut e_cur = energy(&u);
    for _ in 0..200 {
        // gradient and tridiagonal Hessian in the interior unknowns u[1..n]
        let m = n - 1;
        let mut g = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut off = vec![0.0; m];
        for e in 0..n {
            let d = (u[e + 1] - u[e]) / len[e];
            let ad = d.abs().max(1e-300);
            let de = area[e] * p * ad.powf(p - 2.0) * d / len[e];
            let dde = area[e] * p * (p - 1.0) * ad.powf(p - 2.0) / (len[e] * len[e]);
            if e >= 1 {
                g[e - 1] -= de;
                diag[e - 1] += dde;
            }
            if e < m {
                g[e] += de;
                diag[e] += dde;
            }
            if e >= 1 && e < m {
                off[e - 1] = -dde;
            }
        }
        let step = solve_tridiagonal(&off, &diag, &g);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = (0..=n).map(|i| if i == 0 || i == n { u[i] } else { u[i] - t * step[i - 1] }).collect();
            let e_new = energy(&trial);
            if e_new <= e_cur {
                let done = e_cur - e_new <= 1e-15 * e_cur;
                u = trial;
                e_cur = e_new;
                accepted = !done;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(e_cur)
}

/// Solves a symmetric tridiagonal system with sub/super-diagonal `off[0..m−1]`.
fn solve_tridiagonal(off: &[f64], diag: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    c[0] = if m > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..m {
        let den = diag[i] - off[i - 1] * c[i - 1];
        c[i] = if i + 1 < m { off[i] / den } else { 0.0 };
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// `(closed form, FEM estimate)` of the annulus `p`-capacity with `γ = 1`.
pub fn annulus_p_capacity(p: f64, r: f64, fem_resolution: usize) -> Result<(f64, f64)> {
    Ok((annulus_capacity_closed_form(p, r, 1.0)?, annulus_capacity_fem(p, r, 1.0, fem_resolution)?))
}

/// Writes `x,y,z,v1,v2,v3` rows, one per node.
pub fn write_node_csv(path: &std::path::Path, points: &[Vec3], values: &[Vec3]) -> Result<()> {
    if points.len() != values.len() {
        return Err(Error::Mismatch(format!("{} points but {} values", points.len(), values.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y,z,v1,v2,v3")?;
    for (p, v) in points.iter().zip(values) {
        writeln!(f, "{},{},{},{},{},{}", p.x, p.y, p.z, v.x, v.y, v.z)?;
    }
    Ok(())
}
