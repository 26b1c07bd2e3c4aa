//! Applied loads: base densities, the three `ε`-scalings, reduced loads,
//! discrete work functionals and the divergence-form alternative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{HexMesh, LimitMesh, LimitState, MultiStructureMesh, GAUSS2};
use crate::tensor::{Mat3, Mat3x2, Vec3};

/// Closed-form vector field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VecField {
    #[default]
    Zero,
    Constant { value: [f64; 3] },
    /// `value + grad·x`, `grad` given by rows.
    Affine { value: [f64; 3], grad: [[f64; 3]; 3] },
    /// `amplitude·sin(k·x + phase)`.
    Trig { amplitude: [f64; 3], wavevector: [f64; 3], phase: f64 },
}

impl VecField {
    pub fn constant(v: Vec3) -> Self {
        Self::Constant { value: [v.x, v.y, v.z] }
    }

    pub fn eval(&self, x: &Vec3) -> Vec3 {
        match self {
            Self::Zero => Vec3::zeros(),
            Self::Constant { value } => Vec3::from(*value),
            Self::Affine { value, grad } => {
                let g = Mat3::from_fn(|i, j| grad[i][j]);
                Vec3::from(*value) + g * x
            }
            Self::Trig { amplitude, wavevector, phase } => {
                Vec3::from(*amplitude) * (Vec3::from(*wavevector).dot(x) + phase).sin()
            }
        }
    }

    /// Evaluation on `ωᵇ` (fields of `x_α` only).
    pub fn eval2(&self, p: [f64; 2]) -> Vec3 {
        self.eval(&Vec3::new(p[0], p[1], 0.0))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => value.iter().all(|v| *v == 0.0),
            Self::Affine { value, grad } => value.iter().chain(grad.iter().flatten()).all(|v| *v == 0.0),
            Self::Trig { amplitude, .. } => amplitude.iter().all(|v| *v == 0.0),
        }
    }

    fn validate(&self, name: &str, errs: &mut Vec<String>) {
        let finite = match self {
            Self::Zero => true,
            Self::Constant { value } => value.iter().all(|v| v.is_finite()),
            Self::Affine { value, grad } => value.iter().chain(grad.iter().flatten()).all(|v| v.is_finite()),
            Self::Trig { amplitude, wavevector, phase } => {
                amplitude.iter().chain(wavevector).all(|v| v.is_finite()) && phase.is_finite()
            }
        };
        if !finite {
            errs.push(format!("force field `{name}` has non-finite coefficients"));
        }
    }
}

/// Closed-form matrix field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatField {
    #[default]
    Zero,
    /// Rows of the constant matrix.
    Constant { value: [[f64; 3]; 3] },
    /// `value + Σ_k x_k·slope[k]`.
    Affine { value: [[f64; 3]; 3], slope: [[[f64; 3]; 3]; 3] },
    /// `amplitude·sin(k·x + phase)`.
    Trig { amplitude: [[f64; 3]; 3], wavevector: [f64; 3], phase: f64 },
}

fn rows(m: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| m[i][j])
}

impl MatField {
    pub fn constant(m: Mat3) -> Self {
        Self::Constant { value: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])) }
    }

    pub fn eval(&self, x: &Vec3) -> Mat3 {
        match self {
            Self::Zero => Mat3::zeros(),
            Self::Constant { value } => rows(value),
            Self::Affine { value, slope } => (0..3).fold(rows(value), |a, k| a + rows(&slope[k]) * x[k]),
            Self::Trig { amplitude, wavevector, phase } => {
                rows(amplitude) * (Vec3::from(*wavevector).dot(x) + phase).sin()
            }
        }
    }

    /// Whether the columns in `cols` do not depend on the coordinates in `coords`.
    fn columns_independent_of(&self, cols: &[usize], coords: &[usize]) -> bool {
        match self {
            Self::Zero | Self::Constant { .. } => true,
            Self::Affine { slope, .. } => coords.iter().all(|&k| cols.iter().all(|&j| (0..3).all(|i| slope[k][i][j] == 0.0))),
            Self::Trig { amplitude, wavevector, .. } => {
                coords.iter().all(|&k| wavevector[k] == 0.0) || cols.iter().all(|&j| (0..3).all(|i| amplitude[i][j] == 0.0))
            }
        }
    }

    fn finite(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => value.iter().flatten().all(|v| v.is_finite()),
            Self::Affine { value, slope } => value.iter().flatten().chain(slope.iter().flatten().flatten()).all(|v| v.is_finite()),
            Self::Trig { amplitude, wavevector, phase } => {
                amplitude.iter().flatten().chain(wavevector).all(|v| v.is_finite()) && phase.is_finite()
            }
        }
    }
}

/// Matrix field of `x₃` only, the storage of `𝒢ᵃ`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatField", into = "MatField")]
pub struct AxialMat(MatField);

impl TryFrom<MatField> for AxialMat {
    type Error = Error;
    fn try_from(m: MatField) -> Result<Self> {
        AxialMat::new(m)
    }
}

impl From<AxialMat> for MatField {
    fn from(a: AxialMat) -> Self {
        a.0
    }
}

impl AxialMat {
    pub fn new(m: MatField) -> Result<Self> {
        if !m.columns_independent_of(&[0, 1, 2], &[0, 1]) {
            return Err(Error::Config("𝒢ᵃ may depend on x₃ only".into()));
        }
        Ok(Self(m))
    }

    pub fn eval(&self, x3: f64) -> Mat3 {
        self.0.eval(&Vec3::new(0.0, 0.0, x3))
    }

    pub fn field(&self) -> &MatField {
        &self.0
    }
}

/// Divergence-form loads with `Hᵃ_α = Hᵃ_α(x₃)` and `Hᵇ₃ = Hᵇ₃(x_α)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceLoads {
    ha: MatField,
    hb: MatField,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDivergence {
    #[serde(default)]
    ha: MatField,
    #[serde(default)]
    hb: MatField,
}

impl<'de> Deserialize<'de> for DivergenceLoads {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDivergence::deserialize(d)?;
        Self::new(raw.ha, raw.hb).map_err(serde::de::Error::custom)
    }
}

impl DivergenceLoads {
    pub fn new(ha: MatField, hb: MatField) -> Result<Self> {
        let mut errs = Vec::new();
        if !ha.columns_independent_of(&[0, 1], &[0, 1]) {
            errs.push("the first two columns of Hᵃ may depend on x₃ only".to_string());
        }
        if !hb.columns_independent_of(&[2], &[2]) {
            errs.push("the third column of Hᵇ may depend on x_α only".to_string());
        }
        if !ha.finite() || !hb.finite() {
            errs.push("divergence loads have non-finite coefficients".to_string());
        }
        if errs.is_empty() {
            Ok(Self { ha, hb })
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn ha(&self) -> &MatField {
        &self.ha
    }

    pub fn hb(&self) -> &MatField {
        &self.hb
    }
}

/// Base force densities on the fixed domains.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceSystem {
    /// `fᵃ` on `Ωᵃ`.
    pub fa: VecField,
    /// `gᵃ` on `Sᵃ`.
    pub ga: VecField,
    /// `𝒢ᵃ(x₃)`, applied as `𝒢ᵃν`.
    pub ga_matrix: AxialMat,
    pub fb: VecField,
    pub gb_plus: VecField,
    pub gb_minus: VecField,
    /// `Gᵇ` on `ωᵇ`.
    pub gb: VecField,
    /// `ĝ^{b,−}` on `ωᵃ`.
    pub ghat_minus: VecField,
    /// `Ĝᵇ`.
    pub ghat: VecField,
    pub divergence: Option<DivergenceLoads>,
}

impl ForceSystem {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (n, f) in [
            ("fa", &self.fa),
            ("ga", &self.ga),
            ("fb", &self.fb),
            ("gb_plus", &self.gb_plus),
            ("gb_minus", &self.gb_minus),
            ("gb", &self.gb),
            ("ghat_minus", &self.ghat_minus),
            ("ghat", &self.ghat),
        ] {
            f.validate(n, &mut errs);
        }
        if !self.ga_matrix.0.finite() {
            errs.push("force field `ga_matrix` has non-finite coefficients".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Regime {
    /// `h_ε/r_ε² → ℓ ∈ (0, ∞)`.
    LPlus { ell: f64 },
    LInf,
    LZero,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LPlus { .. } => "LPlus",
            Self::LInf => "LInf",
            Self::LZero => "LZero",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    #[default]
    ClampedIdentity,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub p: f64,
    /// `(r_ε, h_ε)` pairs.
    pub eps: Vec<(f64, f64)>,
    pub boundary: BoundaryKind,
}

impl RegimeConfig {
    pub fn new(regime: Regime, p: f64, eps: Vec<(f64, f64)>) -> Self {
        Self { regime, p, eps, boundary: BoundaryKind::ClampedIdentity }
    }

    /// `(r, ℓr²)` for every `r`.
    pub fn lplus(ell: f64, p: f64, radii: &[f64]) -> Self {
        Self::new(Regime::LPlus { ell }, p, radii.iter().map(|r| (*r, ell * r * r)).collect())
    }

    /// `(r, c·r^e)` for every `r`.
    pub fn power_law(regime: Regime, p: f64, radii: &[f64], c: f64, e: f64) -> Self {
        Self::new(regime, p, radii.iter().map(|r| (*r, c * r.powf(e))).collect())
    }

    /// Every violated hypothesis, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let p = self.p;
        if !(p > 1.0 && p.is_finite()) {
            errs.push(format!("p must be a finite real > 1, got {p}"));
        }
        if self.eps.is_empty() {
            errs.push("the ε list is empty".into());
        }
        for (i, (r, h)) in self.eps.iter().enumerate() {
            if !(*r > 0.0 && *h > 0.0 && r.is_finite() && h.is_finite()) {
                errs.push(format!("ε[{i}]: r_ε and h_ε must be positive, got ({r}, {h})"));
            }
        }
        for (i, w) in self.eps.windows(2).enumerate() {
            if !(w[1].0 < w[0].0) {
                errs.push(format!("ε list must be strictly decreasing in r_ε (entries {i} and {})", i + 1));
            }
        }
        match self.regime {
            Regime::LPlus { ell } => {
                if !(ell > 0.0 && ell.is_finite()) {
                    errs.push(format!("LPlus needs ℓ ∈ (0, ∞), got {ell}"));
                }
                for (i, (r, h)) in self.eps.iter().enumerate() {
                    if (h - ell * r * r).abs() > 1e-12 * (ell * r * r).abs().max(1e-300) {
                        errs.push(format!("LPlus needs h_ε = ℓ·r_ε² exactly; ε[{i}] = ({r}, {h})"));
                    }
                }
            }
            Regime::LInf => {
                if !(p > 2.0) {
                    errs.push(format!("LInf requires p > 2 (\"Assume that p>2\"), got p = {p}"));
                }
                let q: Vec<f64> = self.eps.iter().map(|(r, h)| h.powf(p + 1.0) / (r * r)).collect();
                if q.windows(2).any(|w| !(w[1] > w[0])) {
                    errs.push("LInf needs h_ε^{p+1}/r_ε² increasing along the ε list (its limit is ∞)".into());
                }
            }
            Regime::LZero => {
                if !(p <= 2.0) {
                    errs.push(format!("LZero requires p ≤ 2 (\"Assume that p≤2\"), got p = {p}"));
                }
                let q: Vec<f64> = self.eps.iter().map(|(r, h)| h / r.powf(p + 2.0)).collect();
                if q.windows(2).any(|w| !(w[1] < w[0])) {
                    errs.push("LZero needs h_ε/r_ε^{p+2} decreasing toward 0 along the ε list".into());
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn eps_at(&self, i: usize) -> Result<(f64, f64)> {
        self.eps
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("ε index {i} out of range (list has {} entries)", self.eps.len())))
    }
}

/// Regime coefficients of the `ε`-densities:
/// `fᵃ_ε = c_fa fᵃ`, `gᵃ_ε = c_ga gᵃ + c_ga_matrix 𝒢ᵃν`, `fᵇ_ε = c_fb fᵇ`,
/// `g^{b,+}_ε = c_g g^{b,+} + c_gb Gᵇ`, and
/// `g^{b,−}_ε = −(c_g g^{b,−} + c_gb Gᵇ)` off `r ω̄ᵃ`,
/// `−(c_g ĝ^{b,−} + c_gb Ĝᵇ)` on it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coefficients {
    pub c_fa: f64,
    pub c_ga: f64,
    pub c_ga_matrix: f64,
    pub c_fb: f64,
    pub c_g: f64,
    pub c_gb: f64,
}

#[derive(Clone, Debug)]
pub struct EpsForces {
    pub fs: ForceSystem,
    pub regime: Regime,
    pub r: f64,
    pub h: f64,
    pub c: Coefficients,
}

pub fn coefficients(regime: Regime, r: f64, h: f64) -> Coefficients {
    match regime {
        Regime::LPlus { .. } => Coefficients { c_fa: 1.0, c_ga: r, c_ga_matrix: 1.0, c_fb: 1.0, c_g: h, c_gb: 1.0 },
        Regime::LInf => {
            Coefficients { c_fa: 1.0, c_ga: r, c_ga_matrix: 1.0, c_fb: r * r / h, c_g: r * r, c_gb: r * r / h }
        }
        Regime::LZero => Coefficients {
            c_fa: h / (r * r),
            c_ga: h / r,
            c_ga_matrix: h / (r * r),
            c_fb: 1.0,
            c_g: h,
            c_gb: 1.0,
        },
    }
}

pub fn scale_forces(fs: &ForceSystem, cfg: &RegimeConfig, eps_index: usize) -> Result<EpsForces> {
    let (r, h) = cfg.eps_at(eps_index)?;
    Ok(EpsForces { fs: fs.clone(), regime: cfg.regime, r, h, c: coefficients(cfg.regime, r, h) })
}

impl EpsForces {
    pub fn fa(&self, x: &Vec3) -> Vec3 {
        self.fs.fa.eval(x) * self.c.c_fa
    }

    pub fn ga(&self, x: &Vec3, nu: &Vec3) -> Vec3 {
        self.fs.ga.eval(x) * self.c.c_ga + self.fs.ga_matrix.eval(x.z) * nu * self.c.c_ga_matrix
    }

    pub fn fb(&self, x: &Vec3) -> Vec3 {
        self.fs.fb.eval(x) * self.c.c_fb
    }

    pub fn g_plus(&self, p: [f64; 2]) -> Vec3 {
        self.fs.gb_plus.eval2(p) * self.c.c_g + self.fs.gb.eval2(p) * self.c.c_gb
    }

    pub fn g_minus(&self, p: [f64; 2], in_footprint: bool) -> Vec3 {
        if in_footprint {
            -(self.fs.ghat_minus.eval2(p) * self.c.c_g + self.fs.ghat.eval2(p) * self.c.c_gb)
        } else {
            -(self.fs.gb_minus.eval2(p) * self.c.c_g + self.fs.gb.eval2(p) * self.c.c_gb)
        }
    }

    /// Weight of `E_ε^b` in the total energy and of the whole energy.
    pub fn prefactors(&self) -> (f64, f64) {
        let q = self.h / (self.r * self.r);
        match self.regime {
            Regime::LZero => (q, 1.0 / q),
            _ => (q, 1.0),
        }
    }
}

/// `f̄ᵃ`, `ḡᵃ` and `f̄ᵇ` by composite midpoint quadrature.
#[derive(Clone, Debug)]
pub struct ReducedLoads<'a> {
    pub fs: &'a ForceSystem,
    pub sa: f64,
    pub n: usize,
}

pub fn reduced_loads<'a>(fs: &'a ForceSystem, geom: &crate::mesh::Geometry, n: usize) -> ReducedLoads<'a> {
    ReducedLoads { fs, sa: geom.sa, n: n.max(1) }
}

impl ReducedLoads<'_> {
    /// `∫_{ωᵃ} fᵃ(x_α, x₃) dx_α`.
    pub fn fbar_a(&self, x3: f64) -> Vec3 {
        let (n, s) = (self.n, self.sa);
        let d = 2.0 * s / n as f64;
        let mut acc = Vec3::zeros();
        for j in 0..n {
            for i in 0..n {
                let x = Vec3::new(-s + (i as f64 + 0.5) * d, -s + (j as f64 + 0.5) * d, x3);
                acc += self.fs.fa.eval(&x);
            }
        }
        acc * d * d
    }

    /// `∫_{∂ωᵃ} gᵃ(x_α, x₃) dℋ¹`.
    pub fn gbar_a(&self, x3: f64) -> Vec3 {
        let (n, s) = (self.n, self.sa);
        let d = 2.0 * s / n as f64;
        let mut acc = Vec3::zeros();
        for i in 0..n {
            let t = -s + (i as f64 + 0.5) * d;
            for x in [Vec3::new(s, t, x3), Vec3::new(-s, t, x3), Vec3::new(t, s, x3), Vec3::new(t, -s, x3)] {
                acc += self.fs.ga.eval(&x);
            }
        }
        acc * d
    }

    /// `∫_{−1}^0 fᵇ(x_α, x₃) dx₃`.
    pub fn fbar_b(&self, p: [f64; 2]) -> Vec3 {
        let n = self.n;
        let d = 1.0 / n as f64;
        (0..n).fold(Vec3::zeros(), |a, k| a + self.fs.fb.eval(&Vec3::new(p[0], p[1], -1.0 + (k as f64 + 0.5) * d))) * d
    }
}

/// Lateral faces of a tube mesh: each entry is the 4 face node ids (ordered
/// `(s,z) = (0,0),(1,0),(0,1),(1,1)`), the outer normal and the face lengths.
fn lateral_faces(m: &HexMesh) -> Vec<([usize; 4], Vec3, f64, f64)> {
    let (nx, ny, nz) = m.dims();
    let mut out = Vec::new();
    for k in 0..nz - 1 {
        let dz = m.z[k + 1] - m.z[k];
        for j in 0..ny - 1 {
            let dy = m.y[j + 1] - m.y[j];
            for (i, nu) in [(0, -Vec3::x()), (nx - 1, Vec3::x())] {
                out.push(([m.node(i, j, k), m.node(i, j + 1, k), m.node(i, j, k + 1), m.node(i, j + 1, k + 1)], nu, dy, dz));
            }
        }
        for i in 0..nx - 1 {
            let dx = m.x[i + 1] - m.x[i];
            for (j, nu) in [(0, -Vec3::y()), (ny - 1, Vec3::y())] {
                out.push(([m.node(i, j, k), m.node(i + 1, j, k), m.node(i, j, k + 1), m.node(i + 1, j, k + 1)], nu, dx, dz));
            }
        }
    }
    out
}

fn bilinear(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t]
}

/// Adds `∫ f·N_i` over the cells of `m` to `out` (2×2×2 Gauss).
fn body_loads(m: &HexMesh, f: impl Fn(&Vec3) -> Vec3, out: &mut [Vec3]) {
    for c in 0..m.n_cells() {
        let nodes = m.cell_nodes(c);
        let w = m.cell_volume(c) / 8.0;
        for a in GAUSS2 {
            for b in GAUSS2 {
                for cc in GAUSS2 {
                    let xi = [a, b, cc];
                    let v = f(&m.point(c, xi)) * w;
                    let s = HexMesh::shape_values(xi);
                    for l in 0..8 {
                        out[nodes[l]] += v * s[l];
                    }
                }
            }
        }
    }
}

/// Nodal coefficients of the linear functional `L_ε = Lᵃ_ε` (tube nodes) and
/// `Lᵇ_ε` (plate nodes) in their defining form: `L(ψ) = Σ load_i·ψ_i`.
#[derive(Clone, Debug)]
pub struct LoadVectors {
    pub a: Vec<Vec3>,
    pub b: Vec<Vec3>,
}

impl LoadVectors {
    pub fn work_a(&self, psi_a: &[Vec3]) -> f64 {
        self.a.iter().zip(psi_a).map(|(l, p)| l.dot(p)).sum()
    }

    pub fn work_b(&self, psi_b: &[Vec3]) -> f64 {
        self.b.iter().zip(psi_b).map(|(l, p)| l.dot(p)).sum()
    }
}

/// Top and bottom node ids of plate face cell `(i, j)`.
fn plate_face(m: &HexMesh, i: usize, j: usize, k: usize) -> [usize; 4] {
    [m.node(i, j, k), m.node(i + 1, j, k), m.node(i, j + 1, k), m.node(i + 1, j + 1, k)]
}

pub fn load_vectors(ef: &EpsForces, ms: &MultiStructureMesh) -> LoadVectors {
    let (r, h) = (ef.r, ef.h);
    let ma = &ms.hex_a;
    let mb = &ms.hex_b;
    let mut a = vec![Vec3::zeros(); ma.n_nodes()];
    body_loads(ma, |x| ef.fa(x), &mut a);
    for (nodes, nu, ds, dz) in lateral_faces(ma) {
        for s in GAUSS2 {
            for t in GAUSS2 {
                let wts = bilinear(s, t);
                let x = (0..4).fold(Vec3::zeros(), |acc, l| acc + ma.coords(nodes[l]) * wts[l]);
                let g = ef.ga(&x, &nu) * (0.25 * ds * dz / r);
                for l in 0..4 {
                    a[nodes[l]] += g * wts[l];
                }
            }
        }
    }
    let mut b = vec![Vec3::zeros(); mb.n_nodes()];
    body_loads(mb, |x| ef.fb(x), &mut b);
    let top = mb.z.len() - 1;
    for (i, j) in ms.plate_face_cells_outside() {
        let area = (mb.x[i + 1] - mb.x[i]) * (mb.y[j + 1] - mb.y[j]);
        let up = plate_face(mb, i, j, top);
        let down = plate_face(mb, i, j, 0);
        for s in GAUSS2 {
            for t in GAUSS2 {
                let wts = bilinear(s, t);
                let p = [mb.x[i] + s * (mb.x[i + 1] - mb.x[i]), mb.y[j] + t * (mb.y[j + 1] - mb.y[j])];
                let gp = ef.g_plus(p) * (0.25 * area / h);
                let gm = ef.g_minus(p, false) * (0.25 * area / h);
                for l in 0..4 {
                    b[up[l]] += gp * wts[l];
                    b[down[l]] += gm * wts[l];
                }
            }
        }
    }
    let nxy = mb.x.len() * mb.y.len();
    let weights = ms.bottom_weights();
    for ((_, xa), w) in ms.bottom_nodes().zip(&weights) {
        let p = [r * xa[0], r * xa[1]];
        let g = ef.g_minus(p, true) * (w * r * r / h);
        for (id, s) in ms.plate_stencil(p) {
            // bottom-layer node ids coincide with in-plane ids
            debug_assert!(id < nxy);
            b[id] += g * s;
        }
    }
    LoadVectors { a, b }
}

/// `Lᵃ_ε(ψᵃ)` in its defining two-term form.
pub fn work_a_raw(ef: &EpsForces, psi_a: &[Vec3], ms: &MultiStructureMesh) -> Result<f64> {
    check_len(psi_a.len(), ms.hex_a.n_nodes(), "ψᵃ")?;
    Ok(load_vectors(ef, ms).work_a(psi_a))
}

/// `Lᵇ_ε(ψᵇ)` in its defining form.
pub fn work_b_raw(ef: &EpsForces, psi_b: &[Vec3], ms: &MultiStructureMesh) -> Result<f64> {
    check_len(psi_b.len(), ms.hex_b.n_nodes(), "ψᵇ")?;
    Ok(load_vectors(ef, ms).work_b(psi_b))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Mismatch(format!("{what} has {got} entries, mesh has {want}")));
    }
    Ok(())
}

/// `Lᵃ_ε` rewritten with `b̄ᵃ_ε`: body term, `gᵃ` surface term and `∫₀ᴸ𝒢ᵃ:(b̄ᵃ_ε|0)`.
/// `bbar_a` holds one value per node level.
pub fn work_a(ef: &EpsForces, psi_a: &[Vec3], bbar_a: &[Mat3x2], ms: &MultiStructureMesh) -> Result<f64> {
    let ma = &ms.hex_a;
    check_len(psi_a.len(), ma.n_nodes(), "ψᵃ")?;
    check_len(bbar_a.len(), ma.z.len(), "b̄ᵃ")?;
    let c = &ef.c;
    let mut body = vec![Vec3::zeros(); ma.n_nodes()];
    body_loads(ma, |x| ef.fs.fa.eval(x), &mut body);
    let mut total: f64 = c.c_fa * body.iter().zip(psi_a).map(|(l, p)| l.dot(p)).sum::<f64>();
    let mut surf = 0.0;
    for (nodes, _, ds, dz) in lateral_faces(ma) {
        for s in GAUSS2 {
            for t in GAUSS2 {
                let wts = bilinear(s, t);
                let x = (0..4).fold(Vec3::zeros(), |acc, l| acc + ma.coords(nodes[l]) * wts[l]);
                let psi = (0..4).fold(Vec3::zeros(), |acc, l| acc + psi_a[nodes[l]] * wts[l]);
                surf += 0.25 * ds * dz * ef.fs.ga.eval(&x).dot(&psi);
            }
        }
    }
    total += c.c_ga / ef.r * surf;
    let mut moment = 0.0;
    for k in 0..ma.z.len() - 1 {
        let dz = ma.z[k + 1] - ma.z[k];
        for t in GAUSS2 {
            let z = ma.z[k] + t * dz;
            let b = bbar_a[k] * (1.0 - t) + bbar_a[k + 1] * t;
            let g = ef.fs.ga_matrix.eval(z);
            moment += 0.5 * dz * (g.fixed_columns::<2>(0).component_mul(&b)).sum();
        }
    }
    total += c.c_ga_matrix * moment;
    Ok(total)
}

/// `Lᵇ_ε` in the expanded junction form. `bbar_b` holds one value per
/// in-plane plate node; `psi_a` supplies the trace `ψᵃ(·, 0)`.
pub fn work_b(ef: &EpsForces, psi_b: &[Vec3], bbar_b: &[Vec3], psi_a: &[Vec3], ms: &MultiStructureMesh) -> Result<f64> {
    let mb = &ms.hex_b;
    check_len(psi_b.len(), mb.n_nodes(), "ψᵇ")?;
    check_len(psi_a.len(), ms.hex_a.n_nodes(), "ψᵃ")?;
    let nxy = mb.x.len() * mb.y.len();
    check_len(bbar_b.len(), nxy, "b̄ᵇ")?;
    let (r, h, c) = (ef.r, ef.h, &ef.c);
    let fs = &ef.fs;
    let mut body = vec![Vec3::zeros(); mb.n_nodes()];
    body_loads(mb, |x| fs.fb.eval(x), &mut body);
    let mut total: f64 = c.c_fb * body.iter().zip(psi_b).map(|(l, p)| l.dot(p)).sum::<f64>();
    let top = mb.z.len() - 1;
    let nx = mb.x.len();
    let (mut faces, mut moments) = (0.0, 0.0);
    for (i, j) in ms.plate_face_cells_outside() {
        let area = (mb.x[i + 1] - mb.x[i]) * (mb.y[j + 1] - mb.y[j]);
        let up = plate_face(mb, i, j, top);
        let down = plate_face(mb, i, j, 0);
        let cols = [j * nx + i, j * nx + i + 1, (j + 1) * nx + i, (j + 1) * nx + i + 1];
        for s in GAUSS2 {
            for t in GAUSS2 {
                let wts = bilinear(s, t);
                let p = [mb.x[i] + s * (mb.x[i + 1] - mb.x[i]), mb.y[j] + t * (mb.y[j + 1] - mb.y[j])];
                let interp = |ids: &[usize; 4], f: &[Vec3]| (0..4).fold(Vec3::zeros(), |a, l| a + f[ids[l]] * wts[l]);
                let (pp, pm, bb) = (interp(&up, psi_b), interp(&down, psi_b), interp(&cols, bbar_b));
                faces += 0.25 * area * (fs.gb_plus.eval2(p).dot(&pp) - fs.gb_minus.eval2(p).dot(&pm));
                moments += 0.25 * area * fs.gb.eval2(p).dot(&bb);
            }
        }
    }
    total += c.c_g / h * faces + c.c_gb * moments;
    let weights = ms.bottom_weights();
    let (mut hat_g, mut hat_junction, mut hat_moment) = (0.0, 0.0, 0.0);
    for ((node, xa), w) in ms.bottom_nodes().zip(&weights) {
        let p = [r * xa[0], r * xa[1]];
        let st = ms.plate_stencil(p);
        let pm = st.iter().fold(Vec3::zeros(), |a, &(id, s)| a + psi_b[id] * s);
        let bb = st.iter().fold(Vec3::zeros(), |a, &(id, s)| a + bbar_b[id] * s);
        hat_g += w * r * r * fs.ghat_minus.eval2(p).dot(&pm);
        hat_junction += w * fs.ghat.eval2(p).dot(&psi_a[node]);
        hat_moment += w * r * r * fs.ghat.eval2(p).dot(&bb);
    }
    total += -c.c_g / h * hat_g - c.c_gb * r * r / h * hat_junction + c.c_gb * hat_moment;
    Ok(total)
}

/// `|∫_{Ω_ε} f̃_ε + ∫_{S_ε} g̃_ε|` on the physical domain, computed from the
/// load vectors as the work of unit translations.
pub fn resultant(ef: &EpsForces, ms: &MultiStructureMesh) -> Vec3 {
    let lv = load_vectors(ef, ms);
    let sa: Vec3 = lv.a.iter().sum();
    let sb: Vec3 = lv.b.iter().sum();
    (sa + sb * (ef.h / (ef.r * ef.r))) * (ef.r * ef.r)
}

pub fn check_compatibility(ef: &EpsForces, ms: &MultiStructureMesh, tol: f64) -> bool {
    resultant(ef, ms).norm() <= tol
}

/// Linear limit functional `ℒ(s) = constant + Σ va·ψᵃ + Σ ca:b̄ᵃ + Σ vb·ψᵇ + Σ cb·b̄ᵇ`;
/// the limit energies subtract it from their elastic part.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitLoad {
    pub constant: f64,
    pub va: Vec<Vec3>,
    pub ca: Vec<Mat3x2>,
    pub vb: Vec<Vec3>,
    pub cb: Vec<Vec3>,
}

impl LimitLoad {
    pub fn zero(mesh: &LimitMesh) -> Self {
        Self {
            constant: 0.0,
            va: vec![Vec3::zeros(); mesh.interval.nodes.len()],
            ca: vec![Mat3x2::zeros(); mesh.interval.n_elements()],
            vb: vec![Vec3::zeros(); mesh.tri.nodes.len()],
            cb: vec![Vec3::zeros(); mesh.tri.tris.len()],
        }
    }

    pub fn value(&self, s: &LimitState) -> f64 {
        let dot3 = |a: &[Vec3], b: &[Vec3]| a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>();
        self.constant
            + dot3(&self.va, &s.psi_a)
            + self.ca.iter().zip(&s.bbar_a).map(|(x, y)| x.dot(y)).sum::<f64>()
            + dot3(&self.vb, &s.psi_b)
            + dot3(&self.cb, &s.bbar_b)
    }

    pub fn add(&mut self, o: &LimitLoad) {
        self.constant += o.constant;
        for (a, b) in self.va.iter_mut().zip(&o.va) {
            *a += b;
        }
        for (a, b) in self.ca.iter_mut().zip(&o.ca) {
            *a += b;
        }
        for (a, b) in self.vb.iter_mut().zip(&o.vb) {
            *a += b;
        }
        for (a, b) in self.cb.iter_mut().zip(&o.cb) {
            *a += b;
        }
    }
}

/// Edge-midpoint points of a triangle (weights `area/3`).
fn tri_points(mesh: &LimitMesh, t: usize) -> [([f64; 2], [f64; 3]); 3] {
    let [a, b, c] = mesh.tri.tris[t].map(|i| mesh.tri.nodes[i]);
    let mid = |p: [f64; 2], q: [f64; 2]| [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
    [(mid(a, b), [0.5, 0.5, 0.0]), (mid(b, c), [0.0, 0.5, 0.5]), (mid(a, c), [0.5, 0.0, 0.5])]
}

/// String loads `∫₀ᴸ (f̄ᵃ + ḡᵃ)·ψᵃ + 𝒢ᵃ:(b̄ᵃ|0)`.
fn string_load(fs: &ForceSystem, mesh: &LimitMesh, quad: usize, out: &mut LimitLoad) {
    let red = reduced_loads(fs, &mesh.geometry, quad);
    let iv = &mesh.interval;
    for e in 0..iv.n_elements() {
        let dz = iv.length(e);
        for t in GAUSS2 {
            let z = iv.nodes[e] + t * dz;
            let f = (red.fbar_a(z) + red.gbar_a(z)) * (0.5 * dz);
            out.va[e] += f * (1.0 - t);
            out.va[e + 1] += f * t;
            out.ca[e] += fs.ga_matrix.eval(z).fixed_columns::<2>(0) * (0.5 * dz);
        }
    }
}

/// Membrane loads `∫_{ωᵇ} f̄ᵇ·ψᵇ + (g^{b,+} − g^{b,−})·ψᵇ + Gᵇ·b̄ᵇ`, scaled by `w`.
fn membrane_load(fs: &ForceSystem, mesh: &LimitMesh, quad: usize, w: f64, out: &mut LimitLoad) {
    let red = reduced_loads(fs, &mesh.geometry, quad);
    for t in 0..mesh.tri.tris.len() {
        let wq = w * mesh.tri.area(t) / 3.0;
        let ids = mesh.tri.tris[t];
        for (p, bary) in tri_points(mesh, t) {
            let f = (red.fbar_b(p) + fs.gb_plus.eval2(p) - fs.gb_minus.eval2(p)) * wq;
            for l in 0..3 {
                out.vb[ids[l]] += f * bary[l];
            }
            out.cb[t] += fs.gb.eval2(p) * wq;
        }
    }
}

/// Load part of the limit energy of `regime`, as the functional subtracted.
pub fn limit_load(regime: Regime, fs: &ForceSystem, mesh: &LimitMesh, quad: usize) -> LimitLoad {
    let mut out = LimitLoad::zero(mesh);
    let a_bar = mesh.geometry.a_bar();
    match regime {
        Regime::LPlus { ell } => {
            string_load(fs, mesh, quad, &mut out);
            membrane_load(fs, mesh, quad, ell, &mut out);
            // pseudo-coupling enters the energy with a plus sign
            out.va[0] -= fs.ghat.eval2([0.0, 0.0]) * a_bar;
        }
        Regime::LInf => {
            string_load(fs, mesh, quad, &mut out);
            let red = reduced_loads(fs, &mesh.geometry, quad);
            for t in 0..mesh.tri.tris.len() {
                let wq = mesh.tri.area(t) / 3.0;
                for (p, _) in tri_points(mesh, t) {
                    let f = red.fbar_b(p) + fs.gb_plus.eval2(p) - fs.gb_minus.eval2(p);
                    out.constant += wq * (f.x * p[0] + f.y * p[1] + fs.gb.eval2(p).z);
                }
            }
        }
        Regime::LZero => {
            membrane_load(fs, mesh, quad, 1.0, &mut out);
            let red = reduced_loads(fs, &mesh.geometry, quad);
            let iv = &mesh.interval;
            for e in 0..iv.n_elements() {
                let dz = iv.length(e);
                for t in GAUSS2 {
                    let z = iv.nodes[e] + t * dz;
                    let g = fs.ga_matrix.eval(z);
                    out.constant += 0.5 * dz * ((red.fbar_a(z).z + red.gbar_a(z).z) * z + a_bar * (g[(0, 0)] + g[(1, 1)]));
                }
            }
        }
    }
    out
}

/// Divergence-form limit functional
/// `L̂ = ∫₀ᴸHᵃ_α:b̄ᵃ + ∫_{Ωᵃ}Hᵃ₃·∇₃ψᵃ + ∫_{Ωᵇ}Hᵇ_α:∇_αψᵇ + ∫_{ωᵇ}Hᵇ₃·b̄ᵇ`.
pub fn divergence_load(div: &DivergenceLoads, mesh: &LimitMesh, quad: usize) -> LimitLoad {
    let mut out = LimitLoad::zero(mesh);
    let sa = mesh.geometry.sa;
    let n = quad.max(1);
    let d = 2.0 * sa / n as f64;
    let iv = &mesh.interval;
    for e in 0..iv.n_elements() {
        let dz = iv.length(e);
        for t in GAUSS2 {
            let z = iv.nodes[e] + t * dz;
            out.ca[e] += div.ha.eval(&Vec3::new(0.0, 0.0, z)).fixed_columns::<2>(0) * (0.5 * dz);
            let mut h3 = Vec3::zeros();
            for j in 0..n {
                for i in 0..n {
                    let x = Vec3::new(-sa + (i as f64 + 0.5) * d, -sa + (j as f64 + 0.5) * d, z);
                    h3 += div.ha.eval(&x).column(2);
                }
            }
            // ∇₃ψ = (ψ_{e+1} − ψ_e)/dz on the element
            let v = h3 * (d * d * 0.5);
            out.va[e] -= v;
            out.va[e + 1] += v;
        }
    }
    let m = n;
    for t in 0..mesh.tri.tris.len() {
        let wq = mesh.tri.area(t) / 3.0;
        let g = mesh.tri.basis_gradients(t);
        let ids = mesh.tri.tris[t];
        for (p, _) in tri_points(mesh, t) {
            let mut ha = Mat3x2::zeros();
            for k in 0..m {
                let x = Vec3::new(p[0], p[1], -1.0 + (k as f64 + 0.5) / m as f64);
                ha += div.hb.eval(&x).fixed_columns::<2>(0) / m as f64;
            }
            for l in 0..3 {
                out.vb[ids[l]] += (ha.column(0) * g[l][0] + ha.column(1) * g[l][1]) * wq;
            }
            out.cb[t] += div.hb.eval(&Vec3::new(p[0], p[1], 0.0)).column(2) * wq;
        }
    }
    out
}

/// `∫_{Ωᵃ}Hᵃ:(r⁻¹∇_αψᵃ|∇₃ψᵃ) + ∫_{Ωᵇ}Hᵇ:(∇_αψᵇ|h⁻¹∇₃ψᵇ)` by 2×2×2 Gauss
/// quadrature on the hex meshes.
pub fn divergence_work_eps(ha: &MatField, hb: &MatField, psi_a: &[Vec3], psi_b: &[Vec3], r: f64, h: f64, ms: &MultiStructureMesh) -> f64 {
    let mut total = 0.0;
    for (m, field, psi, scale) in [(&ms.hex_a, ha, psi_a, Vec3::new(1.0 / r, 1.0 / r, 1.0)), (&ms.hex_b, hb, psi_b, Vec3::new(1.0, 1.0, 1.0 / h))] {
        for c in 0..m.n_cells() {
            let w = m.cell_volume(c) / 8.0;
            for a in GAUSS2 {
                for b in GAUSS2 {
                    for cc in GAUSS2 {
                        let xi = [a, b, cc];
                        let grad = m.gradient(psi, c, xi) * Mat3::from_diagonal(&scale);
                        total += w * field.eval(&m.point(c, xi)).dot(&grad);
                    }
                }
            }
        }
    }
    total
}

/// Divergence-form limit functional evaluated at a limit state.
pub fn divergence_work(div: &DivergenceLoads, state: &LimitState, mesh: &LimitMesh, quad: usize) -> Result<f64> {
    state.check_layout(mesh)?;
    Ok(divergence_load(div, mesh, quad).value(state))
}

/// Uniform box grid for the Green-identity check of [`forces_from_h`].
#[derive(Clone, Debug)]
pub struct BoxGrid {
    pub lo: Vec3,
    pub hi: Vec3,
    pub n: usize,
}

impl BoxGrid {
    pub fn spacing(&self) -> Vec3 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let d = self.spacing();
        self.lo + Vec3::new(i as f64 * d.x, j as f64 * d.y, k as f64 * d.z)
    }

    fn id(&self, i: usize, j: usize, k: usize) -> usize {
        (k * (self.n + 1) + j) * (self.n + 1) + i
    }

    fn trap(&self, i: usize) -> f64 {
        if i == 0 || i == self.n {
            0.5
        } else {
            1.0
        }
    }
}

/// Nodal body force `f = −(div H¹, div H², div H³)` by central differences
/// (one-sided on the boundary) and boundary force `g = Hν` per boundary node
/// and face.
#[derive(Clone, Debug)]
pub struct FromH {
    pub f: Vec<Vec3>,
    /// `(node id, outer normal, Hν)` for every node on every face it lies on.
    pub g: Vec<(usize, Vec3, Vec3)>,
}

pub fn forces_from_h(h_nodes: &[Mat3], grid: &BoxGrid) -> Result<FromH> {
    let n = grid.n;
    check_len(h_nodes.len(), (n + 1).pow(3), "H")?;
    let d = grid.spacing();
    let mut f = vec![Vec3::zeros(); h_nodes.len()];
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                let idx = [i, j, k];
                let mut div = Vec3::zeros();
                for (dir, hd) in [d.x, d.y, d.z].into_iter().enumerate() {
                    let at = |o: isize| {
                        let mut q = idx;
                        q[dir] = (q[dir] as isize + o) as usize;
                        h_nodes[grid.id(q[0], q[1], q[2])].column(dir).into_owned()
                    };
                    let deriv = if idx[dir] == 0 {
                        (at(1) - at(0)) / hd
                    } else if idx[dir] == n {
                        (at(0) - at(-1)) / hd
                    } else {
                        (at(1) - at(-1)) / (2.0 * hd)
                    };
                    div += deriv;
                }
                f[grid.id(i, j, k)] = -div;
            }
        }
    }
    let mut g = Vec::new();
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                let id = grid.id(i, j, k);
                for (dir, c) in [i, j, k].into_iter().enumerate() {
                    let mut nu = Vec3::zeros();
                    if c == 0 {
                        nu[dir] = -1.0;
                    } else if c == n {
                        nu[dir] = 1.0;
                    } else {
                        continue;
                    }
                    g.push((id, nu, h_nodes[id] * nu));
                }
            }
        }
    }
    Ok(FromH { f, g })
}

/// `|∫H:∇θ − ∫f·θ − ∫g·θ|` by nodal trapezoid quadrature.
pub fn green_residual(h_nodes: &[Mat3], from: &FromH, grid: &BoxGrid, theta: impl Fn(&Vec3) -> Vec3, grad_theta: impl Fn(&Vec3) -> Mat3) -> f64 {
    let n = grid.n;
    let d = grid.spacing();
    let dv = d.x * d.y * d.z;
    let (mut lhs, mut body) = (0.0, 0.0);
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                let w = grid.trap(i) * grid.trap(j) * grid.trap(k) * dv;
                let x = grid.point(i, j, k);
                let id = grid.id(i, j, k);
                lhs += w * h_nodes[id].dot(&grad_theta(&x));
                body += w * from.f[id].dot(&theta(&x));
            }
        }
    }
    let mut surf = 0.0;
    for (id, nu, g) in &from.g {
        let k = id / ((n + 1) * (n + 1));
        let j = (id / (n + 1)) % (n + 1);
        let i = id % (n + 1);
        let (w, da) = match nu.iamax() {
            0 => (grid.trap(j) * grid.trap(k), d.y * d.z),
            1 => (grid.trap(i) * grid.trap(k), d.x * d.z),
            _ => (grid.trap(i) * grid.trap(j), d.x * d.y),
        };
        surf += w * da * g.dot(&theta(&grid.point(i, j, k)));
    }
    (lhs - body - surf).abs()
}
