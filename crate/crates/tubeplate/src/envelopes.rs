//! Upper estimates of the convex envelope `𝒞W` and of the
//! cross-quasiconvex-convex envelope `𝒬𝒞W = Q*W`, the reduced densities
//! `W₀`, `W₁`, and the ordering checks between them.
//!
//! Both estimators minimize over feasible competitors that include the
//! trivial one, so they never exceed `W` at the target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::material::{scaled_density_a, Density, EnergyDensity};
use crate::optim::{lbfgs, LbfgsOptions};
use crate::tensor::{alpha, col3, i_alpha, join, rotation_from_vector, Mat3, Mat3x2, Vec3};

/// Parameters of an envelope evaluation at one target matrix.
#[derive(Clone, Debug)]
pub struct EnvelopeQuery {
    pub density: EnergyDensity,
    pub target: Mat3,
    /// Number of lamination support points.
    pub points: usize,
    pub multistart: usize,
    /// Cell grid resolution for the cell formula.
    pub cell_n: usize,
    pub tol: f64,
    pub seed: u64,
}

impl EnvelopeQuery {
    pub fn new(density: EnergyDensity, target: Mat3) -> Self {
        Self { density, target, points: 10, multistart: 16, cell_n: 4, tol: 1e-6, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 2 || self.cell_n < 2 || !(self.tol > 0.0) || self.multistart == 0 {
            return Err(Error::Config(
                "envelope query needs points ≥ 2, cell_n ≥ 2, multistart ≥ 1 and tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A finite convex combination `Σ λᵢ δ_{Fᵢ}` realizing an envelope value.
#[derive(Clone, Debug)]
pub struct Lamination {
    pub value: f64,
    pub weights: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// No competitor improved on the single-point one.
    pub stalled: bool,
}

impl Lamination {
    /// Barycentre `Σ λᵢ Fᵢ`.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.points.first().map_or(0, |p| p.len());
        let mut m = vec![0.0; d];
        for (l, p) in self.weights.iter().zip(&self.points) {
            for k in 0..d {
                m[k] += l * p[k];
            }
        }
        m
    }

    /// Value and gradient of the competitor obtained by translating every
    /// support point by `shift`; feasible for the shifted target.
    pub fn shifted(&self, w: &dyn Fn(&[f64], &mut [f64]) -> f64, shift: &[f64]) -> (f64, Vec<f64>) {
        let d = shift.len();
        let mut grad = vec![0.0; d];
        let mut gi = vec![0.0; d];
        let mut f = vec![0.0; d];
        let mut value = 0.0;
        for (l, p) in self.weights.iter().zip(&self.points) {
            for k in 0..d {
                f[k] = p[k] + shift[k];
            }
            value += l * w(&f, &mut gi);
            for k in 0..d {
                grad[k] += l * gi[k];
            }
        }
        (value, grad)
    }
}

/// Setup of a lamination search in `ℝᵈ`.
#[derive(Clone, Debug)]
pub struct LaminationSpec {
    /// Coordinates whose weighted mean is pinned to the target.
    pub constrained: Vec<bool>,
    /// Target; free coordinates give the trivial competitor's values.
    pub target: Vec<f64>,
    pub points: usize,
    pub starts: usize,
    pub seed: u64,
    /// Typical size of random start perturbations.
    pub scale: f64,
    pub lbfgs: LbfgsOptions,
}

impl LaminationSpec {
    pub fn full(target: Vec<f64>, points: usize, starts: usize, seed: u64) -> Self {
        let d = target.len();
        Self {
            constrained: vec![true; d],
            target,
            points,
            starts,
            seed,
            scale: 1.0,
            lbfgs: LbfgsOptions { max_iter: 600, rel_tol: 1e-14, ..Default::default() },
        }
    }
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Decodes lamination variables into weights and support points.
fn decode(spec: &LaminationSpec, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, f64) {
    let d = spec.target.len();
    let n = spec.points;
    let lam = softmax(&x[n * d..]);
    let s: f64 = lam.iter().map(|l| l * l).sum();
    let mut c = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            if spec.constrained[k] {
                c[k] += lam[i] * x[i * d + k];
            }
        }
    }
    for v in c.iter_mut() {
        *v /= s;
    }
    let pts = (0..n)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let e = x[i * d + k];
                    spec.target[k] + if spec.constrained[k] { e - lam[i] * c[k] } else { e }
                })
                .collect()
        })
        .collect();
    (lam, pts, c, s)
}

fn lamination_objective(
    w: &dyn Fn(&[f64], &mut [f64]) -> f64,
    spec: &LaminationSpec,
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let d = spec.target.len();
    let n = spec.points;
    let (lam, pts, c, s) = decode(spec, x);
    let mut wv = vec![0.0; n];
    let mut gs = vec![vec![0.0; d]; n];
    for i in 0..n {
        wv[i] = w(&pts[i], &mut gs[i]);
    }
    let f: f64 = (0..n).map(|i| lam[i] * wv[i]).sum();
    // Σ λᵢ² Gᵢ on the constrained coordinates
    let mut sg = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            if spec.constrained[k] {
                sg[k] += lam[i] * lam[i] * gs[i][k];
            }
        }
    }
    let mut dl = vec![0.0; n];
    for kpt in 0..n {
        let lk = lam[kpt];
        let mut gc = 0.0;
        let mut sge = 0.0;
        for k in 0..d {
            let gk = gs[kpt][k];
            if spec.constrained[k] {
                grad[kpt * d + k] = lk * gk - lk / s * sg[k];
                gc += gk * c[k];
                sge += sg[k] * (x[kpt * d + k] - 2.0 * lk * c[k]);
            } else {
                grad[kpt * d + k] = lk * gk;
            }
        }
        dl[kpt] = wv[kpt] - lk * gc - sge / s;
    }
    let mean: f64 = (0..n).map(|i| lam[i] * dl[i]).sum();
    for j in 0..n {
        grad[n * d + j] = lam[j] * (dl[j] - mean);
    }
    f
}

/// Minimizes `Σ λᵢ w(Fᵢ)` over convex combinations whose constrained
/// coordinates average to the target.
pub fn laminate(
    w: &dyn Fn(&[f64], &mut [f64]) -> f64,
    spec: &LaminationSpec,
    warm: Option<&Lamination>,
) -> Lamination {
    let d = spec.target.len();
    let n = spec.points;
    let mut g0 = vec![0.0; d];
    let trivial = w(&spec.target, &mut g0);
    let mut best = Lamination {
        value: trivial,
        weights: vec![1.0],
        points: vec![spec.target.clone()],
        stalled: true,
    };
    let run = |x0: Vec<f64>, best: &mut Lamination| {
        let out = lbfgs(|x, g| lamination_objective(w, spec, x, g), x0, &spec.lbfgs, None);
        if out.f < best.value {
            let (lam, pts, _, _) = decode(spec, &out.x);
            best.value = out.f;
            best.weights = lam;
            best.points = pts;
            best.stalled = false;
        }
    };
    if let Some(wl) = warm {
        if wl.points.len() <= n {
            let m = wl.mean();
            let mut x0 = vec![0.0; n * d + n];
            for i in 0..n {
                let (l, p) = if i < wl.points.len() {
                    (wl.weights[i], &wl.points[i])
                } else {
                    (1e-9, &wl.points[0])
                };
                for k in 0..d {
                    x0[i * d + k] = if spec.constrained[k] { p[k] - m[k] } else { p[k] - spec.target[k] };
                }
                x0[n * d + i] = l.max(1e-12).ln();
            }
            run(x0, &mut best);
        }
    }
    for s in 0..spec.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(s as u64));
        let mut x0 = vec![0.0; n * d + n];
        match s {
            0 => {}
            s if s % 2 == 1 => {
                // opposite pairs along random constrained directions
                let amp = spec.scale * [0.5, 1.0, 1.5][(s / 2) % 3];
                for pair in 0..n / 2 {
                    let mut u: Vec<f64> = (0..d)
                        .map(|k| if spec.constrained[k] { gauss(&mut rng) } else { 0.0 })
                        .collect();
                    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    u.iter_mut().for_each(|v| *v *= amp / nu);
                    for k in 0..d {
                        x0[2 * pair * d + k] = u[k];
                        x0[(2 * pair + 1) * d + k] = -u[k];
                    }
                }
            }
            s => {
                let sigma = spec.scale * [0.3, 0.7, 1.2][(s / 2) % 3];
                for v in x0[..n * d].iter_mut() {
                    *v = sigma * gauss(&mut rng);
                }
                for v in x0[n * d..].iter_mut() {
                    *v = 0.5 * gauss(&mut rng);
                }
            }
        }
        run(x0, &mut best);
    }
    best
}

pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn mat_to_vec(m: &Mat3) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub(crate) fn vec_to_mat(v: &[f64]) -> Mat3 {
    Mat3::from_column_slice(v)
}

/// Point density on `ℝ⁹` (column-major) wrapping a matrix density.
pub fn flat_density(w: &dyn Density) -> impl Fn(&[f64], &mut [f64]) -> f64 + '_ {
    move |x: &[f64], g: &mut [f64]| {
        let (v, gm) = w.value_grad(&vec_to_mat(x));
        g.copy_from_slice(gm.as_slice());
        v
    }
}

/// Upper estimate of `𝒞W(F)` for any density.
pub fn convex_envelope_of(w: &dyn Density, target: &Mat3, points: usize, starts: usize, seed: u64) -> Lamination {
    let scale = 0.5 * (1.0 + target.norm());
    let mut spec = LaminationSpec::full(mat_to_vec(target), points, starts, seed);
    spec.scale = scale;
    laminate(&flat_density(w), &spec, None)
}

/// Upper estimate of the convex envelope `𝒞W` at the query target.
pub fn convex_envelope(q: &EnvelopeQuery) -> Result<Lamination> {
    q.validate()?;
    q.density.validate()?;
    Ok(convex_envelope_of(&q.density, &q.target, q.points, q.multistart, q.seed))
}

/// `((t² − 1)⁺)²`, the radial convexification of the quartic profile.
pub fn radial_envelope_oracle(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("radius must be non-negative, got {t}")));
    }
    Ok((t * t - 1.0).max(0.0).powi(2))
}

fn multistart_descent(
    f: &dyn Fn(&[f64], &mut [f64]) -> f64,
    starts: Vec<Vec<f64>>,
) -> (f64, Vec<f64>) {
    let opts = LbfgsOptions { max_iter: 400, rel_tol: 1e-15, ..Default::default() };
    let mut best = (f64::INFINITY, Vec::new());
    for x0 in starts {
        let out = lbfgs(|x, g| f(x, g), x0, &opts, None);
        if out.f < best.0 {
            best = (out.f, out.x);
        }
    }
    best
}

fn rotation_taking_e3_to(z: &Vec3) -> Mat3 {
    let n = z.norm();
    if n < 1e-14 {
        return Mat3::identity();
    }
    let u = z / n;
    let e3 = Vec3::z();
    let axis = e3.cross(&u);
    let s = axis.norm();
    if s < 1e-14 {
        return if u.z > 0.0 { Mat3::identity() } else { Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)) };
    }
    rotation_from_vector(&(axis / s * s.atan2(u.dot(&e3))))
}

/// `W₀(ζ) = inf_b W(b|ζ)` over `b ∈ ℝ^{3×2}`, with the best completion found.
pub fn reduced_w0_with(w: &dyn Density, zeta: &Vec3, multistart: usize, seed: u64) -> (f64, Mat3x2) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rotation_taking_e3_to(zeta);
    let mut starts: Vec<Vec<f64>> = vec![i_alpha().as_slice().to_vec(), (r * i_alpha()).as_slice().to_vec()];
    while starts.len() < multistart.max(1) + 1 {
        let base = if starts.len().is_multiple_of(2) { i_alpha() } else { r * i_alpha() };
        starts.push((base + Mat3x2::from_fn(|_, _| 0.5 * gauss(&mut rng))).as_slice().to_vec());
    }
    starts.truncate(multistart.max(1));
    let f = |x: &[f64], g: &mut [f64]| {
        let b = Mat3x2::from_column_slice(x);
        let (v, gm) = w.value_grad(&join(&b, zeta));
        g.copy_from_slice(alpha(&gm).as_slice());
        v
    };
    let (v, x) = multistart_descent(&f, starts);
    let b = Mat3x2::from_column_slice(&x);
    (v.min(w.value(&join(&b, zeta))), b)
}

/// Upper estimate of `W₀(ζ)`.
pub fn reduced_w0(w: &EnergyDensity, zeta: &Vec3, multistart: usize) -> f64 {
    reduced_w0_with(w, zeta, multistart, 7).0
}

/// `W₁(M_α) = inf_b W(M_α|b)` over `b ∈ ℝ³`, with the best completion.
pub fn reduced_w1_with(w: &dyn Density, m_alpha: &Mat3x2, multistart: usize, seed: u64) -> (f64, Vec3) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cross = m_alpha.column(0).cross(&m_alpha.column(1));
    let nc = cross.norm();
    let normal = if nc > 1e-14 { cross / nc } else { Vec3::z() };
    let mut starts: Vec<Vec<f64>> = vec![Vec3::z().as_slice().to_vec(), normal.as_slice().to_vec()];
    while starts.len() < multistart.max(1) {
        let base = if starts.len().is_multiple_of(2) { Vec3::z() } else { normal };
        starts.push((base + Vec3::from_fn(|_, _| 0.5 * gauss(&mut rng))).as_slice().to_vec());
    }
    starts.truncate(multistart.max(1));
    let f = |x: &[f64], g: &mut [f64]| {
        let b = Vec3::from_column_slice(x);
        let (v, gm) = w.value_grad(&join(m_alpha, &b));
        g.copy_from_slice(col3(&gm).as_slice());
        v
    };
    let (v, x) = multistart_descent(&f, starts);
    (v, Vec3::from_column_slice(&x))
}

/// Upper estimate of `W₁(M_α)`.
pub fn reduced_w1(w: &EnergyDensity, m_alpha: &Mat3x2, multistart: usize) -> f64 {
    reduced_w1_with(w, m_alpha, multistart, 7).0
}

/// Convexification of a radial function `ζ ↦ g(|ζ|)` on `ℝᵈ`, `d ≥ 2`:
/// the lower convex hull of the even extension of `g`, sampled on a grid.
#[derive(Clone, Debug)]
pub struct RadialHull {
    /// Hull vertices `(t, value)` with `t ≥ 0`, increasing.
    vertices: Vec<(f64, f64)>,
}

impl RadialHull {
    pub fn build(profile: impl Fn(f64) -> f64, t_max: f64, samples: usize) -> Self {
        let m = samples.max(3);
        let pts: Vec<(f64, f64)> = (0..=2 * m)
            .map(|i| {
                let t = -t_max + t_max * i as f64 / m as f64;
                (t, profile(t.abs()))
            })
            .collect();
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for p in pts {
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        let vertices = hull.into_iter().filter(|v| v.0 >= -1e-15).map(|(t, v)| (t.max(0.0), v)).collect::<Vec<_>>();
        let mut vertices = vertices;
        if vertices[0].0 > 0.0 {
            // hull is flat across the origin
            let v0 = vertices[0];
            vertices.insert(0, (0.0, v0.1));
        }
        Self { vertices }
    }

    /// Value and derivative in `t`, extrapolating the last segment.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let v = &self.vertices;
        let i = v.partition_point(|p| p.0 <= t).saturating_sub(1).min(v.len() - 2);
        let slope = (v[i + 1].1 - v[i].1) / (v[i + 1].0 - v[i].0);
        (v[i].1 + slope * (t - v[i].0), slope)
    }

    /// Value and gradient of `ζ ↦ hull(|ζ|)`.
    pub fn eval_vec(&self, z: &Vec3) -> (f64, Vec3) {
        let t = z.norm();
        let (v, d) = self.eval(t);
        if t < 1e-300 {
            return (v, Vec3::zeros());
        }
        (v, z * (d / t))
    }
}

/// `𝒞W₀` of a frame-indifferent density as a radial hull of `t ↦ W₀(t e₃)`.
pub fn convexified_w0_radial(w: &dyn Density, t_max: f64, samples: usize) -> RadialHull {
    RadialHull::build(|t| reduced_w0_with(w, &(Vec3::z() * t), 4, 11).0, t_max, samples)
}

/// Discrete periodic cell competitor for `Q*W`.
#[derive(Clone, Debug)]
pub struct CellEstimate {
    pub value: f64,
    pub n: usize,
    /// Nodal displacement, three entries per node, node `(i, j, k)` at `(k·n + j)·n + i`.
    pub xi: Vec<f64>,
    pub mu: f64,
    /// Third column when it was a free variable.
    pub m3: Vec3,
    pub stalled: bool,
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

struct Cell {
    n: usize,
}

impl Cell {
    fn nodes(&self) -> usize {
        self.n * self.n * (self.n + 1)
    }

    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.n;
        (k * n + (j % n)) * n + (i % n)
    }

    /// `ξ = η − (k/n)·a(η)` removing the mean `x₃`-slope.
    fn project(&self, eta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let a = self.slope(eta);
        let mut xi = eta.to_vec();
        for k in 0..=n {
            let s = k as f64 / n as f64;
            for j in 0..n {
                for i in 0..n {
                    let p = self.idx(i, j, k);
                    for c in 0..3 {
                        xi[3 * p + c] -= s * a[c];
                    }
                }
            }
        }
        xi
    }

    fn slope(&self, eta: &[f64]) -> [f64; 3] {
        let n = self.n;
        let mut a = [0.0; 3];
        for j in 0..n {
            for i in 0..n {
                let (t, b) = (self.idx(i, j, n), self.idx(i, j, 0));
                for c in 0..3 {
                    a[c] += eta[3 * t + c] - eta[3 * b + c];
                }
            }
        }
        a.map(|v| v / (n * n) as f64)
    }

    /// Adjoint of [`Cell::project`].
    fn project_adjoint(&self, g: &mut [f64]) {
        let n = self.n;
        let mut s = [0.0; 3];
        for k in 0..=n {
            let f = k as f64 / n as f64;
            for j in 0..n {
                for i in 0..n {
                    let p = self.idx(i, j, k);
                    for c in 0..3 {
                        s[c] += f * g[3 * p + c];
                    }
                }
            }
        }
        let w = 1.0 / (n * n) as f64;
        for j in 0..n {
            for i in 0..n {
                let (t, b) = (self.idx(i, j, n), self.idx(i, j, 0));
                for c in 0..3 {
                    g[3 * t + c] -= w * s[c];
                    g[3 * b + c] += w * s[c];
                }
            }
        }
    }

    /// Cell energy of `(M_α + μ∇_αξ | M₃ + ∇₃ξ)` on the Kuhn P1 mesh, with
    /// gradients in `ξ`, `μ` and the matrix argument.
    fn energy(
        &self,
        w: &dyn Density,
        m: &Mat3,
        xi: &[f64],
        mu: f64,
        gxi: Option<&mut [f64]>,
    ) -> (f64, f64, Mat3) {
        let n = self.n;
        let nf = n as f64;
        let wt = 1.0 / (6.0 * nf * nf * nf);
        let mut total = 0.0;
        let mut gmu = 0.0;
        let mut gm = Mat3::zeros();
        let mut gx = gxi;
        if let Some(g) = gx.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    for perm in &PERMS {
                        let mut v = [i, j, k];
                        let mut path = [0usize; 4];
                        path[0] = self.idx(v[0], v[1], v[2]);
                        for (mstep, &c) in perm.iter().enumerate() {
                            v[c] += 1;
                            path[mstep + 1] = self.idx(v[0], v[1], v[2]);
                        }
                        let mut grad = Mat3::zeros();
                        for (mstep, &c) in perm.iter().enumerate() {
                            for comp in 0..3 {
                                grad[(comp, c)] = nf * (xi[3 * path[mstep + 1] + comp] - xi[3 * path[mstep] + comp]);
                            }
                        }
                        let mut f = *m;
                        for comp in 0..3 {
                            f[(comp, 0)] += mu * grad[(comp, 0)];
                            f[(comp, 1)] += mu * grad[(comp, 1)];
                            f[(comp, 2)] += grad[(comp, 2)];
                        }
                        let (val, g) = w.value_grad(&f);
                        total += wt * val;
                        gm += g * wt;
                        for comp in 0..3 {
                            gmu += wt * (g[(comp, 0)] * grad[(comp, 0)] + g[(comp, 1)] * grad[(comp, 1)]);
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            for (mstep, &c) in perm.iter().enumerate() {
                                let factor = if c == 2 { 1.0 } else { mu };
                                for comp in 0..3 {
                                    let d = wt * nf * factor * g[(comp, c)];
                                    gx[3 * path[mstep + 1] + comp] += d;
                                    gx[3 * path[mstep] + comp] -= d;
                                }
                            }
                        }
                    }
                }
            }
        }
        (total, gmu, gm)
    }

    /// P1 prolongation from the grid of size `n/2`.
    fn prolong(&self, coarse: &Cell, xc: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; 3 * self.nodes()];
        for k in 0..=n {
            for j in 0..n {
                for i in 0..n {
                    let base = [i / 2, j / 2, k / 2];
                    let odd = [i % 2, j % 2, k % 2];
                    let p0 = coarse.idx(base[0], base[1], base[2]);
                    let p1 = coarse.idx(base[0] + odd[0], base[1] + odd[1], base[2] + odd[2]);
                    let q = self.idx(i, j, k);
                    for c in 0..3 {
                        out[3 * q + c] = 0.5 * (xc[3 * p0 + c] + xc[3 * p1 + c]);
                    }
                }
            }
        }
        out
    }
}

impl CellEstimate {
    /// Frozen-microstructure competitor at a new matrix argument: value and
    /// gradient with respect to the matrix.
    pub fn frozen(&self, w: &dyn Density, m: &Mat3) -> (f64, Mat3) {
        let cell = Cell { n: self.n };
        let (v, _, g) = cell.energy(w, m, &self.xi, self.mu, None);
        (v, g)
    }
}

/// Options of the cell-formula estimate.
#[derive(Clone, Debug)]
pub struct CellOptions {
    pub n: usize,
    pub starts: usize,
    pub seed: u64,
    pub lbfgs: LbfgsOptions,
}

impl Default for CellOptions {
    fn default() -> Self {
        Self { n: 4, starts: 4, seed: 0, lbfgs: LbfgsOptions { max_iter: 400, rel_tol: 1e-14, ..Default::default() } }
    }
}

/// Linear term `−G·M₃` with `M₃` free, turning the cell problem into
/// `inf_{M₃} [Q*W(M_α|M₃) − G·M₃]`.
#[derive(Clone, Copy, Debug)]
pub struct FreeThird {
    pub load: Vec3,
}

fn cell_solve(
    w: &dyn Density,
    m: &Mat3,
    free: Option<FreeThird>,
    opts: &CellOptions,
    warm: Option<&CellEstimate>,
) -> CellEstimate {
    let cell = Cell { n: opts.n };
    let nv = 3 * cell.nodes();
    let extra = if free.is_some() { 3 } else { 0 };
    // variables: η (nv), μ, then M₃ when free
    let objective = |x: &[f64], g: &mut [f64]| -> f64 {
        let xi = cell.project(&x[..nv]);
        let mut mm = *m;
        if free.is_some() {
            mm.set_column(2, &Vec3::new(x[nv + 1], x[nv + 2], x[nv + 3]));
        }
        let (v, gmu, gm) = cell.energy(w, &mm, &xi, x[nv], Some(&mut g[..nv]));
        cell.project_adjoint(&mut g[..nv]);
        g[nv] = gmu;
        let mut total = v;
        if let Some(fr) = free {
            for c in 0..3 {
                g[nv + 1 + c] = gm[(c, 2)] - fr.load[c];
                total -= fr.load[c] * x[nv + 1 + c];
            }
        }
        total
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let base_m3 = col3(m);
    let mut push = |xi: Vec<f64>, mu: f64, m3: Vec3| {
        let mut x = xi;
        x.push(mu);
        if extra > 0 {
            x.extend_from_slice(m3.as_slice());
        }
        starts.push(x);
    };
    if let Some(wm) = warm {
        if wm.n == opts.n {
            push(wm.xi.clone(), wm.mu, if extra > 0 { wm.m3 } else { base_m3 });
        } else if wm.n * 2 == opts.n {
            let coarse = Cell { n: wm.n };
            push(cell.prolong(&coarse, &wm.xi), wm.mu, if extra > 0 { wm.m3 } else { base_m3 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for s in 0..opts.starts {
        if s == 0 {
            push(vec![0.0; nv], 1.0, base_m3);
        } else {
            let sigma = [0.05, 0.15, 0.3][s % 3];
            let xi: Vec<f64> = (0..nv).map(|_| sigma * gauss(&mut rng)).collect();
            push(xi, [1.0, 0.5, 2.0][(s / 3) % 3], base_m3);
        }
    }

    let trivial = {
        let mut g = vec![0.0; nv + 1 + extra];
        let mut x = vec![0.0; nv];
        x.push(1.0);
        if extra > 0 {
            x.extend_from_slice(base_m3.as_slice());
        }
        objective(&x, &mut g)
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for x0 in starts {
        let out = lbfgs(objective, x0, &opts.lbfgs, None);
        if best.as_ref().is_none_or(|b| out.f < b.0) {
            best = Some((out.f, out.x));
        }
    }
    let (value, x) = best.expect("at least one start");
    let xi = cell.project(&x[..nv]);
    let m3 = if extra > 0 { Vec3::new(x[nv + 1], x[nv + 2], x[nv + 3]) } else { base_m3 };
    CellEstimate { value, n: opts.n, xi, mu: x[nv], m3, stalled: value >= trivial - 1e-15 }
}

/// Upper estimate of `Q*W(M)` for any density, nested over grids
/// `n, n/2, …` so that refinement never increases the estimate.
pub fn cell_qcw_of(w: &dyn Density, m: &Mat3, opts: &CellOptions) -> CellEstimate {
    cell_nested(w, m, None, opts, None)
}

/// `inf_{M₃} [Q*W(M_α|M₃) − G·M₃]`; the minimizing `M₃` is returned in the estimate.
pub fn cell_qcw_free_third(
    w: &dyn Density,
    m_alpha: &Mat3x2,
    load: &Vec3,
    start_m3: &Vec3,
    opts: &CellOptions,
    warm: Option<&CellEstimate>,
) -> CellEstimate {
    cell_nested(w, &join(m_alpha, start_m3), Some(FreeThird { load: *load }), opts, warm)
}

fn cell_nested(
    w: &dyn Density,
    m: &Mat3,
    free: Option<FreeThird>,
    opts: &CellOptions,
    warm: Option<&CellEstimate>,
) -> CellEstimate {
    if let Some(wm) = warm {
        if wm.n == opts.n {
            return cell_solve(w, m, free, opts, Some(wm));
        }
    }
    let coarse = if opts.n.is_multiple_of(2) && opts.n / 2 >= 2 {
        let copts = CellOptions { n: opts.n / 2, ..opts.clone() };
        Some(cell_nested(w, m, free, &copts, None))
    } else {
        None
    };
    let fine = cell_solve(w, m, free, opts, coarse.as_ref());
    match coarse {
        Some(c) if c.value < fine.value => {
            let cell = Cell { n: opts.n };
            CellEstimate { xi: cell.prolong(&Cell { n: c.n }, &c.xi), n: opts.n, ..c }
        }
        _ => fine,
    }
}

/// Upper estimate of the cross-quasiconvex-convex envelope via the cell formula.
pub fn cell_qcw(q: &EnvelopeQuery) -> Result<CellEstimate> {
    q.validate()?;
    q.density.validate()?;
    let opts = CellOptions { n: q.cell_n, starts: q.multistart.clamp(1, 4), seed: q.seed, ..Default::default() };
    Ok(cell_qcw_of(&q.density, &q.target, &opts))
}

#[derive(Clone, Debug)]
pub struct ChainRow {
    pub target: Mat3,
    pub w: f64,
    pub cw: f64,
    pub qcw: f64,
}

#[derive(Clone, Debug)]
pub struct ChainReport {
    pub rows: Vec<ChainRow>,
    /// Indices of rows violating `𝒞W ≤ Q*W + 2·tol` or `Q*W ≤ W + tol`.
    pub violations: Vec<usize>,
    pub tol: f64,
}

impl ChainReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the computable part of `𝒞W ≤ 𝒬𝒞W ≤ W` on every sample.
pub fn verify_envelope_chain(w: &EnergyDensity, samples: &[Mat3], tol: f64, seed: u64) -> Result<ChainReport> {
    if samples.is_empty() {
        return Err(Error::Config("envelope chain needs at least one sample".into()));
    }
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (i, f) in samples.iter().enumerate() {
        let mut q = EnvelopeQuery::new(w.clone(), *f);
        q.seed = seed.wrapping_add(i as u64);
        let wv = w.evaluate(f);
        let cw = convex_envelope(&q)?.value;
        let qcw = cell_qcw(&q)?.value;
        if cw > qcw + 2.0 * tol || qcw > wv + tol {
            violations.push(i);
        }
        rows.push(ChainRow { target: *f, w: wv, cw, qcw });
    }
    Ok(ChainReport { rows, violations, tol })
}

/// Result of the explicit one-dimensional `(θ, η)` construction.
#[derive(Clone, Debug)]
pub struct CrossConvexReport {
    pub theta_boundary: (Vec3, Vec3),
    pub eta_mean: Vec<f64>,
    /// `W̄(M, b)` at the averaged pair.
    pub at_average: f64,
    /// `∫₀¹ W̄(M + θ', b + η)` by exact two-piece quadrature.
    pub integral: f64,
    /// `integral − at_average`.
    pub gap: f64,
}

/// With `W̄(M, b) := W(b̂|M)`, `M ∈ ℝ³`, `b ∈ ℝ⁶`, builds the piecewise affine
/// `θ` and piecewise constant `η` turning the pairs into a one-dimensional
/// competitor and compares both sides of the cross-quasiconvexity inequality.
pub fn cross_convex_1d_check(
    w: &dyn Density,
    pair1: (&Vec3, &Mat3x2),
    pair2: (&Vec3, &Mat3x2),
    lambda: f64,
) -> Result<CrossConvexReport> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!("λ must lie in (0,1), got {lambda}")));
    }
    let (m1, b1) = pair1;
    let (m2, b2) = pair2;
    let m = m1 * lambda + m2 * (1.0 - lambda);
    let b = b1 * lambda + b2 * (1.0 - lambda);
    // θ(x) = (1−λ)(M₁−M₂)x on [0,λ], λ(M₂−M₁)(x−1) on [λ,1]
    let slope_left = (m1 - m2) * (1.0 - lambda);
    let slope_right = (m2 - m1) * lambda;
    let theta = |x: f64| if x <= lambda { slope_left * x } else { slope_right * (x - 1.0) };
    let eta_left = (b1 - b2) * (1.0 - lambda);
    let eta_right = (b2 - b1) * lambda;
    let eta_mean = eta_left * lambda + eta_right * (1.0 - lambda);
    let wbar = |mm: &Vec3, bb: &Mat3x2| w.value(&join(bb, mm));
    let left = wbar(&(m + slope_left), &(b + eta_left));
    let right = wbar(&(m + slope_right), &(b + eta_right));
    let integral = lambda * left + (1.0 - lambda) * right;
    let at_average = wbar(&m, &b);
    Ok(CrossConvexReport {
        theta_boundary: (theta(0.0), theta(1.0)),
        eta_mean: eta_mean.as_slice().to_vec(),
        at_average,
        integral,
        gap: integral - at_average,
    })
}

#[derive(Clone, Debug)]
pub struct CommuteReport {
    /// `(𝒞(W_rᵃ)(M), 𝒞W(r⁻¹M_α|M₃))` per sample.
    pub pairs: Vec<(f64, f64)>,
    pub max_gap: f64,
}

/// Compares `𝒞(W_rᵃ)(M)` with `𝒞W(r⁻¹M_α|M₃)` by two independent runs.
pub fn envelope_scaling_commute(
    w: &EnergyDensity,
    r: f64,
    samples: &[Mat3],
    points: usize,
    starts: usize,
    seed: u64,
) -> Result<CommuteReport> {
    let scaled = scaled_density_a(w, r)?;
    let mut pairs = Vec::new();
    let mut max_gap: f64 = 0.0;
    for (i, m) in samples.iter().enumerate() {
        let lhs = convex_envelope_of(&scaled, m, points, starts, seed.wrapping_add(i as u64)).value;
        let rhs = convex_envelope_of(w, &scaled.map(m), points, starts, seed.wrapping_add(1000 + i as u64)).value;
        max_gap = max_gap.max((lhs - rhs).abs());
        pairs.push((lhs, rhs));
    }
    Ok(CommuteReport { pairs, max_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::WellSet;

    fn rnd(rng: &mut ChaCha8Rng, s: f64) -> Mat3 {
        Mat3::from_fn(|_, _| s * (2.0 * rng.random::<f64>() - 1.0))
    }

    #[test]
    fn oracle_values() {
        assert_eq!(radial_envelope_oracle(0.0).unwrap(), 0.0);
        assert_eq!(radial_envelope_oracle(1.0).unwrap(), 0.0);
        assert_eq!(radial_envelope_oracle(2.0).unwrap(), 9.0);
        assert!(radial_envelope_oracle(-1.0).is_err());
    }

    #[test]
    fn quartic_envelope_at_origin_and_outside() {
        let w = EnergyDensity::radial_quartic();
        let lam = convex_envelope(&EnvelopeQuery::new(w.clone(), Mat3::zeros())).unwrap();
        assert!(lam.value < 1e-8, "{}", lam.value);
        let m: Vec<f64> = lam.mean();
        assert!(m.iter().all(|v| v.abs() < 1e-10));
        let mut t = Mat3::zeros();
        t[(0, 0)] = 2.0;
        let v = convex_envelope(&EnvelopeQuery::new(w, t)).unwrap().value;
        assert!((v - 9.0).abs() < 1e-6);
    }

    #[test]
    fn convex_density_is_its_own_envelope() {
        let w = EnergyDensity::quadratic_convex();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let t = rnd(&mut rng, 1.5);
            let mut q = EnvelopeQuery::new(w.clone(), t);
            q.multistart = 4;
            let cw = convex_envelope(&q).unwrap().value;
            assert!((cw - w.evaluate(&t)).abs() <= 1e-9);
            let qc = cell_qcw(&q).unwrap().value;
            assert!((qc - w.evaluate(&t)).abs() <= 1e-9);
        }
    }

    #[test]
    fn reduced_densities() {
        let qc = EnergyDensity::quadratic_convex();
        assert!(reduced_w0(&qc, &Vec3::z(), 8) < 1e-16);
        assert!(reduced_w1(&qc, &i_alpha(), 8) < 1e-16);
        let pw = EnergyDensity::p_well_with_constant(2.0, 1.0, WellSet::SingleWell).unwrap();
        assert!(reduced_w0(&pw, &Vec3::z(), 8) < 1e-14);
        assert!((reduced_w0(&pw, &Vec3::zeros(), 8) - 1.0).abs() < 1e-8);
        assert!(reduced_w1(&pw, &i_alpha(), 8) < 1e-14);
        let rq = EnergyDensity::radial_quartic();
        assert!(reduced_w1(&rq, &Mat3x2::zeros(), 8) < 1e-14);
    }

    #[test]
    fn w0_brute_force_at_zero() {
        // best completion of ζ = 0 by exact in-plane frames
        let pw = EnergyDensity::p_well_with_constant(2.0, 1.0, WellSet::SingleWell).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut brute = f64::INFINITY;
        for _ in 0..10_000 {
            let r = rotation_from_vector(&Vec3::from_fn(|_, _| 3.0 * (2.0 * rng.random::<f64>() - 1.0)));
            brute = brute.min(pw.evaluate(&join(&alpha(&r), &Vec3::zeros())));
        }
        let v = reduced_w0(&pw, &Vec3::zeros(), 8);
        assert!(v <= brute + 1e-12);
        assert!((v - brute).abs() < 1e-8);
    }

    #[test]
    fn radial_hull_of_well_profile() {
        let hull = RadialHull::build(|t| (t - 1.0).abs().powi(4), 4.0, 4000);
        for &t in &[0.0, 0.5, 0.99, 1.0, 1.5, 3.0] {
            let exact = (t - 1.0f64).max(0.0).powi(4);
            assert!((hull.eval(t).0 - exact).abs() < 1e-5, "{t}");
        }
    }

    #[test]
    fn cell_laminate_reaches_zero_for_quartic_at_origin() {
        let w = EnergyDensity::radial_quartic();
        let est = cell_qcw_of(&w, &Mat3::zeros(), &CellOptions { n: 2, ..Default::default() });
        assert!(est.value < 1e-8, "{}", est.value);
        assert!(!est.stalled);
    }

    #[test]
    fn nested_grids_do_not_increase() {
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = rnd(&mut rng, 1.0);
        m.set_column(2, &Vec3::zeros());
        let c2 = cell_qcw_of(&w, &m, &CellOptions { n: 2, starts: 2, ..Default::default() });
        let c4 = cell_qcw_of(&w, &m, &CellOptions { n: 4, starts: 2, ..Default::default() });
        assert!(c4.value <= c2.value + 1e-9);
        assert!(c4.value <= w.evaluate(&m) + 1e-12);
    }

    #[test]
    fn frozen_cell_reproduces_value() {
        let w = EnergyDensity::radial_quartic();
        let m = Mat3::identity() * 0.3;
        let est = cell_qcw_of(&w, &m, &CellOptions { n: 2, starts: 2, ..Default::default() });
        let (v, g) = est.frozen(&w, &m);
        assert!((v - est.value).abs() < 1e-12);
        let fd = crate::material::finite_difference_gradient(|x| est.frozen(&w, x).0, &m);
        assert!((g - fd).norm() < 1e-5 * (1.0 + g.norm()));
    }

    #[test]
    fn cell_projection_adjoint() {
        let cell = Cell { n: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nv = 3 * cell.nodes();
        let a: Vec<f64> = (0..nv).map(|_| gauss(&mut rng)).collect();
        let b: Vec<f64> = (0..nv).map(|_| gauss(&mut rng)).collect();
        let pa = cell.project(&a);
        assert!(cell.slope(&pa).iter().all(|v| v.abs() < 1e-14));
        let mut ptb = b.clone();
        cell.project_adjoint(&mut ptb);
        let lhs: f64 = pa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ptb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lamination_gradient_matches_finite_differences() {
        let w = EnergyDensity::radial_quartic();
        let fw = flat_density(&w);
        let mut spec = LaminationSpec::full(mat_to_vec(&(Mat3::identity() * 0.2)), 3, 1, 0);
        spec.constrained[4] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..30).map(|_| 0.5 * gauss(&mut rng)).collect();
        let mut g = vec![0.0; 30];
        lamination_objective(&fw, &spec, &x, &mut g);
        let mut scratch = vec![0.0; 30];
        for k in 0..30 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (lamination_objective(&fw, &spec, &xp, &mut scratch)
                - lamination_objective(&fw, &spec, &xm, &mut scratch))
                / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
        let (lam, pts, _, _) = decode(&spec, &x);
        for k in 0..9 {
            if spec.constrained[k] {
                let m: f64 = lam.iter().zip(&pts).map(|(l, p)| l * p[k]).sum();
                assert!((m - spec.target[k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn one_dimensional_construction() {
        let qc = EnergyDensity::quadratic_convex();
        let m = Vec3::new(0.3, -0.2, 1.1);
        let b = i_alpha();
        let rep = cross_convex_1d_check(&qc, (&m, &b), (&m, &b), 0.5).unwrap();
        assert!(rep.gap.abs() < 1e-15);
        let rq = EnergyDensity::radial_quartic();
        let z = Mat3x2::zeros();
        let rep = cross_convex_1d_check(&rq, (&Vec3::z(), &z), (&(-Vec3::z()), &z), 0.5).unwrap();
        assert!(rep.gap < -0.5);
        assert!(rep.theta_boundary.0.norm() < 1e-15 && rep.theta_boundary.1.norm() < 1e-15);
        assert!(rep.eta_mean.iter().all(|v| v.abs() < 1e-15));
        assert!(cross_convex_1d_check(&rq, (&m, &b), (&m, &b), 1.0).is_err());
    }
}
