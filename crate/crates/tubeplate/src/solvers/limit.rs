use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;

use super::{scatter_local, ScalarPrecond, SolveOptions};
use crate::envelopes::{
    cell_qcw_free_third, cell_qcw_of, convex_envelope_of, convexified_w0_radial, flat_density, laminate, reduced_w0_with,
    CellEstimate, CellOptions, Lamination, LaminationSpec, RadialHull,
};
use crate::error::{Error, Result};
use crate::forces::{divergence_load, limit_load, ForceSystem, LimitLoad, Regime, RegimeConfig};
use crate::material::EnergyDensity;
use crate::mesh::{LimitMesh, LimitState};
use crate::optim::{lbfgs, LbfgsOptions};
use crate::tensor::{alpha, col3, join, Mat3, Mat3x2, Vec3};

const QUANTUM: f64 = 1e-4;

/// Memoized envelope values `𝒞W` and `𝒬𝒞W`, keyed on arguments rounded
/// to a `1e-4` grid and evaluated at the rounded matrix.
pub struct Envelopes {
    w: EnergyDensity,
    points: usize,
    multistart: usize,
    cell_n: usize,
    seed: u64,
    cw: Mutex<HashMap<[i64; 9], f64>>,
    qcw: Mutex<HashMap<[i64; 9], f64>>,
}

impl Envelopes {
    pub fn new(w: &EnergyDensity, opts: &SolveOptions) -> Self {
        Self {
            w: w.clone(),
            points: opts.lamination_points,
            multistart: opts.multistart,
            cell_n: opts.cell_n,
            seed: opts.seed,
            cw: Mutex::new(HashMap::new()),
            qcw: Mutex::new(HashMap::new()),
        }
    }

    pub fn density(&self) -> &EnergyDensity {
        &self.w
    }

    fn quantize(f: &Mat3) -> ([i64; 9], Mat3) {
        let mut key = [0i64; 9];
        let mut q = Mat3::zeros();
        for (k, (v, o)) in f.iter().zip(q.iter_mut()).enumerate() {
            key[k] = (v / QUANTUM).round() as i64;
            *o = key[k] as f64 * QUANTUM;
        }
        (key, q)
    }

    fn cached(map: &Mutex<HashMap<[i64; 9], f64>>, f: &Mat3, compute: impl Fn(&Mat3) -> f64) -> f64 {
        let (key, q) = Self::quantize(f);
        if let Some(v) = map.lock().expect("envelope cache").get(&key) {
            return *v;
        }
        let v = compute(&q);
        map.lock().expect("envelope cache").insert(key, v);
        v
    }

    /// `𝒞W(F)`; convex densities are returned unchanged.
    pub fn cw(&self, f: &Mat3) -> f64 {
        if self.w.is_convex() {
            return self.w.evaluate(f);
        }
        Self::cached(&self.cw, f, |q| convex_envelope_of(&self.w, q, self.points, self.multistart, self.seed).value)
    }

    /// `𝒬𝒞W(F)` through the cell formula; convex densities are returned unchanged.
    pub fn qcw(&self, f: &Mat3) -> f64 {
        if self.w.is_convex() {
            return self.w.evaluate(f);
        }
        let opts = CellOptions { n: self.cell_n, starts: self.multistart.clamp(1, 4), seed: self.seed, ..Default::default() };
        Self::cached(&self.qcw, f, |q| cell_qcw_of(&self.w, q, &opts).value)
    }

    /// Numbers of cached `𝒞W` and `𝒬𝒞W` values.
    pub fn cache_sizes(&self) -> (usize, usize) {
        (self.cw.lock().expect("envelope cache").len(), self.qcw.lock().expect("envelope cache").len())
    }
}

/// Functional subtracted from the elastic part of the limit energy.
fn total_load(regime: Regime, fs: &ForceSystem, mesh: &LimitMesh, quad: usize) -> LimitLoad {
    let mut load = limit_load(regime, fs, mesh, quad);
    if let Some(div) = &fs.divergence {
        load.add(&divergence_load(div, mesh, quad));
    }
    load
}

fn string_gradient(mesh: &LimitMesh, psi: &[Vec3], e: usize) -> Vec3 {
    (psi[e + 1] - psi[e]) / mesh.interval.length(e)
}

fn membrane_weight(regime: Regime) -> f64 {
    match regime {
        Regime::LPlus { ell } => ell,
        _ => 1.0,
    }
}

fn blocks(regime: Regime) -> (bool, bool) {
    match regime {
        Regime::LPlus { .. } => (true, true),
        Regime::LInf => (true, false),
        Regime::LZero => (false, true),
    }
}

/// Limit energy of `regime` at a state:
/// `ā∫₀ᴸ𝒞W(ā⁻¹b̄ᵃ|∇₃ψᵃ)` for the string, `w∫_{ωᵇ}𝒬𝒞W(∇_αψᵇ|b̄ᵇ)` for the
/// membrane (`w = ℓ` in the ℓ-regime), minus the load functional.
pub fn limit_energy(regime: Regime, state: &LimitState, fs: &ForceSystem, mesh: &LimitMesh, env: &Envelopes, quad: usize) -> Result<f64> {
    state.check_layout(mesh)?;
    fs.validate()?;
    let (string, membrane) = blocks(regime);
    let a_bar = mesh.geometry.a_bar();
    let mut elastic = 0.0;
    if string {
        let vals: Vec<f64> = (0..mesh.interval.n_elements())
            .into_par_iter()
            .map(|e| {
                let f = join(&(state.bbar_a[e] / a_bar), &string_gradient(mesh, &state.psi_a, e));
                a_bar * mesh.interval.length(e) * env.cw(&f)
            })
            .collect();
        elastic += vals.iter().sum::<f64>();
    }
    if membrane {
        let wm = membrane_weight(regime);
        let vals: Vec<f64> = (0..mesh.tri.tris.len())
            .into_par_iter()
            .map(|t| wm * mesh.tri.area(t) * env.qcw(&join(&mesh.tri.gradient(&state.psi_b, t), &state.bbar_b[t])))
            .collect();
        elastic += vals.iter().sum::<f64>();
    }
    let value = elastic - total_load(regime, fs, mesh, quad).value(state);
    if !value.is_finite() {
        return Err(Error::NonFinite { block: 'l', element: 0 });
    }
    Ok(value)
}

/// Energy of the `h/r² → ℓ` limit.
pub fn limit_energy_lplus(state: &LimitState, fs: &ForceSystem, mesh: &LimitMesh, ell: f64, env: &Envelopes, quad: usize) -> Result<f64> {
    limit_energy(Regime::LPlus { ell }, state, fs, mesh, env, quad)
}

/// Result of the alternating limit minimization.
#[derive(Clone, Debug)]
pub struct LimitSolution {
    pub state: LimitState,
    /// Upper value: elastic terms are evaluated on the envelope competitors found.
    pub energy: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Energy at the initialization and after every half-step.
    pub history: Vec<f64>,
}

/// Pointwise microstructure kept between half-steps.
#[derive(Clone)]
enum Micro {
    None,
    Lam { lam: Lamination, z_ref: Vec3 },
    Cell { est: CellEstimate },
}

struct Alternating<'a> {
    w: &'a EnergyDensity,
    mesh: &'a LimitMesh,
    load: LimitLoad,
    a_bar: f64,
    wm: f64,
    string: bool,
    membrane: bool,
    slot_a: Vec<Option<usize>>,
    slot_b: Vec<Option<usize>>,
    n_slots: usize,
    opts: SolveOptions,
}

impl<'a> Alternating<'a> {
    fn new(regime: Regime, junction: bool, load: LimitLoad, w: &'a EnergyDensity, mesh: &'a LimitMesh, opts: &SolveOptions) -> Self {
        let (string, membrane) = blocks(regime);
        let n_a = mesh.interval.nodes.len();
        let mut n_slots = 0;
        let mut slot_b = vec![None; mesh.tri.nodes.len()];
        if membrane {
            for (i, s) in slot_b.iter_mut().enumerate() {
                if !mesh.tri.boundary[i] {
                    *s = Some(n_slots);
                    n_slots += 1;
                }
            }
        }
        let mut slot_a = vec![None; n_a];
        if string {
            // top end clamped; bottom end pinned at 0 in the rigid-plate regime
            let first = if matches!(regime, Regime::LInf) { 1 } else { 0 };
            for s in slot_a.iter_mut().take(n_a - 1).skip(first) {
                *s = Some(n_slots);
                n_slots += 1;
            }
            if junction && membrane {
                if let Some(k) = slot_b[mesh.tri.origin] {
                    // shared unknown: ψᵃ(0) = ψᵇ(0)
                    slot_a[0] = Some(k);
                    n_slots -= 1;
                    for s in slot_a.iter_mut().skip(1).flatten() {
                        *s -= 1;
                    }
                }
            }
        }
        Self {
            w,
            mesh,
            load,
            a_bar: mesh.geometry.a_bar(),
            wm: membrane_weight(regime),
            string,
            membrane,
            slot_a,
            slot_b,
            n_slots,
            opts: opts.clone(),
        }
    }

    fn convex(&self) -> bool {
        self.w.is_convex()
    }

    fn lbfgs_opts(&self, max_iter: usize) -> LbfgsOptions {
        LbfgsOptions { max_iter, memory: self.opts.memory, rel_tol: 1e-14, patience: 3, grad_tol: 1e-13 }
    }

    /// Elastic value of every string element and triangle at the state with
    /// the density itself (the `b̄ = ` current initialization competitor).
    fn plain_values(&self, s: &LimitState) -> (Vec<f64>, Vec<f64>) {
        let mesh = self.mesh;
        let ea = if self.string {
            (0..mesh.interval.n_elements())
                .map(|e| {
                    let f = join(&(s.bbar_a[e] / self.a_bar), &string_gradient(mesh, &s.psi_a, e));
                    self.a_bar * mesh.interval.length(e) * self.w.evaluate(&f)
                })
                .collect()
        } else {
            Vec::new()
        };
        let eb = if self.membrane {
            (0..mesh.tri.tris.len())
                .map(|t| self.wm * mesh.tri.area(t) * self.w.evaluate(&join(&mesh.tri.gradient(&s.psi_b, t), &s.bbar_b[t])))
                .collect()
        } else {
            Vec::new()
        };
        (ea, eb)
    }

    fn total(&self, s: &LimitState, ea: &[f64], eb: &[f64]) -> f64 {
        ea.iter().sum::<f64>() + eb.iter().sum::<f64>() - self.load.value(s)
    }

    /// Pointwise minimization over `b̄ᵃ` on one string element.
    fn string_point(&self, e: usize, s: &LimitState, micro: &Micro) -> (Mat3x2, f64, Micro) {
        let mesh = self.mesh;
        let len = mesh.interval.length(e);
        let z = string_gradient(mesh, &s.psi_a, e);
        let g = self.load.ca[e] / len;
        let u_old = s.bbar_a[e] / self.a_bar;
        let w = self.w;
        if self.convex() {
            let f = |x: &[f64], gr: &mut [f64]| {
                let u = Mat3x2::from_column_slice(x);
                let (v, p) = w.eval_grad(&join(&u, &z));
                let ga = alpha(&p) - g;
                gr.copy_from_slice(ga.as_slice());
                v - g.dot(&u)
            };
            let out = lbfgs(f, u_old.as_slice().to_vec(), &self.lbfgs_opts(400), None);
            let old = w.evaluate(&join(&u_old, &z)) - g.dot(&u_old);
            let u = if out.f <= old { Mat3x2::from_column_slice(&out.x) } else { u_old };
            return (u * self.a_bar, self.a_bar * len * w.evaluate(&join(&u, &z)), Micro::None);
        }
        let dens = |x: &[f64], gr: &mut [f64]| {
            let (v, p) = w.eval_grad(&Mat3::from_column_slice(x));
            gr.copy_from_slice(p.as_slice());
            for k in 0..6 {
                gr[k] -= g.as_slice()[k];
            }
            v - (0..6).map(|k| g.as_slice()[k] * x[k]).sum::<f64>()
        };
        let target: Vec<f64> = join(&u_old, &z).as_slice().to_vec();
        let warm = match micro {
            Micro::Lam { lam, .. } => Some(lam),
            _ => None,
        };
        let spec = LaminationSpec {
            constrained: (0..9).map(|k| k >= 6).collect(),
            target: target.clone(),
            points: self.opts.lamination_points,
            starts: if warm.is_some() { 0 } else { self.opts.multistart },
            seed: self.opts.seed.wrapping_add(e as u64),
            scale: 0.5 * (1.0 + Mat3::from_column_slice(&target).norm()),
            lbfgs: LbfgsOptions { max_iter: 600, rel_tol: 1e-14, ..Default::default() },
        };
        let mut lam = laminate(&dens, &spec, warm);
        if let Micro::Lam { lam: old, z_ref } = micro {
            // the translated old competitor is feasible for the new target
            let mut shift = vec![0.0; 9];
            shift[6..].copy_from_slice((z - z_ref).as_slice());
            let (v, _) = old.shifted(&dens, &shift);
            if v < lam.value {
                let points = old.points.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
                lam = Lamination { value: v, weights: old.weights.clone(), points, stalled: old.stalled };
            }
        }
        let mean = lam.mean();
        let u = Mat3x2::from_column_slice(&mean[..6]);
        let value = self.a_bar * len * (lam.value + g.dot(&u));
        (u * self.a_bar, value, Micro::Lam { lam, z_ref: z })
    }

    /// Pointwise minimization over `b̄ᵇ` on one triangle.
    fn membrane_point(&self, t: usize, s: &LimitState, micro: &Micro) -> (Vec3, f64, Micro) {
        let mesh = self.mesh;
        let area = mesh.tri.area(t);
        let m = mesh.tri.gradient(&s.psi_b, t);
        let g = self.load.cb[t] / (self.wm * area);
        let b_old = s.bbar_b[t];
        let w = self.w;
        if self.convex() {
            let f = |x: &[f64], gr: &mut [f64]| {
                let b = Vec3::from_column_slice(x);
                let (v, p) = w.eval_grad(&join(&m, &b));
                gr.copy_from_slice((col3(&p) - g).as_slice());
                v - g.dot(&b)
            };
            let out = lbfgs(f, b_old.as_slice().to_vec(), &self.lbfgs_opts(400), None);
            let old = w.evaluate(&join(&m, &b_old)) - g.dot(&b_old);
            let b = if out.f <= old { Vec3::from_column_slice(&out.x) } else { b_old };
            return (b, self.wm * area * w.evaluate(&join(&m, &b)), Micro::None);
        }
        let warm = match micro {
            Micro::Cell { est } => Some(est),
            _ => None,
        };
        let copts = CellOptions {
            n: self.opts.cell_n,
            starts: if warm.is_some() { 0 } else { self.opts.multistart.clamp(1, 4) },
            seed: self.opts.seed.wrapping_add(t as u64),
            ..Default::default()
        };
        let mut est = cell_qcw_free_third(w, &m, &g, &b_old, &copts, warm);
        if let Some(old) = warm {
            let (v, _) = old.frozen(w, &join(&m, &b_old));
            let v = v - g.dot(&b_old);
            if v < est.value {
                est = CellEstimate { value: v, m3: b_old, ..old.clone() };
            }
        }
        let value = self.wm * area * (est.value + g.dot(&est.m3));
        (est.m3, value, Micro::Cell { est })
    }

    fn bbar_step(&self, s: &mut LimitState, ma: &mut [Micro], mb: &mut [Micro], ea: &mut [f64], eb: &mut [f64]) {
        if self.string {
            let res: Vec<_> = (0..self.mesh.interval.n_elements()).into_par_iter().map(|e| self.string_point(e, s, &ma[e])).collect();
            for (e, (b, v, m)) in res.into_iter().enumerate() {
                s.bbar_a[e] = b;
                ea[e] = v;
                ma[e] = m;
            }
        }
        if self.membrane {
            let res: Vec<_> = (0..self.mesh.tri.tris.len()).into_par_iter().map(|t| self.membrane_point(t, s, &mb[t])).collect();
            for (t, (b, v, m)) in res.into_iter().enumerate() {
                s.bbar_b[t] = b;
                eb[t] = v;
                mb[t] = m;
            }
        }
    }

    fn expand(&self, base: &LimitState, x: &[f64]) -> LimitState {
        let mut s = base.clone();
        for (psi, slots) in [(&mut s.psi_a, &self.slot_a), (&mut s.psi_b, &self.slot_b)] {
            for (p, slot) in psi.iter_mut().zip(slots) {
                if let Some(k) = slot {
                    *p = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                }
            }
        }
        s
    }

    fn restrict(&self, s: &LimitState) -> Vec<f64> {
        let mut x = vec![0.0; 3 * self.n_slots];
        for (psi, slots) in [(&s.psi_a, &self.slot_a), (&s.psi_b, &self.slot_b)] {
            for (p, slot) in psi.iter().zip(slots) {
                if let Some(k) = slot {
                    x[3 * k..3 * k + 3].copy_from_slice(p.as_slice());
                }
            }
        }
        x
    }

    /// Elastic values (majorized for nonconvex densities) and nodal gradients.
    fn psi_energy(&self, s: &LimitState, ma: &[Micro], mb: &[Micro], grads: Option<(&mut [Vec3], &mut [Vec3])>) -> (Vec<f64>, Vec<f64>) {
        let mesh = self.mesh;
        let w = self.w;
        let flat = flat_density(w);
        let ea: Vec<(f64, Vec3)> = if self.string {
            (0..mesh.interval.n_elements())
                .into_par_iter()
                .map(|e| {
                    let len = mesh.interval.length(e);
                    let z = string_gradient(mesh, &s.psi_a, e);
                    let (v, dz) = match &ma[e] {
                        Micro::Lam { lam, z_ref } => {
                            let mut shift = vec![0.0; 9];
                            shift[6..].copy_from_slice((z - z_ref).as_slice());
                            let (v, g) = lam.shifted(&flat, &shift);
                            (v, Vec3::new(g[6], g[7], g[8]))
                        }
                        _ => {
                            let (v, p) = w.eval_grad(&join(&(s.bbar_a[e] / self.a_bar), &z));
                            (v, col3(&p))
                        }
                    };
                    (self.a_bar * len * v, dz * self.a_bar)
                })
                .collect()
        } else {
            Vec::new()
        };
        let eb: Vec<(f64, Mat3x2)> = if self.membrane {
            (0..mesh.tri.tris.len())
                .into_par_iter()
                .map(|t| {
                    let area = mesh.tri.area(t);
                    let f = join(&mesh.tri.gradient(&s.psi_b, t), &s.bbar_b[t]);
                    let (v, p) = match &mb[t] {
                        Micro::Cell { est } => est.frozen(w, &f),
                        _ => w.eval_grad(&f),
                    };
                    (self.wm * area * v, alpha(&p) * (self.wm * area))
                })
                .collect()
        } else {
            Vec::new()
        };
        if let Some((ga, gb)) = grads {
            for (e, (_, d)) in ea.iter().enumerate() {
                ga[e + 1] += d;
                ga[e] -= d;
            }
            for (t, (_, d)) in eb.iter().enumerate() {
                let bg = mesh.tri.basis_gradients(t);
                for (l, &node) in mesh.tri.tris[t].iter().enumerate() {
                    gb[node] += d.column(0) * bg[l][0] + d.column(1) * bg[l][1];
                }
            }
        }
        (ea.into_iter().map(|v| v.0).collect(), eb.into_iter().map(|v| v.0).collect())
    }

    fn preconditioner(&self) -> Result<ScalarPrecond> {
        let mesh = self.mesh;
        let mut triplets = Vec::new();
        let map = |slot: Option<usize>| slot.map(|k| vec![(k, 1.0)]).unwrap_or_default();
        if self.string {
            for e in 0..mesh.interval.n_elements() {
                let k = self.a_bar / mesh.interval.length(e);
                let maps = [map(self.slot_a[e]), map(self.slot_a[e + 1])];
                let local: Vec<&[(usize, f64)]> = maps.iter().map(|m| m.as_slice()).collect();
                scatter_local(&mut triplets, &local, &[vec![k, -k], vec![-k, k]]);
            }
        }
        if self.membrane {
            for t in 0..mesh.tri.tris.len() {
                let a = self.wm * mesh.tri.area(t);
                let bg = mesh.tri.basis_gradients(t);
                let k: Vec<Vec<f64>> = (0..3).map(|l| (0..3).map(|m| a * (bg[l][0] * bg[m][0] + bg[l][1] * bg[m][1])).collect()).collect();
                let maps: Vec<Vec<(usize, f64)>> = mesh.tri.tris[t].iter().map(|&n| map(self.slot_b[n])).collect();
                let local: Vec<&[(usize, f64)]> = maps.iter().map(|m| m.as_slice()).collect();
                scatter_local(&mut triplets, &local, &k);
            }
        }
        ScalarPrecond::build(self.n_slots, &triplets)
    }

    fn psi_step(&self, s: &mut LimitState, ma: &[Micro], mb: &[Micro], pre: &ScalarPrecond) -> (Vec<f64>, Vec<f64>) {
        if self.n_slots > 0 {
            let base = s.clone();
            let fg = |x: &[f64], g: &mut [f64]| {
                let st = self.expand(&base, x);
                let mut ga = vec![Vec3::zeros(); st.psi_a.len()];
                let mut gb = vec![Vec3::zeros(); st.psi_b.len()];
                let (ea, eb) = self.psi_energy(&st, ma, mb, Some((&mut ga, &mut gb)));
                for (gv, l) in ga.iter_mut().zip(&self.load.va) {
                    *gv -= l;
                }
                for (gv, l) in gb.iter_mut().zip(&self.load.vb) {
                    *gv -= l;
                }
                g.iter_mut().for_each(|v| *v = 0.0);
                for (gr, slots) in [(&ga, &self.slot_a), (&gb, &self.slot_b)] {
                    for (v, slot) in gr.iter().zip(slots) {
                        if let Some(k) = slot {
                            g[3 * k] += v.x;
                            g[3 * k + 1] += v.y;
                            g[3 * k + 2] += v.z;
                        }
                    }
                }
                self.total(&st, &ea, &eb)
            };
            let apply = |v: &[f64], out: &mut [f64]| pre.apply(v, out);
            let out = lbfgs(fg, self.restrict(s), &self.opts.lbfgs(), Some(&apply));
            *s = self.expand(s, &out.x);
        }
        self.psi_energy(s, ma, mb, None)
    }

    fn run(&self, mut s: LimitState) -> Result<LimitSolution> {
        let pre = if self.n_slots > 0 { Some(self.preconditioner()?) } else { None };
        let (mut ea, mut eb) = self.plain_values(&s);
        let mut ma = vec![Micro::None; self.mesh.interval.n_elements()];
        let mut mb = vec![Micro::None; self.mesh.tri.tris.len()];
        let mut history = vec![self.total(&s, &ea, &eb)];
        let mut converged = false;
        let mut sweeps = 0;
        let mut prev = history[0];
        for _ in 0..self.opts.outer_iter {
            sweeps += 1;
            self.bbar_step(&mut s, &mut ma, &mut mb, &mut ea, &mut eb);
            history.push(self.total(&s, &ea, &eb));
            if let Some(p) = &pre {
                let (a, b) = self.psi_step(&mut s, &ma, &mb, p);
                ea = a;
                eb = b;
            }
            let e = self.total(&s, &ea, &eb);
            history.push(e);
            if !e.is_finite() {
                return Err(Error::NonFinite { block: 'l', element: 0 });
            }
            if prev - e <= self.opts.tol * e.abs().max(1.0) {
                converged = true;
                break;
            }
            prev = e;
        }
        let energy = *history.last().expect("history is never empty");
        Ok(LimitSolution { state: s, energy, converged, sweeps, history })
    }
}

/// Alternating minimization of the limit problem of `cfg.regime`: pointwise
/// `b̄` updates against envelope competitors, then quasi-Newton over the
/// nodal deformations with the frozen microstructure as a majorizer.
pub fn solve_limit(cfg: &RegimeConfig, w: &EnergyDensity, fs: &ForceSystem, mesh: &LimitMesh, opts: &SolveOptions) -> Result<LimitSolution> {
    cfg.validate()?;
    opts.validate()?;
    w.validate()?;
    fs.validate()?;
    let load = total_load(cfg.regime, fs, mesh, opts.quad);
    let alt = Alternating::new(cfg.regime, cfg.p > 2.0, load, w, mesh, opts);
    alt.run(LimitState::natural(mesh))
}

/// String-only problem with `ψᵃ(0) = 0` and `ψᵃ(L) = (0, 0, L)`.
#[derive(Clone, Debug)]
pub struct StringSolution {
    pub psi_a: Vec<Vec3>,
    /// Bending-torsion field when it was a variable.
    pub bbar_a: Option<Vec<Mat3x2>>,
    pub energy: f64,
    pub converged: bool,
}

fn string_load(fs: &ForceSystem, mesh: &LimitMesh, quad: usize) -> LimitLoad {
    let mut load = limit_load(Regime::LInf, fs, mesh, quad);
    load.constant = 0.0;
    load
}

/// Reduced string density `𝒞W₀` with its gradient.
enum StringDensity<'a> {
    Convex(&'a EnergyDensity, usize, u64),
    Radial(RadialHull),
}

impl StringDensity<'_> {
    fn eval(&self, z: &Vec3) -> (f64, Vec3) {
        match self {
            StringDensity::Convex(w, ms, seed) => {
                let (v, b) = reduced_w0_with(*w, z, *ms, *seed);
                (v, col3(&w.gradient(&join(&b, z))))
            }
            StringDensity::Radial(h) => h.eval_vec(z),
        }
    }
}

/// Minimizes the string energy with the bending-torsion field
/// (`ā∫𝒞W(ā⁻¹b̄ᵃ|∇₃ψᵃ) − ∫(f̄ᵃ + ḡᵃ)·ψᵃ − ∫𝒢ᵃ:(b̄ᵃ|0)`) or, without it,
/// `ā∫𝒞W₀(∇₃ψᵃ) − ∫(f̄ᵃ + ḡᵃ)·ψᵃ`; the second form requires `𝒢ᵃ = 0`.
pub fn solve_string(w: &EnergyDensity, fs: &ForceSystem, mesh: &LimitMesh, opts: &SolveOptions, with_bending: bool) -> Result<StringSolution> {
    opts.validate()?;
    w.validate()?;
    fs.validate()?;
    let load = string_load(fs, mesh, opts.quad);
    if with_bending {
        let alt = Alternating::new(Regime::LInf, false, load, w, mesh, opts);
        let sol = alt.run(LimitState::natural(mesh))?;
        return Ok(StringSolution { psi_a: sol.state.psi_a, bbar_a: Some(sol.state.bbar_a), energy: sol.energy, converged: sol.converged });
    }
    if load.ca.iter().any(|c| c.norm() > 0.0) {
        return Err(Error::Config("the reduction without bending-torsion needs 𝒢ᵃ = 0".into()));
    }
    let density = if w.is_convex() {
        StringDensity::Convex(w, opts.multistart.min(4), opts.seed)
    } else if w.is_frame_indifferent() {
        StringDensity::Radial(convexified_w0_radial(w, 6.0, 2400))
    } else {
        return Err(Error::Config("the reduction without bending-torsion needs a convex or frame-indifferent density".into()));
    };
    let a_bar = mesh.geometry.a_bar();
    let iv = &mesh.interval;
    let n = iv.nodes.len();
    let free = n - 2;
    let mut psi0: Vec<Vec3> = iv.nodes.iter().map(|z| Vec3::new(0.0, 0.0, *z)).collect();
    psi0[0] = Vec3::zeros();
    let expand = |x: &[f64]| {
        let mut p = psi0.clone();
        for i in 0..free {
            p[i + 1] = Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
        }
        p
    };
    let fg = |x: &[f64], g: &mut [f64]| {
        let p = expand(x);
        let vals: Vec<(f64, Vec3)> = (0..iv.n_elements()).into_par_iter().map(|e| density.eval(&string_gradient(mesh, &p, e))).collect();
        let mut gn = vec![Vec3::zeros(); n];
        let mut e_tot = 0.0;
        for (e, (v, d)) in vals.iter().enumerate() {
            e_tot += a_bar * iv.length(e) * v;
            gn[e + 1] += d * a_bar;
            gn[e] -= d * a_bar;
        }
        for (i, (gv, l)) in gn.iter_mut().zip(&load.va).enumerate() {
            e_tot -= l.dot(&p[i]);
            *gv -= l;
        }
        for i in 0..free {
            g[3 * i..3 * i + 3].copy_from_slice(gn[i + 1].as_slice());
        }
        e_tot
    };
    let mut triplets = Vec::new();
    for e in 0..iv.n_elements() {
        let k = a_bar / iv.length(e);
        let slot = |i: usize| if i >= 1 && i <= free { vec![(i - 1, 1.0)] } else { Vec::new() };
        let maps = [slot(e), slot(e + 1)];
        let local: Vec<&[(usize, f64)]> = maps.iter().map(|m| m.as_slice()).collect();
        scatter_local(&mut triplets, &local, &[vec![k, -k], vec![-k, k]]);
    }
    let pre = ScalarPrecond::build(free, &triplets)?;
    let apply = |v: &[f64], out: &mut [f64]| pre.apply(v, out);
    let x0: Vec<f64> = (0..free).flat_map(|i| psi0[i + 1].as_slice().to_vec()).collect();
    let out = lbfgs(fg, x0, &opts.lbfgs(), Some(&apply));
    Ok(StringSolution { psi_a: expand(&out.x), bbar_a: None, energy: out.f, converged: out.converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelopes::radial_envelope_oracle;
    use crate::forces::{AxialMat, MatField, VecField};
    use crate::mesh::{build_limit_mesh, Geometry, Resolution};
    use crate::tensor::{i_alpha, WellSet};

    fn mesh(interval: usize, tri: usize) -> LimitMesh {
        let res = Resolution { interval, tri, tri_grading: 1.0, ..Default::default() };
        build_limit_mesh(&Geometry::default(), &res).unwrap()
    }

    #[test]
    fn natural_state_has_zero_limit_energy() {
        let m = mesh(8, 4);
        let w = EnergyDensity::quadratic_convex();
        let env = Envelopes::new(&w, &SolveOptions::default());
        let s = LimitState::natural(&m);
        for regime in [Regime::LPlus { ell: 1.0 }, Regime::LInf, Regime::LZero] {
            assert!(limit_energy(regime, &s, &ForceSystem::zero(), &m, &env, 4).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn constant_contraction_gives_minus_length() {
        let m = mesh(8, 4);
        let w = EnergyDensity::quadratic_convex();
        let env = Envelopes::new(&w, &SolveOptions::default());
        let mut fs = ForceSystem::zero();
        let mut e11 = Mat3::zeros();
        e11[(0, 0)] = 1.0;
        fs.ga_matrix = AxialMat::new(MatField::constant(e11)).unwrap();
        let s = LimitState::natural(&m);
        let e = limit_energy_lplus(&s, &fs, &m, 1.0, &env, 4).unwrap();
        // 𝒢ᵃ:(b̄ᵃ|0) = ā on the natural state
        let expect = -m.geometry.l * m.geometry.a_bar();
        assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
    }

    #[test]
    fn radial_quartic_string_slice_matches_oracle() {
        let m = mesh(4, 2);
        let w = EnergyDensity::radial_quartic();
        let opts = SolveOptions::default();
        let env = Envelopes::new(&w, &opts);
        let mut s = LimitState::natural(&m);
        let a_bar = m.geometry.a_bar();
        let stretch = [0.3, 0.8, 1.1, 1.4];
        for (e, t) in stretch.iter().enumerate() {
            s.bbar_a[e] = i_alpha() * (a_bar * 0.2 * t);
        }
        let mut z = 0.0;
        for (e, t) in stretch.iter().enumerate() {
            z += m.interval.length(e) * t;
            s.psi_a[e + 1] = Vec3::new(0.0, 0.0, z);
        }
        let e = limit_energy(Regime::LInf, &s, &ForceSystem::zero(), &m, &env, 4).unwrap();
        let oracle: f64 = (0..4)
            .map(|k| {
                let f = join(&(s.bbar_a[k] / a_bar), &Vec3::new(0.0, 0.0, stretch[k]));
                a_bar * m.interval.length(k) * radial_envelope_oracle(f.norm()).unwrap()
            })
            .sum();
        assert!((e - oracle).abs() < 1e-4, "{e} vs {oracle}");
    }

    #[test]
    fn quadratic_string_matches_analytic_solution() {
        let m = mesh(16, 4);
        let w = EnergyDensity::quadratic_convex();
        let mut fs = ForceSystem::zero();
        let a_bar = m.geometry.a_bar();
        let f = Vec3::new(0.3, -0.2, 0.1);
        fs.fa = VecField::constant(f / a_bar);
        let opts = SolveOptions::default();
        for with_bending in [true, false] {
            let sol = solve_string(&w, &fs, &m, &opts, with_bending).unwrap();
            let l = m.geometry.l;
            for (z, p) in m.interval.nodes.iter().zip(&sol.psi_a) {
                let exact = Vec3::new(0.0, 0.0, *z) + f * (z * (l - z) / (4.0 * a_bar));
                assert!((p - exact).norm() < 1e-4, "{with_bending}: {p:?} vs {exact:?}");
            }
        }
    }

    #[test]
    fn lplus_with_pseudo_coupling_matches_convex_oracle() {
        // only Ĝᵇ: the string is pushed at its bottom end, the membrane at its centre
        let m = mesh(16, 8);
        let w = EnergyDensity::quadratic_convex();
        let mut fs = ForceSystem::zero();
        let c = 0.2;
        fs.ghat = VecField::constant(Vec3::new(0.0, 0.0, c));
        let cfg = RegimeConfig::new(Regime::LPlus { ell: 1.0 }, 2.0, vec![(0.5, 0.25)]);
        let sol = solve_limit(&cfg, &w, &fs, &m, &SolveOptions::default()).unwrap();
        assert!(sol.converged);
        // p ≤ 2: the string decouples; 2ā ψ₃'(0) = ā Ĝ₃ and ψ₃ is linear
        let a_bar = m.geometry.a_bar();
        let l = m.geometry.l;
        let slope = 1.0 + c / 2.0;
        let expect0 = l - slope * l;
        assert!((sol.state.psi_a[0].z - expect0).abs() < 1e-4, "{} vs {expect0}", sol.state.psi_a[0].z);
        assert!(sol.state.psi_b.iter().zip(&m.tri.nodes).all(|(p, x)| (p - Vec3::new(x[0], x[1], 0.0)).norm() < 1e-8));
        let expect_e = a_bar * l * (slope - 1.0).powi(2) + a_bar * c * expect0;
        assert!((sol.energy - expect_e).abs() < 1e-8, "{} vs {expect_e}", sol.energy);
    }

    #[test]
    fn alternating_history_is_monotone_for_wells() {
        let m = mesh(8, 4);
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let mut fs = ForceSystem::zero();
        fs.fa = VecField::constant(Vec3::new(0.4, 0.0, 0.0));
        let cfg = RegimeConfig::new(Regime::LInf, 4.0, vec![(0.5, 0.8)]);
        let opts = SolveOptions { multistart: 2, outer_iter: 6, ..Default::default() };
        let sol = solve_limit(&cfg, &w, &fs, &m, &opts).unwrap();
        assert!(sol.history.windows(2).all(|p| p[1] <= p[0] + 1e-9), "{:?}", sol.history);
        assert!(sol.energy < 0.0);
        assert_eq!(sol.state.psi_a[0], Vec3::zeros());
        assert_eq!(*sol.state.psi_a.last().unwrap(), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(sol.state.psi_b, LimitState::natural(&m).psi_b);
    }
}
