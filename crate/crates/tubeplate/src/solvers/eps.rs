use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{scatter_local, ScalarPrecond, SolveOptions};
use crate::envelopes::gauss;
use crate::error::{Error, Result};
use crate::forces::{load_vectors, scale_forces, EpsForces, ForceSystem, LoadVectors, MatField, RegimeConfig};
use crate::material::EnergyDensity;
use crate::mesh::{DeformationState, HexMesh, MultiStructureMesh, GAUSS2};
use crate::optim::lbfgs;
use crate::tensor::{Mat3, Vec3};

/// Gauss points of a hex cell with their weights on the unit cube.
fn gauss_points() -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    let mut n = 0;
    for c in GAUSS2 {
        for b in GAUSS2 {
            for a in GAUSS2 {
                out[n] = [a, b, c];
                n += 1;
            }
        }
    }
    out
}

/// Scaled gradients `S∇N_l` of the eight shape functions at a Gauss point.
fn scaled_gradients(m: &HexMesh, c: usize, xi: [f64; 3], s: &Vec3) -> [Vec3; 8] {
    m.shape_gradients(c, xi).map(|g| g.component_mul(s))
}

/// Stored energy `∫W(∇ψ·diag(s))` of one block, with its nodal gradient.
fn block_energy(
    w: &EnergyDensity,
    m: &HexMesh,
    psi: &[Vec3],
    s: &Vec3,
    block: char,
    grad: Option<&mut [Vec3]>,
) -> Result<f64> {
    let gp = gauss_points();
    let want_grad = grad.is_some();
    let cells: Vec<(f64, [Vec3; 8])> = (0..m.n_cells())
        .into_par_iter()
        .map(|c| {
            let nodes = m.cell_nodes(c);
            let wq = m.cell_volume(c) / 8.0;
            let mut value = 0.0;
            let mut g = [Vec3::zeros(); 8];
            for xi in gp {
                let sg = scaled_gradients(m, c, xi, s);
                let mut f = Mat3::zeros();
                for l in 0..8 {
                    f += psi[nodes[l]] * sg[l].transpose();
                }
                let (v, p) = if want_grad { w.eval_grad(&f) } else { (w.evaluate(&f), Mat3::zeros()) };
                value += wq * v;
                if want_grad {
                    for l in 0..8 {
                        g[l] += p * sg[l] * wq;
                    }
                }
            }
            (value, g)
        })
        .collect();
    let mut total = 0.0;
    for (c, (v, _)) in cells.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { block, element: c });
        }
        total += v;
    }
    if let Some(out) = grad {
        for (c, (_, g)) in cells.iter().enumerate() {
            let nodes = m.cell_nodes(c);
            for l in 0..8 {
                out[nodes[l]] += g[l];
            }
        }
    }
    Ok(total)
}

/// Linear coefficients of `∫_{Ωᵃ}Hᵃ:(r⁻¹∇_αψᵃ|∇₃ψᵃ) + ∫_{Ωᵇ}Hᵇ:(∇_αψᵇ|h⁻¹∇₃ψᵇ)`.
pub fn divergence_vectors(ha: &MatField, hb: &MatField, r: f64, h: f64, ms: &MultiStructureMesh) -> LoadVectors {
    let gp = gauss_points();
    let mut out = [vec![Vec3::zeros(); ms.hex_a.n_nodes()], vec![Vec3::zeros(); ms.hex_b.n_nodes()]];
    let blocks = [(&ms.hex_a, ha, Vec3::new(1.0 / r, 1.0 / r, 1.0)), (&ms.hex_b, hb, Vec3::new(1.0, 1.0, 1.0 / h))];
    for (o, (m, field, s)) in out.iter_mut().zip(blocks) {
        for c in 0..m.n_cells() {
            let nodes = m.cell_nodes(c);
            let wq = m.cell_volume(c) / 8.0;
            for xi in gp {
                let hm = field.eval(&m.point(c, xi));
                let sg = scaled_gradients(m, c, xi, &s);
                for l in 0..8 {
                    o[nodes[l]] += hm * sg[l] * wq;
                }
            }
        }
    }
    let [a, b] = out;
    LoadVectors { a, b }
}

/// Pieces of the scaled total energy
/// `E = overall·[(Fᵃ − Lᵃ) + q(Fᵇ − Lᵇ)] − overall·D`, where `D` is the
/// divergence-form work when present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsEnergyParts {
    pub fa: f64,
    pub la: f64,
    pub fb: f64,
    pub lb: f64,
    pub divergence: f64,
    pub q: f64,
    pub overall: f64,
    pub total: f64,
}

/// Discrete ε-problem: unknowns are the nodal values of the free tube and
/// plate nodes; clamped nodes keep the boundary data and the tube bottom face
/// follows the plate through the junction map.
pub struct EpsProblem<'a> {
    pub ms: &'a MultiStructureMesh,
    pub w: &'a EnergyDensity,
    pub ef: EpsForces,
    base: DeformationState,
    slot_a: Vec<Option<usize>>,
    slot_b: Vec<Option<usize>>,
    n_slots: usize,
    lin: LoadVectors,
    loads: LoadVectors,
    div: Option<LoadVectors>,
}

impl<'a> EpsProblem<'a> {
    pub fn new(ms: &'a MultiStructureMesh, w: &'a EnergyDensity, ef: EpsForces) -> Result<Self> {
        w.validate()?;
        ef.fs.validate()?;
        if (ef.r - ms.r_eps).abs() > 1e-12 * ef.r {
            return Err(Error::Mismatch(format!("mesh built for r = {}, forces scaled for r = {}", ms.r_eps, ef.r)));
        }
        let mut is_slave = vec![false; ms.hex_a.n_nodes()];
        for &s in &ms.junction.slaves {
            is_slave[s] = true;
        }
        let mut n_slots = 0;
        let mut slot_a = vec![None; ms.hex_a.n_nodes()];
        for (i, s) in slot_a.iter_mut().enumerate() {
            if !ms.clamped_a[i] && !is_slave[i] {
                *s = Some(n_slots);
                n_slots += 1;
            }
        }
        // thickness index fastest keeps the plate bandwidth small
        let mut slot_b = vec![None; ms.hex_b.n_nodes()];
        let (nx, ny, nz) = ms.hex_b.dims();
        for j in 0..ny {
            for i in 0..nx {
                for k in 0..nz {
                    let id = ms.hex_b.node(i, j, k);
                    if !ms.clamped_b[id] {
                        slot_b[id] = Some(n_slots);
                        n_slots += 1;
                    }
                }
            }
        }
        let (q, overall) = ef.prefactors();
        let loads = load_vectors(&ef, ms);
        let div = ef.fs.divergence.as_ref().map(|d| divergence_vectors(d.ha(), d.hb(), ef.r, ef.h, ms));
        let mut lin = LoadVectors {
            a: loads.a.iter().map(|v| v * overall).collect(),
            b: loads.b.iter().map(|v| v * (overall * q)).collect(),
        };
        if let Some(d) = &div {
            for (l, v) in lin.a.iter_mut().zip(&d.a) {
                *l += v * overall;
            }
            for (l, v) in lin.b.iter_mut().zip(&d.b) {
                *l += v * overall;
            }
        }
        let mut base = ms.identity_state(ef.h);
        ms.apply_junction(&mut base);
        Ok(Self { ms, w, ef, base, slot_a, slot_b, n_slots, lin, loads, div })
    }

    pub fn n_unknowns(&self) -> usize {
        3 * self.n_slots
    }

    /// Boundary-data extension: the clamped-identity state.
    pub fn initial_state(&self) -> &DeformationState {
        &self.base
    }

    pub fn expand(&self, x: &[f64]) -> DeformationState {
        let mut s = self.base.clone();
        for (psi, slots) in [(&mut s.psi_a, &self.slot_a), (&mut s.psi_b, &self.slot_b)] {
            for (p, slot) in psi.iter_mut().zip(slots) {
                if let Some(k) = slot {
                    *p = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                }
            }
        }
        self.ms.apply_junction(&mut s);
        s
    }

    pub fn restrict(&self, s: &DeformationState) -> Vec<f64> {
        let mut x = vec![0.0; self.n_unknowns()];
        for (psi, slots) in [(&s.psi_a, &self.slot_a), (&s.psi_b, &self.slot_b)] {
            for (p, slot) in psi.iter().zip(slots) {
                if let Some(k) = slot {
                    x[3 * k..3 * k + 3].copy_from_slice(p.as_slice());
                }
            }
        }
        x
    }

    fn scales(&self) -> (Vec3, Vec3) {
        (Vec3::new(1.0 / self.ef.r, 1.0 / self.ef.r, 1.0), Vec3::new(1.0, 1.0, 1.0 / self.ef.h))
    }

    /// Energy pieces at a state (junction assumed applied).
    pub fn parts(&self, s: &DeformationState) -> Result<EpsEnergyParts> {
        self.check(s)?;
        let (sa, sb) = self.scales();
        let fa = block_energy(self.w, &self.ms.hex_a, &s.psi_a, &sa, 'a', None)?;
        let fb = block_energy(self.w, &self.ms.hex_b, &s.psi_b, &sb, 'b', None)?;
        let la = self.loads.work_a(&s.psi_a);
        let lb = self.loads.work_b(&s.psi_b);
        let divergence = self.div.as_ref().map_or(0.0, |d| d.work_a(&s.psi_a) + d.work_b(&s.psi_b));
        let (q, overall) = self.ef.prefactors();
        let total = overall * ((fa - la) + q * (fb - lb)) - overall * divergence;
        Ok(EpsEnergyParts { fa, la, fb, lb, divergence, q, overall, total })
    }

    fn check(&self, s: &DeformationState) -> Result<()> {
        if s.psi_a.len() != self.ms.hex_a.n_nodes() || s.psi_b.len() != self.ms.hex_b.n_nodes() {
            return Err(Error::Mismatch("state does not match the hex meshes".into()));
        }
        Ok(())
    }

    /// Energy and its gradient with respect to the unknowns.
    pub fn energy_grad(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
        let s = self.expand(x);
        let (sa, sb) = self.scales();
        let (q, overall) = self.ef.prefactors();
        let mut ga = vec![Vec3::zeros(); s.psi_a.len()];
        let mut gb = vec![Vec3::zeros(); s.psi_b.len()];
        let fa = block_energy(self.w, &self.ms.hex_a, &s.psi_a, &sa, 'a', Some(&mut ga))?;
        let fb = block_energy(self.w, &self.ms.hex_b, &s.psi_b, &sb, 'b', Some(&mut gb))?;
        let mut e = overall * (fa + q * fb);
        for (gv, (l, p)) in ga.iter_mut().zip(self.lin.a.iter().zip(&s.psi_a)) {
            e -= l.dot(p);
            *gv = *gv * overall - l;
        }
        for (gv, (l, p)) in gb.iter_mut().zip(self.lin.b.iter().zip(&s.psi_b)) {
            e -= l.dot(p);
            *gv = *gv * (overall * q) - l;
        }
        self.ms.junction.adjoint(&mut ga, &mut gb);
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
        Ok(e)
    }

    /// Scalar stiffness of the scaled Laplacian on the unknowns.
    pub(crate) fn preconditioner(&self) -> Result<ScalarPrecond> {
        let (sa, sb) = self.scales();
        let (q, overall) = self.ef.prefactors();
        let mut maps_a: Vec<Vec<(usize, f64)>> = self.slot_a.iter().map(|s| s.map(|k| vec![(k, 1.0)]).unwrap_or_default()).collect();
        for (sl, st) in self.ms.junction.slaves.iter().zip(&self.ms.junction.masters) {
            maps_a[*sl] = st.iter().filter_map(|&(m, wt)| self.slot_b[m].map(|k| (k, wt))).collect();
        }
        let maps_b: Vec<Vec<(usize, f64)>> = self.slot_b.iter().map(|s| s.map(|k| vec![(k, 1.0)]).unwrap_or_default()).collect();
        let gp = gauss_points();
        let mut triplets = Vec::new();
        for (m, maps, s, weight) in [(&self.ms.hex_a, &maps_a, sa, overall), (&self.ms.hex_b, &maps_b, sb, overall * q)] {
            for c in 0..m.n_cells() {
                let nodes = m.cell_nodes(c);
                let wq = weight * m.cell_volume(c) / 8.0;
                let mut k = vec![vec![0.0; 8]; 8];
                for xi in gp {
                    let sg = scaled_gradients(m, c, xi, &s);
                    for l in 0..8 {
                        for n in 0..8 {
                            k[l][n] += wq * sg[l].dot(&sg[n]);
                        }
                    }
                }
                let local: Vec<&[(usize, f64)]> = nodes.iter().map(|&id| maps[id].as_slice()).collect();
                scatter_local(&mut triplets, &local, &k);
            }
        }
        ScalarPrecond::build(self.n_slots, &triplets)
    }
}

/// Scaled total energy of a state; the junction must already hold.
pub fn eps_energy(state: &DeformationState, w: &EnergyDensity, ef: &EpsForces, ms: &MultiStructureMesh) -> Result<f64> {
    Ok(eps_energy_parts(state, w, ef, ms)?.total)
}

pub fn eps_energy_parts(state: &DeformationState, w: &EnergyDensity, ef: &EpsForces, ms: &MultiStructureMesh) -> Result<EpsEnergyParts> {
    EpsProblem::new(ms, w, ef.clone())?.parts(state)
}

/// Minimizer returned by [`solve_eps`]; `energy` is an upper value of the
/// discrete infimum and `slack` the decrease of the last accepted step.
#[derive(Clone, Debug)]
pub struct EpsSolution {
    pub state: DeformationState,
    pub energy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub slack: f64,
    pub history: Vec<f64>,
    /// Run (0 = boundary-data extension) that produced the state.
    pub run: usize,
}

/// Preconditioned L-BFGS from the clamped-identity state; nonconvex
/// densities add seeded random restarts and keep the lowest energy.
pub fn solve_eps(
    w: &EnergyDensity,
    fs: &ForceSystem,
    ms: &MultiStructureMesh,
    cfg: &RegimeConfig,
    eps_index: usize,
    opts: &SolveOptions,
) -> Result<EpsSolution> {
    opts.validate()?;
    cfg.validate()?;
    let ef = scale_forces(fs, cfg, eps_index)?;
    let prob = EpsProblem::new(ms, w, ef)?;
    let pre = prob.preconditioner()?;
    let apply = |v: &[f64], out: &mut [f64]| pre.apply(v, out);
    let x0 = prob.restrict(prob.initial_state());
    let mut g0 = vec![0.0; x0.len()];
    // surfaces a non-finite initial energy with its element
    prob.energy_grad(&x0, &mut g0)?;
    let fg = |x: &[f64], g: &mut [f64]| prob.energy_grad(x, g).unwrap_or(f64::INFINITY);
    let lopts = opts.lbfgs();
    let runs = if w.is_convex() { 0 } else { opts.restarts };
    let mut best: Option<(usize, crate::optim::LbfgsOutcome)> = None;
    for run in 0..=runs {
        let start = if run == 0 {
            x0.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(7919).wrapping_add((eps_index * 64 + run) as u64));
            let amp = opts.restart_amplitude;
            let mut x = x0.clone();
            for (slots, len) in [(&prob.slot_a, prob.ef.r), (&prob.slot_b, prob.ef.h)] {
                for k in slots.iter().flatten() {
                    for c in 0..3 {
                        x[3 * k + c] += amp * len * gauss(&mut rng);
                    }
                }
            }
            x
        };
        let out = lbfgs(fg, start, &lopts, Some(&apply));
        if best.as_ref().is_none_or(|b| out.f < b.1.f) {
            best = Some((run, out));
        }
    }
    let (run, out) = best.expect("at least one run");
    let state = prob.expand(&out.x);
    let energy = prob.parts(&state)?.total;
    Ok(EpsSolution {
        state,
        energy,
        converged: out.converged,
        iterations: out.iterations,
        evaluations: out.evaluations,
        slack: if out.last_decrease.is_finite() { out.last_decrease.max(0.0) } else { 0.0 },
        history: out.history,
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forces::{Regime, VecField};
    use crate::mesh::{build_multistructure, Geometry, Resolution};
    use crate::tensor::WellSet;

    fn small() -> Resolution {
        Resolution { na: 2, nz: 4, nb: 6, nh: 2, interval: 8, tri: 4, tri_grading: 1.0 }
    }

    #[test]
    fn identity_state_has_zero_energy_in_every_regime() {
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let geom = Geometry::default();
        for regime in [Regime::LPlus { ell: 1.0 }, Regime::LInf, Regime::LZero] {
            let cfg = RegimeConfig::new(regime, 2.0, vec![(0.5, 0.3), (0.25, 0.1)]);
            for i in 0..2 {
                let ef = scale_forces(&ForceSystem::zero(), &cfg, i).unwrap();
                let ms = build_multistructure(&geom, &small(), ef.r).unwrap();
                let mut s = ms.identity_state(ef.h);
                ms.apply_junction(&mut s);
                let e = eps_energy(&s, &w, &ef, &ms).unwrap();
                assert!(e.abs() <= 1e-12, "{e}");
            }
        }
    }

    #[test]
    fn quadratic_energy_matches_hand_assembly() {
        let w = EnergyDensity::quadratic_convex();
        let geom = Geometry { sa: 0.5, sb: 1.0, l: 1.0 };
        let res = Resolution { na: 2, nz: 2, nb: 2, nh: 2, interval: 4, tri: 2, tri_grading: 1.0 };
        let cfg = RegimeConfig::new(Regime::LPlus { ell: 1.0 }, 2.0, vec![(0.5, 0.25)]);
        let ef = scale_forces(&ForceSystem::zero(), &cfg, 0).unwrap();
        let ms = build_multistructure(&geom, &res, 0.5).unwrap();
        let v = |x: &Vec3| Vec3::new(x.y * x.z, x.x * x.x, (x.x + x.y) * x.z);
        let mut s0 = ms.identity_state(0.25);
        ms.apply_junction(&mut s0);
        let prob = EpsProblem::new(&ms, &w, ef.clone()).unwrap();
        let x0 = prob.restrict(&s0);
        let dx = prob.restrict(&DeformationState { psi_a: ms.hex_a.sample(v), psi_b: ms.hex_b.sample(v) });
        let (q, _) = ef.prefactors();
        assert!((q - 1.0).abs() < 1e-15);
        for delta in [1e-3, 0.1, 0.7] {
            let x: Vec<f64> = x0.iter().zip(&dx).map(|(a, b)| a + delta * b).collect();
            let s = prob.expand(&x);
            // the perturbation is only applied on free nodes; rebuild the hand value the same way
            let pert = DeformationState {
                psi_a: s.psi_a.iter().zip(&s0.psi_a).map(|(a, b)| (a - b) / delta).collect(),
                psi_b: s.psi_b.iter().zip(&s0.psi_b).map(|(a, b)| (a - b) / delta).collect(),
            };
            let e = eps_energy(&s, &w, &ef, &ms).unwrap();
            let full = hand_quadratic(&ms, &pert);
            assert!(full > 0.0);
            assert!((e - delta * delta * full).abs() <= 1e-12 * (1.0 + e.abs()), "{e} vs {}", delta * delta * full);
        }
    }

    /// `Σ w|∇v·S|²` with the trilinear gradient built from corner values.
    fn hand_quadratic(ms: &MultiStructureMesh, v: &DeformationState) -> f64 {
        let mut total = 0.0;
        for (m, psi, s) in [(&ms.hex_a, &v.psi_a, Vec3::new(2.0, 2.0, 1.0)), (&ms.hex_b, &v.psi_b, Vec3::new(1.0, 1.0, 4.0))] {
            for c in 0..m.n_cells() {
                let (i, j, k) = m.cell_ijk(c);
                let (hx, hy, hz) = (m.x[i + 1] - m.x[i], m.y[j + 1] - m.y[j], m.z[k + 1] - m.z[k]);
                for gz in GAUSS2 {
                    for gy in GAUSS2 {
                        for gx in GAUSS2 {
                            let mut d = Mat3::zeros();
                            for a in 0..2 {
                                for b in 0..2 {
                                    for cc in 0..2 {
                                        let val = psi[m.node(i + a, j + b, k + cc)];
                                        let f = |t: f64, on: usize| if on == 1 { t } else { 1.0 - t };
                                        let sg = |on: usize, h: f64| if on == 1 { 1.0 / h } else { -1.0 / h };
                                        d.set_column(0, &(d.column(0) + val * (sg(a, hx) * f(gy, b) * f(gz, cc) * s.x)));
                                        d.set_column(1, &(d.column(1) + val * (f(gx, a) * sg(b, hy) * f(gz, cc) * s.y)));
                                        d.set_column(2, &(d.column(2) + val * (f(gx, a) * f(gy, b) * sg(cc, hz) * s.z)));
                                    }
                                }
                            }
                            total += hx * hy * hz / 8.0 * d.norm_squared();
                        }
                    }
                }
            }
        }
        total
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let geom = Geometry::default();
        let mut fs = ForceSystem::zero();
        fs.fa = VecField::constant(Vec3::new(0.1, 0.0, 0.3));
        fs.gb_plus = VecField::constant(Vec3::new(0.0, 0.0, 0.2));
        let cfg = RegimeConfig::new(Regime::LPlus { ell: 1.0 }, 4.0, vec![(0.5, 0.25)]);
        let ef = scale_forces(&fs, &cfg, 0).unwrap();
        let ms = build_multistructure(&geom, &small(), 0.5).unwrap();
        let prob = EpsProblem::new(&ms, &w, ef).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = prob.restrict(prob.initial_state()).iter().map(|v| v + 0.05 * gauss(&mut rng)).collect();
        let mut g = vec![0.0; x.len()];
        prob.energy_grad(&x, &mut g).unwrap();
        let mut scratch = vec![0.0; x.len()];
        for k in [0, 5, x.len() / 2, x.len() - 1] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let ep = prob.energy_grad(&xp, &mut scratch).unwrap();
            xp[k] -= 2.0 * h;
            let em = prob.energy_grad(&xp, &mut scratch).unwrap();
            let fd = (ep - em) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn natural_state_is_a_fixed_point_and_energy_decreases() {
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let geom = Geometry::default();
        let cfg = RegimeConfig::new(Regime::LPlus { ell: 1.0 }, 4.0, vec![(0.5, 0.25)]);
        let ms = build_multistructure(&geom, &small(), 0.5).unwrap();
        let opts = SolveOptions { restarts: 1, ..Default::default() };
        let sol = solve_eps(&w, &ForceSystem::zero(), &ms, &cfg, 0, &opts).unwrap();
        assert!(sol.energy <= 1e-10, "{}", sol.energy);

        let mut fs = ForceSystem::zero();
        fs.fa = VecField::constant(Vec3::new(0.0, 0.0, 0.4));
        let w = EnergyDensity::quadratic_convex();
        let sol = solve_eps(&w, &fs, &ms, &cfg, 0, &opts).unwrap();
        assert!(sol.converged);
        assert!(sol.energy < 0.0);
        assert!(sol.history.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn nan_energy_names_the_element() {
        let w = EnergyDensity::quadratic_convex();
        let geom = Geometry::default();
        let cfg = RegimeConfig::new(Regime::LPlus { ell: 1.0 }, 2.0, vec![(0.5, 0.25)]);
        let ef = scale_forces(&ForceSystem::zero(), &cfg, 0).unwrap();
        let ms = build_multistructure(&geom, &small(), 0.5).unwrap();
        let mut s = ms.identity_state(0.25);
        let last = s.psi_a.len() - 1;
        s.psi_a[last] = Vec3::new(f64::NAN, 0.0, 0.0);
        match eps_energy(&s, &w, &ef, &ms) {
            Err(Error::NonFinite { block: 'a', element }) => assert_eq!(element, ms.hex_a.n_cells() - 1),
            other => panic!("{other:?}"),
        }
    }
}
