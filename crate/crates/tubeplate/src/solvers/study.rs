use rayon::prelude::*;
use serde::Serialize;

use super::{solve_eps, solve_limit, EpsSolution, LimitSolution, SolveOptions};
use crate::error::{Error, Result};
use crate::forces::{ForceSystem, Regime, RegimeConfig};
use crate::material::EnergyDensity;
use crate::mesh::{
    average_bbar_a, average_bbar_b, build_limit_mesh, build_multistructure, cross_section_average, thickness_average,
    Geometry, HexMesh, LimitMesh, MultiStructureMesh, Resolution, GAUSS2,
};
use crate::tensor::{i_alpha, Mat3x2, Vec3};

/// One ε of a Γ-convergence study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaRow {
    pub r: f64,
    pub h: f64,
    /// Minimized scaled energy (an upper value of the discrete infimum).
    pub energy: f64,
    pub gap: f64,
    pub converged: bool,
    pub slack: f64,
    /// Unconverged, or slack above the reporting threshold.
    pub flagged: bool,
    pub bbar_a_norm: f64,
    pub bbar_b_norm: f64,
    pub dist_psi_a: f64,
    pub dist_bbar_a: f64,
    pub dist_psi_b: f64,
    pub dist_bbar_b: f64,
    /// `‖ψᵇ_ε − (x_α, 0)‖_{Lᵖ}` (rigid-plate regime).
    pub plate_dev: Option<f64>,
    /// `‖h_ε⁻¹∇₃ψᵇ_ε − e₃‖_{Lᵖ}` (rigid-plate regime).
    pub plate_bbar_dev: Option<f64>,
    /// `‖r_ε⁻¹∇_αψᵃ_ε − I_α‖_{Lᵖ}` (rigid-beam regime).
    pub beam_dev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitRow {
    pub energy: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub psi_a_bottom: [f64; 3],
    pub psi_b_centre: [f64; 3],
    pub bbar_a_norm: f64,
    pub bbar_b_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaReport {
    pub regime: Regime,
    pub p: f64,
    /// Ordered by decreasing `r_ε`.
    pub rows: Vec<GammaRow>,
    pub limit: LimitRow,
}

impl GammaReport {
    pub fn gaps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gap).collect()
    }

    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged) || !self.limit.converged
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            wr.serialize(row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report is serializable")
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Everything a study computed: the report plus the states behind it.
pub struct GammaStudy {
    pub report: GammaReport,
    pub meshes: Vec<MultiStructureMesh>,
    pub solutions: Vec<EpsSolution>,
    pub limit: LimitSolution,
    pub limit_mesh: LimitMesh,
}

/// `(Σ w|v|ᵖ)^{1/p}` over weighted samples.
fn lp(samples: impl Iterator<Item = (f64, f64)>, p: f64) -> f64 {
    samples.map(|(w, v)| w * v.powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Gauss points of `(0, L)` cut at the hex node levels: `(weight, z, level, t)`.
fn axial_points(zs: &[f64]) -> Vec<(f64, f64, usize, f64)> {
    let mut out = Vec::new();
    for k in 0..zs.len() - 1 {
        let dz = zs[k + 1] - zs[k];
        for t in GAUSS2 {
            out.push((0.5 * dz, zs[k] + t * dz, k, t));
        }
    }
    out
}

/// Gauss points of the plate's in-plane grid: `(weight, point, four ids, four weights)`.
fn plane_points(m: &HexMesh) -> Vec<(f64, [f64; 2], [usize; 4], [f64; 4])> {
    let nx = m.x.len();
    let mut out = Vec::new();
    for j in 0..m.y.len() - 1 {
        for i in 0..nx - 1 {
            let (hx, hy) = (m.x[i + 1] - m.x[i], m.y[j + 1] - m.y[j]);
            let ids = [j * nx + i, j * nx + i + 1, (j + 1) * nx + i, (j + 1) * nx + i + 1];
            for t in GAUSS2 {
                for s in GAUSS2 {
                    let wts = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                    out.push((0.25 * hx * hy, [m.x[i] + s * hx, m.y[j] + t * hy], ids, wts));
                }
            }
        }
    }
    out
}

fn element_at(mesh: &LimitMesh, z: f64) -> usize {
    let nodes = &mesh.interval.nodes;
    nodes.partition_point(|&x| x <= z).saturating_sub(1).min(nodes.len() - 2)
}

fn interval_eval(mesh: &LimitMesh, psi: &[Vec3], z: f64) -> Vec3 {
    let e = element_at(mesh, z);
    let t = (z - mesh.interval.nodes[e]) / mesh.interval.length(e);
    psi[e] * (1.0 - t) + psi[e + 1] * t
}

/// `Lᵖ` norm of `f(D)` over a hex block with `D` the scaled gradient at 2×2×2 Gauss points.
fn block_norm(m: &HexMesh, psi: &[Vec3], s: &Vec3, p: f64, f: impl Fn(&crate::tensor::Mat3, &Vec3) -> f64) -> f64 {
    let scale = crate::tensor::Mat3::from_diagonal(s);
    let mut acc = 0.0;
    for c in 0..m.n_cells() {
        let w = m.cell_volume(c) / 8.0;
        for a in GAUSS2 {
            for b in GAUSS2 {
                for cc in GAUSS2 {
                    let xi = [a, b, cc];
                    let d = m.gradient(psi, c, xi) * scale;
                    acc += w * f(&d, &m.point(c, xi)).powf(p);
                }
            }
        }
    }
    acc.powf(1.0 / p)
}

fn plate_value(m: &HexMesh, psi: &[Vec3], p: f64) -> f64 {
    let mut acc = 0.0;
    for c in 0..m.n_cells() {
        let w = m.cell_volume(c) / 8.0;
        for a in GAUSS2 {
            for b in GAUSS2 {
                for cc in GAUSS2 {
                    let xi = [a, b, cc];
                    let x = m.point(c, xi);
                    acc += w * (m.interpolate(psi, c, xi) - Vec3::new(x.x, x.y, 0.0)).norm().powf(p);
                }
            }
        }
    }
    acc.powf(1.0 / p)
}

fn row_for(
    cfg: &RegimeConfig,
    ms: &MultiStructureMesh,
    sol: &EpsSolution,
    lim: &LimitSolution,
    lm: &LimitMesh,
    opts: &SolveOptions,
    r: f64,
    h: f64,
) -> GammaRow {
    let p = cfg.p;
    let ba = average_bbar_a(&sol.state.psi_a, r, &ms.hex_a);
    let bb = average_bbar_b(&sol.state.psi_b, h, &ms.hex_b);
    let pa = cross_section_average(&sol.state.psi_a, &ms.hex_a);
    let pb = thickness_average(&sol.state.psi_b, &ms.hex_b);
    let ax = axial_points(&ms.hex_a.z);
    let lerp_m = |v: &[Mat3x2], k: usize, t: f64| v[k] * (1.0 - t) + v[k + 1] * t;
    let lerp_v = |v: &[Vec3], k: usize, t: f64| v[k] * (1.0 - t) + v[k + 1] * t;
    let bbar_a_norm = lp(ax.iter().map(|&(w, _, k, t)| (w, lerp_m(&ba, k, t).norm())), p);
    let dist_bbar_a = lp(ax.iter().map(|&(w, z, k, t)| (w, (lerp_m(&ba, k, t) - lim.state.bbar_a[element_at(lm, z)]).norm())), p);
    let dist_psi_a = lp(ax.iter().map(|&(w, z, k, t)| (w, (lerp_v(&pa, k, t) - interval_eval(lm, &lim.state.psi_a, z)).norm())), p);
    let pl = plane_points(&ms.hex_b);
    let bil = |v: &[Vec3], ids: &[usize; 4], wts: &[f64; 4]| (0..4).fold(Vec3::zeros(), |a, l| a + v[ids[l]] * wts[l]);
    let bbar_b_norm = lp(pl.iter().map(|(w, _, ids, wts)| (*w, bil(&bb, ids, wts).norm())), p);
    let dist_bbar_b = lp(
        pl.iter().map(|(w, x, ids, wts)| {
            let (t, _) = lm.tri.locate(*x);
            (*w, (bil(&bb, ids, wts) - lim.state.bbar_b[t]).norm())
        }),
        p,
    );
    let dist_psi_b = lp(pl.iter().map(|(w, x, ids, wts)| (*w, (bil(&pb, ids, wts) - lm.tri.eval(&lim.state.psi_b, *x)).norm())), p);
    let (plate_dev, plate_bbar_dev, beam_dev) = match cfg.regime {
        Regime::LInf => {
            let sb = Vec3::new(1.0, 1.0, 1.0 / h);
            let dev = plate_value(&ms.hex_b, &sol.state.psi_b, p);
            let bdev = block_norm(&ms.hex_b, &sol.state.psi_b, &sb, p, |d, _| (d.column(2) - Vec3::z()).norm());
            (Some(dev), Some(bdev), None)
        }
        Regime::LZero => {
            let sa = Vec3::new(1.0 / r, 1.0 / r, 1.0);
            let dev = block_norm(&ms.hex_a, &sol.state.psi_a, &sa, p, |d, _| (d.fixed_columns::<2>(0) - i_alpha()).norm());
            (None, None, Some(dev))
        }
        Regime::LPlus { .. } => (None, None, None),
    };
    GammaRow {
        r,
        h,
        energy: sol.energy,
        gap: (sol.energy - lim.energy).abs(),
        converged: sol.converged,
        slack: sol.slack,
        flagged: !sol.converged || sol.slack > opts.slack_threshold,
        bbar_a_norm,
        bbar_b_norm,
        dist_psi_a,
        dist_bbar_a,
        dist_psi_b,
        dist_bbar_b,
        plate_dev,
        plate_bbar_dev,
        beam_dev,
    }
}

/// Solves every ε of the configuration and the limit problem, and compares them.
pub fn run_gamma_study(
    cfg: &RegimeConfig,
    w: &EnergyDensity,
    fs: &ForceSystem,
    geom: &Geometry,
    res: &Resolution,
    opts: &SolveOptions,
) -> Result<GammaStudy> {
    cfg.validate()?;
    if cfg.eps.len() < 3 {
        return Err(Error::Config(format!("a Γ-study needs at least 3 ε values, got {}", cfg.eps.len())));
    }
    let lm = build_limit_mesh(geom, res)?;
    let limit = solve_limit(cfg, w, fs, &lm, opts)?;
    let solved: Vec<Result<(MultiStructureMesh, EpsSolution)>> = (0..cfg.eps.len())
        .into_par_iter()
        .map(|i| {
            let (r, _) = cfg.eps[i];
            let ms = build_multistructure(geom, res, r)?;
            let sol = solve_eps(w, fs, &ms, cfg, i, opts)?;
            Ok((ms, sol))
        })
        .collect();
    let mut meshes = Vec::new();
    let mut solutions = Vec::new();
    for s in solved {
        let (m, sol) = s?;
        meshes.push(m);
        solutions.push(sol);
    }
    let rows = (0..cfg.eps.len())
        .map(|i| {
            let (r, h) = cfg.eps[i];
            row_for(cfg, &meshes[i], &solutions[i], &limit, &lm, opts, r, h)
        })
        .collect();
    let ls = &limit.state;
    let lrow = LimitRow {
        energy: limit.energy,
        converged: limit.converged,
        sweeps: limit.sweeps,
        psi_a_bottom: ls.psi_a[0].into(),
        psi_b_centre: ls.psi_b[lm.tri.origin].into(),
        bbar_a_norm: lp((0..lm.interval.n_elements()).map(|e| (lm.interval.length(e), ls.bbar_a[e].norm())), cfg.p),
        bbar_b_norm: lp((0..lm.tri.tris.len()).map(|t| (lm.tri.area(t), ls.bbar_b[t].norm())), cfg.p),
    };
    let report = GammaReport { regime: cfg.regime, p: cfg.p, rows, limit: lrow };
    Ok(GammaStudy { report, meshes, solutions, limit, limit_mesh: lm })
}

pub fn gamma_study(
    cfg: &RegimeConfig,
    w: &EnergyDensity,
    fs: &ForceSystem,
    geom: &Geometry,
    res: &Resolution,
    opts: &SolveOptions,
) -> Result<GammaReport> {
    Ok(run_gamma_study(cfg, w, fs, geom, res, opts)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::WellSet;

    #[test]
    fn zero_forces_give_zero_gaps() {
        let w = EnergyDensity::p_well(4.0, WellSet::double(1.3).unwrap()).unwrap();
        let res = Resolution { na: 2, nz: 4, nb: 6, nh: 2, interval: 8, tri: 4, tri_grading: 1.0 };
        let cfg = RegimeConfig::lplus(1.0, 4.0, &[0.5, 0.25, 0.125]);
        let opts = SolveOptions { restarts: 0, multistart: 2, ..Default::default() };
        let rep = gamma_study(&cfg, &w, &ForceSystem::zero(), &Geometry::default(), &res, &opts).unwrap();
        assert_eq!(rep.rows.len(), 3);
        for row in &rep.rows {
            assert!(row.gap <= 1e-10, "{row:?}");
            assert!(row.dist_psi_a < 1e-10 && row.dist_bbar_a < 1e-10 && row.dist_bbar_b < 1e-10, "{row:?}");
            // thickness average of the identity sits at x₃ = −h/2
            assert!((row.dist_psi_b - 0.5 * row.h * 4f64.powf(0.25)).abs() < 1e-12, "{row:?}");
        }
        assert!(rep.rows.windows(2).all(|w| w[1].r < w[0].r));
    }

    #[test]
    fn short_eps_lists_are_rejected() {
        let w = EnergyDensity::quadratic_convex();
        let cfg = RegimeConfig::lplus(1.0, 4.0, &[0.5, 0.25]);
        let r = gamma_study(&cfg, &w, &ForceSystem::zero(), &Geometry::default(), &Resolution::default(), &SolveOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
