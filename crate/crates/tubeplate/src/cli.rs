//! Batch front end of the `tubeplate` binary: strict TOML configuration,
//! subcommand dispatch, artifacts and the run manifest.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::envelopes::{cell_qcw, convex_envelope, cross_convex_1d_check, radial_envelope_oracle, EnvelopeQuery};
use crate::error::{Error, Result};
use crate::forces::{
    scale_forces, work_a, work_a_raw, work_b, work_b_raw, ForceSystem, Regime, RegimeConfig,
};
use crate::material::{sample_matrices, DensityKind, EnergyDensity};
use crate::mesh::{
    annulus_p_capacity, average_bbar_a, average_bbar_b, build_limit_mesh, build_multistructure, write_node_csv,
    Geometry, LimitState, Resolution,
};
use crate::solvers::{eps_energy, eps_energy_parts, limit_energy, run_gamma_study, solve_eps, solve_limit, Envelopes, SolveOptions};
use crate::tensor::{svd3, Mat3, Mat3x2, Vec3, WellSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "tubeplate", version, about = "Thin tube-on-plate multi-structures: ε-problems, limit problems and envelopes")]
pub struct Cli {
    /// TOML run configuration; the shipped defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output` in the configuration).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides `seed` in the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads of the solvers.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Minimizes the scaled energy of one ε.
    SolveEps {
        #[arg(long, default_value_t = 0)]
        eps_index: usize,
    },
    /// Minimizes the limit energy.
    SolveLimit {
        /// Replaces the regime of the configuration (the hypotheses are re-checked).
        #[arg(long)]
        regime: Option<RegimeArg>,
    },
    /// Solves every ε and the limit and reports the gaps.
    GammaStudy,
    /// Envelope value triples on a list of matrices.
    Envelope,
    /// Runs the invariant suite.
    CheckInvariants,
    /// Annulus p-capacity diagnostic.
    Capacity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeArg {
    Lplus,
    Linf,
    Lzero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeBlock {
    pub kind: RegimeArg,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,
    pub p: f64,
    /// Tube radii `r_ε`; `h_ε` follows from the regime rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    /// Explicit `(r_ε, h_ε)` pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<[f64; 2]>>,
    /// `h_ε = h_coeff · r_ε^h_exponent` for `linf` and `lzero`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_coeff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_exponent: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityName {
    RadialQuartic,
    PWellDist,
    QuadraticConvex,
    Tabulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityBlock {
    pub kind: DensityName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// Growth constant `C`.
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Second well `δI`; absent means the single well `SO(3)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeBlock {
    /// Evaluates at `t·I/√3`, i.e. `|F| = t`.
    pub radii: Vec<f64>,
    /// Row-major 3×3 matrices.
    pub matrices: Vec<[f64; 9]>,
    pub points: usize,
    pub multistart: usize,
    pub cell_n: usize,
}

impl Default for EnvelopeBlock {
    fn default() -> Self {
        Self {
            radii: (0..20).map(|i| 3.0 * i as f64 / 19.0).collect(),
            matrices: Vec::new(),
            points: 10,
            multistart: 16,
            cell_n: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityBlock {
    /// `(p, r)` pairs.
    pub cases: Vec<[f64; 2]>,
    pub resolution: usize,
    /// Admissible relative deviation of the FEM estimate.
    pub tolerance: f64,
}

impl Default for CapacityBlock {
    fn default() -> Self {
        Self { cases: vec![[2.0, (-2.0f64).exp()], [1.5, 0.01], [1.2, 0.05]], resolution: 4000, tolerance: 0.02 }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("tubeplate-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub regime: RegimeBlock,
    pub density: DensityBlock,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub forces: ForceSystem,
    #[serde(default)]
    pub mesh: Resolution,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub envelope: EnvelopeBlock,
    #[serde(default)]
    pub capacity: CapacityBlock,
}

impl Default for RunConfig {
    /// `ℓ = 1`, `p = 4`, double-well density, three radii.
    fn default() -> Self {
        Self {
            seed: 0,
            output: default_output(),
            regime: RegimeBlock {
                kind: RegimeArg::Lplus,
                ell: Some(1.0),
                p: 4.0,
                radii: Some(vec![0.5, 0.25, 0.125]),
                eps: None,
                h_coeff: None,
                h_exponent: None,
            },
            density: DensityBlock {
                kind: DensityName::PWellDist,
                p: Some(4.0),
                c: None,
                delta: Some(WellSet::DEFAULT_DELTA),
                radii: None,
                values: None,
            },
            geometry: Geometry::default(),
            forces: ForceSystem::zero(),
            mesh: Resolution { na: 4, nz: 8, nb: 12, nh: 3, interval: 8, tri: 8, tri_grading: 1.5 },
            solver: SolveOptions { restarts: 1, ..Default::default() },
            envelope: EnvelopeBlock::default(),
            capacity: CapacityBlock::default(),
        }
    }
}

fn err_text(e: Error) -> String {
    match e {
        Error::Config(s) | Error::Mesh(s) => s,
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn regime(&self) -> std::result::Result<Regime, String> {
        match self.regime.kind {
            RegimeArg::Lplus => match self.regime.ell {
                Some(ell) => Ok(Regime::LPlus { ell }),
                None => Err("regime.ell is required for kind = \"lplus\"".into()),
            },
            RegimeArg::Linf => Ok(Regime::LInf),
            RegimeArg::Lzero => Ok(Regime::LZero),
        }
    }

    fn eps_list(&self, regime: &Regime, errs: &mut Vec<String>) -> Vec<(f64, f64)> {
        let b = &self.regime;
        match (&b.radii, &b.eps) {
            (Some(_), Some(_)) => {
                errs.push("regime.radii and regime.eps are mutually exclusive".into());
                Vec::new()
            }
            (None, None) => {
                errs.push("regime needs either `radii` or `eps`".into());
                Vec::new()
            }
            (None, Some(pairs)) => {
                if b.h_coeff.is_some() || b.h_exponent.is_some() {
                    errs.push("regime.h_coeff/h_exponent only apply together with regime.radii".into());
                }
                pairs.iter().map(|[r, h]| (*r, *h)).collect()
            }
            (Some(radii), None) => match regime {
                Regime::LPlus { ell } => {
                    if b.h_coeff.is_some() || b.h_exponent.is_some() {
                        errs.push("lplus fixes h_ε = ℓ·r_ε²; remove regime.h_coeff/h_exponent".into());
                    }
                    radii.iter().map(|r| (*r, ell * r * r)).collect()
                }
                _ => match (b.h_coeff, b.h_exponent) {
                    (Some(c), Some(e)) => radii.iter().map(|r| (*r, c * r.powf(e))).collect(),
                    _ => {
                        errs.push("regime.radii with linf/lzero needs both h_coeff and h_exponent".into());
                        Vec::new()
                    }
                },
            },
        }
    }

    fn density_checked(&self, errs: &mut Vec<String>) -> Option<EnergyDensity> {
        let d = &self.density;
        let fixed = |name: &str, p: f64, errs: &mut Vec<String>| {
            if let Some(q) = d.p {
                if q != p {
                    errs.push(format!("density {name} has growth exponent {p}, got density.p = {q}"));
                }
            }
        };
        if d.delta.is_some() && d.kind != DensityName::PWellDist {
            errs.push("density.delta only applies to kind = \"p-well-dist\"".into());
        }
        if (d.radii.is_some() || d.values.is_some()) && d.kind != DensityName::Tabulated {
            errs.push("density.radii/values only apply to kind = \"tabulated\"".into());
        }
        let user_p = |errs: &mut Vec<String>| -> Option<f64> {
            match d.p {
                None => {
                    errs.push("density.p is required for this kind".into());
                    None
                }
                Some(p) => {
                    if p != self.regime.p {
                        errs.push(format!("density.p = {p} differs from regime.p = {}", self.regime.p));
                    }
                    Some(p)
                }
            }
        };
        let built = match d.kind {
            DensityName::RadialQuartic => {
                fixed("radial-quartic", 4.0, errs);
                let mut w = EnergyDensity::radial_quartic();
                if let Some(c) = d.c {
                    w.c = c;
                }
                Some(w)
            }
            DensityName::QuadraticConvex => {
                fixed("quadratic-convex", 2.0, errs);
                let mut w = EnergyDensity::quadratic_convex();
                if let Some(c) = d.c {
                    w.c = c;
                }
                Some(w)
            }
            DensityName::PWellDist => {
                let p = user_p(errs)?;
                let wells = match d.delta {
                    None => WellSet::SingleWell,
                    Some(delta) => match WellSet::double(delta) {
                        Ok(w) => w,
                        Err(e) => {
                            errs.push(err_text(e));
                            return None;
                        }
                    },
                };
                let w = match d.c {
                    Some(c) => EnergyDensity::p_well_with_constant(p, c, wells),
                    None => EnergyDensity::p_well(p, wells),
                };
                w.map_err(|e| errs.push(err_text(e))).ok()
            }
            DensityName::Tabulated => {
                let p = user_p(errs);
                let (Some(radii), Some(values)) = (d.radii.clone(), d.values.clone()) else {
                    errs.push("tabulated density needs density.radii and density.values".into());
                    return None;
                };
                let Some(c) = d.c else {
                    errs.push("tabulated density needs density.C".into());
                    return None;
                };
                EnergyDensity::tabulated(radii, values, p?, c).map_err(|e| errs.push(err_text(e))).ok()
            }
        };
        if let Some(w) = &built {
            if let Err(e) = w.validate() {
                errs.push(err_text(e));
            }
        }
        built
    }

    /// Every violated rule of the configuration.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self.regime() {
            Ok(regime) => {
                if self.regime.ell.is_some() && !matches!(regime, Regime::LPlus { .. }) {
                    errs.push("regime.ell only applies to kind = \"lplus\"".into());
                }
                let eps = self.eps_list(&regime, &mut errs);
                if !eps.is_empty() {
                    errs.extend(RegimeConfig::new(regime, self.regime.p, eps).violations());
                }
            }
            Err(e) => errs.push(e),
        }
        self.density_checked(&mut errs);
        for r in [self.geometry.validate(), self.mesh.validate(), self.solver.validate(), self.forces.validate()] {
            if let Err(e) = r {
                errs.push(err_text(e));
            }
        }
        let env = &self.envelope;
        if env.points < 2 || env.multistart == 0 || env.cell_n < 2 {
            errs.push("envelope.points ≥ 2, envelope.multistart ≥ 1 and envelope.cell_n ≥ 2 are required".into());
        }
        if env.radii.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || env.matrices.iter().flatten().any(|v| !v.is_finite()) {
            errs.push("envelope radii must be finite and ≥ 0, matrices finite".into());
        }
        let cap = &self.capacity;
        if cap.resolution < 2 || !(cap.tolerance > 0.0) {
            errs.push("capacity.resolution ≥ 2 and capacity.tolerance > 0 are required".into());
        }
        for [p, r] in &cap.cases {
            if !(*p > 1.0 && *p <= 2.0 && *r > 0.0 && *r < 1.0) {
                errs.push(format!("capacity case (p, r) = ({p}, {r}) needs 1 < p ≤ 2 and 0 < r < 1"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("\n")))
        }
    }

    pub fn regime_config(&self) -> Result<RegimeConfig> {
        let mut errs = Vec::new();
        let regime = self.regime().map_err(Error::Config)?;
        let eps = self.eps_list(&regime, &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("\n")));
        }
        let cfg = RegimeConfig::new(regime, self.regime.p, eps);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn density(&self) -> Result<EnergyDensity> {
        let mut errs = Vec::new();
        match self.density_checked(&mut errs) {
            Some(w) if errs.is_empty() => Ok(w),
            _ => Err(Error::Config(errs.join("\n"))),
        }
    }

    /// Solver options carrying the global seed.
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { seed: self.seed, ..self.solver.clone() }
    }
}

/// Parses and validates a configuration text, reporting every violation.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Outcome of one subcommand.
pub struct Outcome {
    pub exit: i32,
    pub summary: serde_json::Value,
    pub artifacts: Vec<String>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    artifacts: Vec<String>,
    timings: Vec<(String, f64)>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn write_json(&mut self, name: &str, v: &serde_json::Value) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, serde_json::to_string_pretty(v).expect("json values serialize") + "\n")?;
        Ok(())
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.timings.push((phase.to_string(), t.elapsed().as_secs_f64()));
        v
    }
}

fn solve_eps_cmd(run: &mut Run, eps_index: usize) -> Result<Outcome> {
    let cfg = run.cfg;
    let rc = cfg.regime_config()?;
    let (r, h) = rc.eps_at(eps_index)?;
    let w = cfg.density()?;
    let opts = cfg.solve_options();
    let ms = build_multistructure(&cfg.geometry, &cfg.mesh, r)?;
    let sol = run.timed("solve_eps", || solve_eps(&w, &cfg.forces, &ms, &rc, eps_index, &opts))?;
    let ef = scale_forces(&cfg.forces, &rc, eps_index)?;
    let parts = eps_energy_parts(&sol.state, &w, &ef, &ms)?;
    let pa: Vec<Vec3> = (0..ms.hex_a.n_nodes()).map(|i| ms.hex_a.coords(i)).collect();
    let pb: Vec<Vec3> = (0..ms.hex_b.n_nodes()).map(|i| ms.hex_b.coords(i)).collect();
    write_node_csv(&run.path("tube_nodes.csv"), &pa, &sol.state.psi_a)?;
    write_node_csv(&run.path("plate_nodes.csv"), &pb, &sol.state.psi_b)?;
    let summary = json!({
        "eps_index": eps_index,
        "r": r,
        "h": h,
        "energy": sol.energy,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "evaluations": sol.evaluations,
        "slack": sol.slack,
        "run": sol.run,
        "parts": {
            "fa": parts.fa, "la": parts.la, "fb": parts.fb, "lb": parts.lb,
            "divergence": parts.divergence, "q": parts.q, "overall": parts.overall, "total": parts.total,
        },
        "history": sol.history,
        "mesh": ms.summary_json(),
    });
    run.write_json("eps_solution.json", &summary)?;
    let exit = if sol.converged { EXIT_OK } else { EXIT_NONCONVERGENCE };
    Ok(Outcome { exit, summary, artifacts: Vec::new() })
}

fn solve_limit_cmd(run: &mut Run, regime: Option<RegimeArg>) -> Result<Outcome> {
    let mut cfg = run.cfg.clone();
    if let Some(k) = regime {
        if k != cfg.regime.kind {
            cfg.regime.kind = k;
            if k != RegimeArg::Lplus {
                cfg.regime.ell = None;
            }
            cfg.validate()?;
        }
    }
    let rc = cfg.regime_config()?;
    let w = cfg.density()?;
    let opts = cfg.solve_options();
    let lm = build_limit_mesh(&cfg.geometry, &cfg.mesh)?;
    let sol = run.timed("solve_limit", || solve_limit(&rc, &w, &cfg.forces, &lm, &opts))?;
    let za: Vec<Vec3> = lm.interval.nodes.iter().map(|z| Vec3::new(0.0, 0.0, *z)).collect();
    let xb: Vec<Vec3> = lm.tri.nodes.iter().map(|p| Vec3::new(p[0], p[1], 0.0)).collect();
    write_node_csv(&run.path("string_nodes.csv"), &za, &sol.state.psi_a)?;
    write_node_csv(&run.path("membrane_nodes.csv"), &xb, &sol.state.psi_b)?;
    let summary = json!({
        "regime": rc.regime,
        "p": rc.p,
        "junction": rc.p > 2.0,
        "energy": sol.energy,
        "converged": sol.converged,
        "sweeps": sol.sweeps,
        "history": sol.history,
        "psi_a_bottom": sol.state.psi_a[0].as_slice(),
        "psi_b_origin": sol.state.psi_b[lm.tri.origin].as_slice(),
    });
    run.write_json("limit_solution.json", &summary)?;
    let exit = if sol.converged { EXIT_OK } else { EXIT_NONCONVERGENCE };
    Ok(Outcome { exit, summary, artifacts: Vec::new() })
}

fn gamma_study_cmd(run: &mut Run) -> Result<Outcome> {
    let cfg = run.cfg;
    let rc = cfg.regime_config()?;
    let w = cfg.density()?;
    let opts = cfg.solve_options();
    let study = run.timed("gamma_study", || run_gamma_study(&rc, &w, &cfg.forces, &cfg.geometry, &cfg.mesh, &opts))?;
    study.report.write_csv(&run.path("gamma_report.csv"))?;
    let summary = study.report.to_json();
    run.write_json("gamma_report.json", &summary)?;
    for (i, (ms, sol)) in study.meshes.iter().zip(&study.solutions).enumerate() {
        let pa: Vec<Vec3> = (0..ms.hex_a.n_nodes()).map(|k| ms.hex_a.coords(k)).collect();
        write_node_csv(&run.path(&format!("tube_nodes_eps{i}.csv")), &pa, &sol.state.psi_a)?;
    }
    let unconverged = study.report.rows.iter().any(|r| !r.converged) || !study.report.limit.converged;
    let exit = if unconverged { EXIT_NONCONVERGENCE } else { EXIT_OK };
    Ok(Outcome { exit, summary, artifacts: Vec::new() })
}

fn envelope_targets(env: &EnvelopeBlock) -> Vec<(String, Mat3, Option<f64>)> {
    let s3 = 3f64.sqrt();
    let mut out: Vec<(String, Mat3, Option<f64>)> =
        env.radii.iter().map(|t| (format!("radius {t}"), Mat3::identity() * (t / s3), Some(*t))).collect();
    for (i, m) in env.matrices.iter().enumerate() {
        out.push((format!("matrix {i}"), Mat3::from_row_slice(m), None));
    }
    out
}

fn envelope_cmd(run: &mut Run) -> Result<Outcome> {
    let cfg = run.cfg;
    let w = cfg.density()?;
    let env = &cfg.envelope;
    let radial = matches!(w.kind, DensityKind::RadialQuartic) && w.c == EnergyDensity::radial_quartic().c;
    let targets = envelope_targets(env);
    let rows = run.timed("envelope", || -> Result<Vec<_>> {
        let mut rows = Vec::new();
        for (i, (label, f, t)) in targets.iter().enumerate() {
            let mut q = EnvelopeQuery::new(w.clone(), *f);
            q.points = env.points;
            q.multistart = env.multistart;
            q.cell_n = env.cell_n;
            q.seed = cfg.seed.wrapping_add(i as u64);
            let cw = convex_envelope(&q)?.value;
            let qcw = cell_qcw(&q)?.value;
            let oracle = match t {
                Some(t) if radial => Some(radial_envelope_oracle(*t)?),
                _ => None,
            };
            rows.push((label.clone(), f.norm(), w.evaluate(f), cw, qcw, oracle));
        }
        Ok(rows)
    })?;
    let path = run.path("envelope_values.csv");
    let mut wr = csv::Writer::from_path(path).map_err(crate::solvers::csv_error)?;
    wr.write_record(["target", "norm", "w", "convex", "cell_qcw", "oracle"]).map_err(crate::solvers::csv_error)?;
    let mut violations = Vec::new();
    let mut oracle_gap: f64 = 0.0;
    for (label, n, wv, cw, qcw, oracle) in &rows {
        let o = oracle.map(|v| v.to_string()).unwrap_or_default();
        wr.write_record([label.clone(), n.to_string(), wv.to_string(), cw.to_string(), qcw.to_string(), o])
            .map_err(crate::solvers::csv_error)?;
        if *cw > qcw + 2e-5 || *qcw > wv + 1e-9 {
            violations.push(label.clone());
        }
        if let Some(o) = oracle {
            oracle_gap = oracle_gap.max((cw - o).abs());
        }
    }
    wr.flush()?;
    let summary = json!({
        "targets": rows.len(),
        "sandwich_violations": violations,
        "max_oracle_gap": if radial { Some(oracle_gap) } else { None },
    });
    run.write_json("envelope_summary.json", &summary)?;
    let exit = if violations.is_empty() && oracle_gap <= 1e-4 { EXIT_OK } else { EXIT_INVARIANT };
    Ok(Outcome { exit, summary, artifacts: Vec::new() })
}

/// One entry of the invariant suite.
#[derive(Clone, Debug, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> InvariantResult {
    match f() {
        Ok((passed, detail)) => InvariantResult { name: name.into(), passed, detail },
        Err(e) => InvariantResult { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

/// Property suite on the configured density, forces, meshes and ε list.
pub fn invariant_suite(cfg: &RunConfig) -> Result<Vec<InvariantResult>> {
    let rc = cfg.regime_config()?;
    let w = cfg.density()?;
    let opts = cfg.solve_options();
    let mut out = Vec::new();
    out.push(check("svd reconstructs matrices", || {
        let worst = sample_matrices(4.0, 60, cfg.seed)
            .iter()
            .map(|m| {
                let (u, s, v) = svd3(m);
                (u * Mat3::from_diagonal(&s) * v.transpose() - m).norm()
            })
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("max residual {worst:e}")))
    }));
    out.push(check("p-growth on sample grid", || {
        let rep = w.check_p_growth(&sample_matrices(5.0, 400, cfg.seed));
        Ok((rep.holds, format!("{} samples, witness {:?}", rep.checked, rep.witness.map(|x| (x.1, x.2, x.3)))))
    }));
    out.push(check("natural state has zero ε-energy", || {
        let zero = ForceSystem::zero();
        let mut worst: f64 = 0.0;
        for i in 0..rc.eps.len() {
            let ef = scale_forces(&zero, &rc, i)?;
            let ms = build_multistructure(&cfg.geometry, &cfg.mesh, ef.r)?;
            worst = worst.max(eps_energy(&ms.identity_state(ef.h), &w, &ef, &ms)?.abs());
        }
        Ok((worst <= 1e-12, format!("max |E_ε| {worst:e}")))
    }));
    out.push(check("natural state has zero limit energy", || {
        let lm = build_limit_mesh(&cfg.geometry, &cfg.mesh)?;
        let env = Envelopes::new(&w, &opts);
        let e = limit_energy(rc.regime, &LimitState::natural(&lm), &ForceSystem::zero(), &lm, &env, opts.quad)?;
        Ok((e.abs() <= 1e-12, format!("E = {e:e}")))
    }));
    out.push(check("work identities", || {
        let mut worst: f64 = 0.0;
        for i in 0..rc.eps.len() {
            let ef = scale_forces(&cfg.forces, &rc, i)?;
            let ms = build_multistructure(&cfg.geometry, &cfg.mesh, ef.r)?;
            let mut s = ms.identity_state(ef.h);
            for (p, x) in s.psi_a.iter_mut().zip(ms.hex_a.sample(|x| *x)) {
                *p += Vec3::new(0.1 * x.z * x.z, 0.05 * x.x * x.z, 0.02 * x.y);
            }
            for (p, x) in s.psi_b.iter_mut().zip(ms.hex_b.sample(|x| *x)) {
                *p += Vec3::new(0.03 * x.y * x.z, -0.02 * x.x, 0.05 * x.x * x.y);
            }
            ms.apply_junction(&mut s);
            let ba: Vec<Mat3x2> = average_bbar_a(&s.psi_a, ef.r, &ms.hex_a);
            let bb = average_bbar_b(&s.psi_b, ef.h, &ms.hex_b);
            let ra = work_a_raw(&ef, &s.psi_a, &ms)?;
            let ea = work_a(&ef, &s.psi_a, &ba, &ms)?;
            let rb = work_b_raw(&ef, &s.psi_b, &ms)?;
            let eb = work_b(&ef, &s.psi_b, &bb, &s.psi_a, &ms)?;
            worst = worst.max((ra - ea).abs() / ra.abs().max(1.0)).max((rb - eb).abs() / rb.abs().max(1.0));
        }
        Ok((worst <= 1e-10, format!("max relative mismatch {worst:e}")))
    }));
    out.push(check("envelope sandwich", || {
        let mut bad = 0;
        let samples = sample_matrices(2.0, 4, cfg.seed);
        for (i, f) in samples.iter().enumerate() {
            let mut q = EnvelopeQuery::new(w.clone(), *f);
            q.seed = cfg.seed.wrapping_add(i as u64);
            let cw = convex_envelope(&q)?.value;
            let qcw = cell_qcw(&q)?.value;
            if cw > qcw + 2e-5 || qcw > w.evaluate(f) + 1e-9 {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of {} samples violate CW ≤ Q*W ≤ W", samples.len())))
    }));
    out.push(check("one-dimensional cross-quasiconvexity", || {
        let m1 = Vec3::new(0.3, -0.2, 1.1);
        let m2 = Vec3::new(-0.1, 0.4, 0.8);
        let b1 = crate::tensor::i_alpha() * 0.9;
        let b2 = crate::tensor::i_alpha() * 1.2;
        let rep = cross_convex_1d_check(&w, (&m1, &b1), (&m2, &b2), 0.4)?;
        let ok = !w.is_convex() || rep.gap >= -1e-10;
        Ok((ok, format!("gap {:e}", rep.gap)))
    }));
    Ok(out)
}

fn check_invariants_cmd(run: &mut Run) -> Result<Outcome> {
    let results = run.timed("invariants", || invariant_suite(run.cfg))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    let summary = json!({ "checks": results, "failed": failed });
    run.write_json("invariants.json", &summary)?;
    for r in &results {
        eprintln!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    Ok(Outcome { exit: if failed == 0 { EXIT_OK } else { EXIT_INVARIANT }, summary, artifacts: Vec::new() })
}

fn capacity_cmd(run: &mut Run) -> Result<Outcome> {
    let cap = &run.cfg.capacity;
    let rows = run.timed("capacity", || -> Result<Vec<_>> {
        cap.cases
            .iter()
            .map(|[p, r]| {
                let (exact, fem) = annulus_p_capacity(*p, *r, cap.resolution)?;
                Ok(json!({ "p": p, "r": r, "closed_form": exact, "fem": fem, "relative_error": (fem - exact).abs() / exact }))
            })
            .collect()
    })?;
    let worst = rows.iter().map(|v| v["relative_error"].as_f64().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let summary = json!({ "cases": rows, "max_relative_error": worst, "tolerance": cap.tolerance });
    run.write_json("capacity.json", &summary)?;
    let exit = if worst <= cap.tolerance { EXIT_OK } else { EXIT_INVARIANT };
    Ok(Outcome { exit, summary, artifacts: Vec::new() })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SolveEps { .. } => "solve-eps",
        Command::SolveLimit { .. } => "solve-limit",
        Command::GammaStudy => "gamma-study",
        Command::Envelope => "envelope",
        Command::CheckInvariants => "check-invariants",
        Command::Capacity => "capacity",
    }
}

/// Hex digest of the configuration bytes (or of the canonical defaults).
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs a subcommand on a validated configuration and writes the manifest.
pub fn run(command: &Command, cfg: &RunConfig, out: &Path, hash: &str, threads: usize) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut run = Run { cfg, out, artifacts: Vec::new(), timings: Vec::new() };
    let mut outcome = match command {
        Command::SolveEps { eps_index } => solve_eps_cmd(&mut run, *eps_index)?,
        Command::SolveLimit { regime } => solve_limit_cmd(&mut run, *regime)?,
        Command::GammaStudy => gamma_study_cmd(&mut run)?,
        Command::Envelope => envelope_cmd(&mut run)?,
        Command::CheckInvariants => check_invariants_cmd(&mut run)?,
        Command::Capacity => capacity_cmd(&mut run)?,
    };
    outcome.artifacts = run.artifacts.clone();
    let timings: serde_json::Map<String, serde_json::Value> =
        run.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let manifest = json!({
        "command": command_name(command),
        "config_hash": hash,
        "seed": cfg.seed,
        "threads": threads,
        "exit_code": outcome.exit,
        "versions": {
            "tubeplate": env!("CARGO_PKG_VERSION"),
            "target_os": std::env::consts::OS,
            "target_arch": std::env::consts::ARCH,
        },
        "timings_seconds": { "phases": timings, "total": start.elapsed().as_secs_f64() },
        "artifacts": outcome.artifacts,
        "config": cfg,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json values serialize") + "\n")?;
    Ok(outcome)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Mesh(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (mut cfg, hash) = match &cli.config {
        Some(path) => {
            let bytes = match std::fs::read(path) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("error: cannot read configuration {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            };
            let text = String::from_utf8_lossy(&bytes);
            match parse_config_str(&text) {
                Ok(c) => (c, config_hash(&bytes)),
                Err(e) => {
                    eprintln!("configuration rejected:\n{}", err_text(e));
                    return EXIT_CONFIG;
                }
            }
        }
        None => {
            let c = RunConfig::default();
            let canon = toml::to_string(&c).unwrap_or_default();
            let h = config_hash(canon.as_bytes());
            (c, h)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    match run(&cli.command, &cfg, &out, &hash, threads) {
        Ok(o) => {
            println!("{}", serde_json::to_string(&o.summary).unwrap_or_default());
            o.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
