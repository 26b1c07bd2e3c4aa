//! Stored-energy densities with p-growth and their anisotropically scaled forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{alpha, col3, join, Mat3, WellSet};

/// Anything that can be evaluated as a density on 3×3 matrices.
pub trait Density: Sync {
    fn value(&self, f: &Mat3) -> f64;
    fn value_grad(&self, f: &Mat3) -> (f64, Mat3);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityKind {
    /// `(|F|² − 1)²`.
    RadialQuartic,
    /// `distᵖ(F, 𝒦) / C`.
    PWellDist,
    /// `|F − I|²`.
    QuadraticConvex,
    /// Piecewise-linear radial profile `W(F) = w(|F|)`, continued by `w_N (t/t_N)ᵖ`.
    Tabulated { radii: Vec<f64>, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyDensity {
    pub kind: DensityKind,
    pub p: f64,
    pub c: f64,
    pub wells: Option<WellSet>,
}

/// Outcome of [`EnergyDensity::check_p_growth`].
#[derive(Clone, Debug)]
pub struct GrowthReport {
    pub holds: bool,
    pub checked: usize,
    /// First sample violating the bounds, with `(W, lower, upper)`.
    pub witness: Option<(Mat3, f64, f64, f64)>,
}

impl EnergyDensity {
    pub fn radial_quartic() -> Self {
        Self { kind: DensityKind::RadialQuartic, p: 4.0, c: 4.0, wells: None }
    }

    pub fn quadratic_convex() -> Self {
        Self { kind: DensityKind::QuadraticConvex, p: 2.0, c: 5.0, wells: None }
    }

    /// `distᵖ(·, 𝒦)/C` with the least integer `C` for which the two-sided
    /// growth bound holds on `|ξ| ≤ 5`.
    pub fn p_well(p: f64, wells: WellSet) -> Result<Self> {
        let c = default_well_constant(p, &wells);
        Self::p_well_with_constant(p, c, wells)
    }

    pub fn p_well_with_constant(p: f64, c: f64, wells: WellSet) -> Result<Self> {
        let w = Self { kind: DensityKind::PWellDist, p, c, wells: Some(wells) };
        w.validate()?;
        Ok(w)
    }

    pub fn tabulated(radii: Vec<f64>, values: Vec<f64>, p: f64, c: f64) -> Result<Self> {
        let w = Self { kind: DensityKind::Tabulated { radii, values }, p, c, wells: None };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("exponent p must lie in (1, ∞), got {}", self.p)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("growth constant must be positive, got {}", self.c)));
        }
        match &self.kind {
            DensityKind::RadialQuartic if self.p != 4.0 => {
                Err(Error::Config("radial quartic density has p = 4".into()))
            }
            DensityKind::PWellDist => match &self.wells {
                Some(k) => k.validate(),
                None => Err(Error::Config("p-well density needs a well set".into())),
            },
            DensityKind::Tabulated { radii, values } => {
                if radii.len() < 2 || radii.len() != values.len() {
                    return Err(Error::Config("tabulated profile needs ≥ 2 matching points".into()));
                }
                if radii[0] != 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("tabulated radii must start at 0 and increase".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Conjugate exponent `q = p/(p − 1)`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Whether the density is known to be convex, so every envelope equals it.
    pub fn is_convex(&self) -> bool {
        matches!(self.kind, DensityKind::QuadraticConvex)
    }

    /// Whether `W(RF) = W(F)` for every rotation `R`.
    pub fn is_frame_indifferent(&self) -> bool {
        !matches!(self.kind, DensityKind::QuadraticConvex)
    }

    pub fn evaluate(&self, f: &Mat3) -> f64 {
        match &self.kind {
            DensityKind::RadialQuartic => {
                let s = f.norm_squared() - 1.0;
                s * s
            }
            DensityKind::QuadraticConvex => (f - Mat3::identity()).norm_squared(),
            DensityKind::PWellDist => {
                let k = self.wells.as_ref().expect("validated");
                k.nearest(f).1.powf(self.p) / self.c
            }
            DensityKind::Tabulated { radii, values } => tabulated_profile(radii, values, self.p, f.norm()).0,
        }
    }

    /// Gradient; at non-smooth points an element of the generalized gradient
    /// (the first nearest well is selected when equidistant).
    pub fn gradient(&self, f: &Mat3) -> Mat3 {
        self.eval_grad(f).1
    }

    pub fn eval_grad(&self, f: &Mat3) -> (f64, Mat3) {
        match &self.kind {
            DensityKind::RadialQuartic => {
                let s = f.norm_squared() - 1.0;
                (s * s, f * (4.0 * s))
            }
            DensityKind::QuadraticConvex => {
                let d = f - Mat3::identity();
                (d.norm_squared(), d * 2.0)
            }
            DensityKind::PWellDist => {
                let k = self.wells.as_ref().expect("validated");
                let (m, d) = k.nearest(f);
                if d == 0.0 {
                    return (0.0, Mat3::zeros());
                }
                let v = d.powf(self.p) / self.c;
                (v, (f - m) * (self.p * d.powf(self.p - 2.0) / self.c))
            }
            DensityKind::Tabulated { .. } => (self.evaluate(f), finite_difference_gradient(|x| self.evaluate(x), f)),
        }
    }

    /// Checks `(1/C)|ξ|ᵖ − C ≤ W(ξ) ≤ C(1 + |ξ|ᵖ)` on every sample.
    pub fn check_p_growth(&self, samples: &[Mat3]) -> GrowthReport {
        let mut report = GrowthReport { holds: true, checked: 0, witness: None };
        for xi in samples {
            let n = xi.norm().powf(self.p);
            let lower = n / self.c - self.c;
            let upper = self.c * (1.0 + n);
            let w = self.evaluate(xi);
            report.checked += 1;
            if w < lower - 1e-12 || w > upper + 1e-12 {
                report.holds = false;
                report.witness = Some((*xi, w, lower, upper));
                break;
            }
        }
        report
    }
}

impl Density for EnergyDensity {
    fn value(&self, f: &Mat3) -> f64 {
        self.evaluate(f)
    }
    fn value_grad(&self, f: &Mat3) -> (f64, Mat3) {
        self.eval_grad(f)
    }
}

fn tabulated_profile(radii: &[f64], values: &[f64], p: f64, t: f64) -> (f64, f64) {
    let n = radii.len();
    if t >= radii[n - 1] {
        let s = t / radii[n - 1];
        return (values[n - 1] * s.powf(p), values[n - 1] * p * s.powf(p - 1.0) / radii[n - 1]);
    }
    let i = radii.partition_point(|&r| r <= t).saturating_sub(1).min(n - 2);
    let slope = (values[i + 1] - values[i]) / (radii[i + 1] - radii[i]);
    (values[i] + slope * (t - radii[i]), slope)
}

/// Central differences with step `1e-6·(1 + |F|)`.
pub fn finite_difference_gradient(w: impl Fn(&Mat3) -> f64, f: &Mat3) -> Mat3 {
    let h = 1e-6 * (1.0 + f.norm());
    let mut g = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut fp = *f;
            let mut fm = *f;
            fp[(i, j)] += h;
            fm[(i, j)] -= h;
            g[(i, j)] = (w(&fp) - w(&fm)) / (2.0 * h);
        }
    }
    g
}

fn default_well_constant(p: f64, wells: &WellSet) -> f64 {
    let s3 = 3f64.sqrt();
    let ks = wells.scalings();
    let kmax = ks.iter().cloned().fold(0.0, f64::max);
    let mut need: f64 = 1.0;
    for i in 0..=5000 {
        let t = 5.0 * i as f64 / 5000.0;
        let dmin = ks.iter().map(|k| (t - s3 * k).abs()).fold(f64::INFINITY, f64::min);
        need = need.max(t.powf(p) - dmin.powf(p));
        need = need.max((t + s3 * kmax).powf(p) / (1.0 + t.powf(p)));
    }
    need.sqrt().ceil()
}

/// Seeded random matrices with Frobenius norms spread over `[0, radius]`,
/// followed by 21 multiples of `I` up to norm `radius`.
pub fn sample_matrices(radius: f64, n: usize, seed: u64) -> Vec<Mat3> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let m = Mat3::from_fn(|_, _| 2.0 * rng.random::<f64>() - 1.0);
            m / m.norm() * (radius * i as f64 / (n - 1) as f64)
        })
        .chain((0..=20).map(|i| Mat3::identity() * (radius / 3f64.sqrt() * i as f64 / 20.0)))
        .collect()
}

/// `M ↦ W(a·M_α | b·M_3)`; the scaled densities `W_rᵃ` and `W_hᵇ`.
#[derive(Clone, Debug)]
pub struct ScaledDensity {
    pub base: EnergyDensity,
    pub factor_alpha: f64,
    pub factor_3: f64,
}

impl ScaledDensity {
    pub fn identity(base: EnergyDensity) -> Self {
        Self { base, factor_alpha: 1.0, factor_3: 1.0 }
    }

    /// Further precomposition with `(r⁻¹M_α | M_3)`.
    pub fn rescale_a(&self, r: f64) -> Result<Self> {
        positive(r, "r")?;
        Ok(Self { factor_alpha: self.factor_alpha / r, ..self.clone() })
    }

    /// Further precomposition with `(M_α | h⁻¹M_3)`.
    pub fn rescale_b(&self, h: f64) -> Result<Self> {
        positive(h, "h")?;
        Ok(Self { factor_3: self.factor_3 / h, ..self.clone() })
    }

    pub fn map(&self, m: &Mat3) -> Mat3 {
        join(&(alpha(m) * self.factor_alpha), &(col3(m) * self.factor_3))
    }
}

impl Density for ScaledDensity {
    fn value(&self, m: &Mat3) -> f64 {
        self.base.evaluate(&self.map(m))
    }
    fn value_grad(&self, m: &Mat3) -> (f64, Mat3) {
        let (v, g) = self.base.eval_grad(&self.map(m));
        (v, join(&(alpha(&g) * self.factor_alpha), &(col3(&g) * self.factor_3)))
    }
}

fn positive(x: f64, name: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {x}")))
    }
}

/// `W_rᵃ(M) = W(r⁻¹M_α | M_3)`.
pub fn scaled_density_a(w: &EnergyDensity, r: f64) -> Result<ScaledDensity> {
    ScaledDensity::identity(w.clone()).rescale_a(r)
}

/// `W_hᵇ(M) = W(M_α | h⁻¹M_3)`.
pub fn scaled_density_b(w: &EnergyDensity, h: f64) -> Result<ScaledDensity> {
    ScaledDensity::identity(w.clone()).rescale_b(h)
}
