//! Fixed-size linear algebra on 3×3 matrices: column splitting, SVD with
//! proper rotations, nearest-rotation projection and distances to the wells.

use nalgebra::{Matrix3, Matrix3x2, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Mat3x2 = Matrix3x2<f64>;
pub type Vec3 = Vector3<f64>;

/// The in-plane part `I_α` of the identity.
pub fn i_alpha() -> Mat3x2 {
    Mat3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

/// `(M_α | M_3)`.
pub fn join(m_alpha: &Mat3x2, m3: &Vec3) -> Mat3 {
    Mat3::from_columns(&[m_alpha.column(0).into(), m_alpha.column(1).into(), *m3])
}

/// First two columns `M_α`.
pub fn alpha(m: &Mat3) -> Mat3x2 {
    m.fixed_columns::<2>(0).into()
}

/// Third column `M_3`.
pub fn col3(m: &Mat3) -> Vec3 {
    m.column(2).into()
}

/// Frobenius norm `|M| = sqrt(trace(MᵀM))`.
pub fn fro(m: &Mat3) -> f64 {
    m.norm()
}

/// Singular value decomposition `M = U·diag(σ)·Vᵀ` with `det U = det V = +1`.
///
/// `σ` is sorted by decreasing magnitude; when `det M < 0` the last entry
/// carries the sign.
pub fn svd3(m: &Mat3) -> (Mat3, Vec3, Mat3) {
    let svd = nalgebra::SVD::try_new(*m, true, true, f64::EPSILON, 0)
        .expect("3x3 svd converges");
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v requested");
    let mut s = svd.singular_values;

    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (u0, vt0, s0) = (u, v_t, s);
    for (k, &j) in idx.iter().enumerate() {
        u.set_column(k, &u0.column(j));
        v_t.set_row(k, &vt0.row(j));
        s[k] = s0[j];
    }
    let mut v = v_t.transpose();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
        s[2] = -s[2];
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
        s[2] = -s[2];
    }
    (u, s, v)
}

/// Nearest point of `SO(3)` to `M` in the Frobenius norm.
pub fn project_rotation(m: &Mat3) -> Mat3 {
    let (u, _, v) = svd3(m);
    let d = (u * v.transpose()).determinant().signum();
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v.transpose()
}

/// The set of wells `𝒦`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WellSet {
    /// `SO(3)`.
    SingleWell,
    /// `SO(3) ∪ SO(3)·δI`.
    DoubleWell { delta: f64 },
}

impl WellSet {
    pub const DEFAULT_DELTA: f64 = 1.3;

    pub fn double(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) || (delta - 1.0).abs() < 1e-12 {
            return Err(Error::Config(format!(
                "second well must be δI with δ > 0 and δ ≠ 1 (got δ = {delta})"
            )));
        }
        Ok(WellSet::DoubleWell { delta })
    }

    /// Builds the double well `SO(3) ∪ SO(3)A`; only conformal `A = δI` is supported.
    pub fn from_matrix(a: &Mat3) -> Result<Self> {
        let delta = a.trace() / 3.0;
        let off = (a - Mat3::identity() * delta).norm();
        if off > 1e-12 * (1.0 + a.norm()) {
            return Err(Error::Config(
                "only conformal second wells A = δI are supported".into(),
            ));
        }
        Self::double(delta)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WellSet::SingleWell => Ok(()),
            WellSet::DoubleWell { delta } => Self::double(delta).map(|_| ()),
        }
    }

    /// Nearest well element together with its distance.
    pub fn nearest(&self, m: &Mat3) -> (Mat3, f64) {
        let r = project_rotation(m);
        let d1 = (m - r).norm();
        match *self {
            WellSet::SingleWell => (r, d1),
            WellSet::DoubleWell { delta } => {
                let d2 = (m - r * delta).norm();
                if d2 < d1 {
                    (r * delta, d2)
                } else {
                    (r, d1)
                }
            }
        }
    }

    /// Scalings `δ` of the rotation wells (1 for `SO(3)`).
    pub fn scalings(&self) -> Vec<f64> {
        match *self {
            WellSet::SingleWell => vec![1.0],
            WellSet::DoubleWell { delta } => vec![1.0, delta],
        }
    }
}

/// `distᵖ(M, 𝒦)`.
pub fn dist_to_wells(m: &Mat3, k: &WellSet, p: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::Config(format!("exponent p must lie in (1, ∞), got {p}")));
    }
    k.validate()?;
    Ok(k.nearest(m).1.powf(p))
}

/// Rotation `exp([ω]×)` from an axis-angle vector.
pub fn rotation_from_vector(w: &Vec3) -> Mat3 {
    nalgebra::Rotation3::new(*w).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, scale: f64) -> Mat3 {
        Mat3::from_fn(|_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let w = Vec3::from_fn(|_, _| std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0));
        rotation_from_vector(&w)
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let (u, s, v) = svd3(&Mat3::identity());
        assert!((u * v.transpose() - Mat3::identity()).norm() < 1e-14);
        assert!((s - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-14);
        let d = Mat3::from_diagonal(&Vec3::new(3.0, 2.0, 1.0));
        let (u, s, v) = svd3(&d);
        assert!((s - Vec3::new(3.0, 2.0, 1.0)).norm() < 1e-14);
        assert!((u - Mat3::identity()).norm() < 1e-12);
        assert!((v - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = random_mat(&mut rng, 2.0);
            let (u, s, v) = svd3(&m);
            assert!((u.determinant() - 1.0).abs() < 1e-12);
            assert!((v.determinant() - 1.0).abs() < 1e-12);
            assert!(s[0] >= s[1] && s[1] >= s[2].abs() - 1e-15);
            let rec = u * Mat3::from_diagonal(&s) * v.transpose();
            assert!((rec - m).norm() < 1e-10);
        }
    }

    #[test]
    fn svd_folds_negative_determinant() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 2.0, -3.0));
        let (u, s, v) = svd3(&m);
        assert!(s[2] < 0.0);
        assert!((u * Mat3::from_diagonal(&s) * v.transpose() - m).norm() < 1e-12);
    }

    #[test]
    fn svd_rank_deficient() {
        let m = Vec3::new(1.0, 2.0, 3.0) * Vec3::new(0.5, -1.0, 2.0).transpose();
        let (u, s, v) = svd3(&m);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
        assert!((u * Mat3::from_diagonal(&s) * v.transpose() - m).norm() < 1e-12);
    }

    #[test]
    fn projection_trivial_cases() {
        assert!((project_rotation(&Mat3::identity()) - Mat3::identity()).norm() < 1e-14);
        assert!((project_rotation(&(Mat3::identity() * 2.0)) - Mat3::identity()).norm() < 1e-14);
    }

    #[test]
    fn projection_beats_sampled_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let m = random_mat(&mut rng, 1.5);
            let r = project_rotation(&m);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
            let best = (m - r).norm();
            for _ in 0..1000 {
                let q = random_rotation(&mut rng);
                assert!(best <= (m - q).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn distance_on_wells_is_zero() {
        assert_eq!(dist_to_wells(&Mat3::identity(), &WellSet::SingleWell, 2.0).unwrap(), 0.0);
        let k = WellSet::double(1.3).unwrap();
        assert!(dist_to_wells(&(Mat3::identity() * 1.3), &k, 2.0).unwrap() < 1e-24);
    }

    #[test]
    fn distance_matches_sampled_minimum() {
        let m = Mat3::from_diagonal(&Vec3::new(1.5, 1.0, 1.0));
        let d = dist_to_wells(&m, &WellSet::SingleWell, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut brute = f64::INFINITY;
        for _ in 0..10_000 {
            // small rotations cluster near the optimum
            let w = Vec3::from_fn(|_, _| 0.3 * (2.0 * rng.random::<f64>() - 1.0));
            brute = brute.min((m - rotation_from_vector(&w)).norm_squared());
        }
        assert!(d <= brute + 1e-12);
        assert!((d - brute).abs() < 1e-3);
        assert!((d - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_conformal_second_well() {
        let a = Mat3::from_diagonal(&Vec3::new(1.0, 1.2, 1.0));
        assert!(WellSet::from_matrix(&a).is_err());
        assert!(WellSet::from_matrix(&(Mat3::identity() * 1.3)).is_ok());
        assert!(WellSet::double(1.0).is_err());
        assert!(dist_to_wells(&Mat3::identity(), &WellSet::DoubleWell { delta: -2.0 }, 2.0).is_err());
    }

    #[test]
    fn column_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mat(&mut rng, 1.0);
        assert_eq!(join(&alpha(&m), &col3(&m)), m);
    }
}
