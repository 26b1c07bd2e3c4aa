use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{DeformationState, HexMesh, MultiStructureMesh, GAUSS2};
use crate::tensor::{project_rotation, rotation_from_vector, Mat3, Vec3, WellSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// Comparison of `‖D − M‖ᵖ_{Lᵖ}` for the best constant `M ∈ 𝒦` with
/// `‖dist(D, 𝒦)‖ᵖ_{Lᵖ}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RigidityReport {
    pub m_best: Mat3,
    /// Scaling `δ` of the well containing `M`.
    pub well: f64,
    pub lhs: f64,
    pub rhs_distance: f64,
    /// `lhs / rhs_distance` (0 when both vanish).
    pub ratio: f64,
    /// `ratio · scaleᵖ`, bounded by the unknown constant when the estimate holds.
    pub scaled_ratio: f64,
}

/// Samples `(weight, D)`; 2×2 Gauss points across the first two directions
/// and the cell midpoint along the third, where difference quotients are
/// second-order accurate.
fn samples(m: &HexMesh, psi: &[Vec3], s: &Vec3) -> Vec<(f64, Mat3)> {
    let mut out = Vec::with_capacity(4 * m.n_cells());
    let scale = Mat3::from_diagonal(s);
    for c in 0..m.n_cells() {
        let w = m.cell_volume(c) / 4.0;
        for a in GAUSS2 {
            for b in GAUSS2 {
                out.push((w, m.gradient(psi, c, [a, b, 0.5]) * scale));
            }
        }
    }
    out
}

fn lp_sum(d: &[(f64, Mat3)], m: &Mat3, p: f64) -> f64 {
    d.iter().map(|(w, x)| w * (x - m).norm().powf(p)).sum()
}

/// Best constant matrix on the well `δ·SO(3)`: projection of the average,
/// then iteratively reweighted projections for `p ≠ 2`.
fn best_on_well(d: &[(f64, Mat3)], delta: f64, p: f64) -> (Mat3, f64) {
    let total: f64 = d.iter().map(|x| x.0).sum();
    let avg = d.iter().fold(Mat3::zeros(), |a, (w, x)| a + x * *w) / total;
    let mut m = project_rotation(&(avg / delta)) * delta;
    let mut best = (m, lp_sum(d, &m, p));
    if (p - 2.0).abs() > 1e-14 {
        for _ in 0..60 {
            let mut acc = Mat3::zeros();
            let mut wsum = 0.0;
            for (w, x) in d {
                let r = (x - m).norm().max(1e-12);
                let wt = w * r.powf(p - 2.0);
                acc += x * wt;
                wsum += wt;
            }
            m = project_rotation(&(acc / (wsum * delta))) * delta;
            let v = lp_sum(d, &m, p);
            if v < best.1 - 1e-15 * best.1.abs() {
                best = (m, v);
            } else {
                break;
            }
        }
    }
    best
}

/// Quantitative rigidity diagnostic on one component: `D = (scale⁻¹∇_αψᵃ|∇₃ψᵃ)`
/// for side `a`, `D = (∇_αψᵇ|scale⁻¹∇₃ψᵇ)` for side `b`.
pub fn rigidity_check(state: &DeformationState, ms: &MultiStructureMesh, k: &WellSet, scale: f64, side: Side, p: f64) -> Result<RigidityReport> {
    k.validate()?;
    if !(scale > 0.0) || !(p > 1.0 && p.is_finite()) {
        return Err(Error::Config(format!("rigidity check needs scale > 0 and p > 1, got {scale}, {p}")));
    }
    let (m, psi, s) = match side {
        Side::A => (&ms.hex_a, &state.psi_a, Vec3::new(1.0 / scale, 1.0 / scale, 1.0)),
        Side::B => (&ms.hex_b, &state.psi_b, Vec3::new(1.0, 1.0, 1.0 / scale)),
    };
    if psi.len() != m.n_nodes() {
        return Err(Error::Mismatch("state does not match the hex mesh".into()));
    }
    let d = samples(m, psi, &s);
    let (mut m_best, mut well, mut lhs) = (Mat3::identity(), 1.0, f64::INFINITY);
    for delta in k.scalings() {
        let (mm, v) = best_on_well(&d, delta, p);
        if v < lhs {
            (m_best, well, lhs) = (mm, delta, v);
        }
    }
    let rhs: f64 = d.iter().map(|(w, x)| w * k.nearest(x).1.powf(p)).sum();
    let ratio = if lhs <= 0.0 {
        0.0
    } else if rhs <= 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    };
    Ok(RigidityReport { m_best, well, lhs, rhs_distance: rhs, ratio, scaled_ratio: ratio * scale.powf(p) })
}

/// Bent tube `ψᵃ = Φ(x₃) + r x_α R(x₃)e_α`, `Φ' = R e₃`, with `R(x₃)` the
/// rotation about `e₁` by `a·sin(2πx₃/L)`; the plate is left at the
/// clamped identity. The scaled gradient stays within `O(r)` of `SO(3)`
/// while deviating by `O(a)` from every constant rotation.
pub fn bent_rod_state(ms: &MultiStructureMesh, amplitude: f64, h: f64) -> DeformationState {
    let l = ms.geometry.l;
    let r = ms.r_eps;
    let rot = |z: f64| rotation_from_vector(&(Vec3::x() * (amplitude * (std::f64::consts::TAU * z / l).sin())));
    let zs = &ms.hex_a.z;
    // Φ at the node levels by composite Simpson rule on every interval
    let mut phi = vec![Vec3::zeros(); zs.len()];
    for k in 1..zs.len() {
        let (a, b) = (zs[k - 1], zs[k]);
        let e3 = |z: f64| rot(z) * Vec3::z();
        let n = 16;
        let hh = (b - a) / n as f64;
        let mut acc = e3(a) + e3(b);
        for i in 1..n {
            acc += e3(a + i as f64 * hh) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        phi[k] = phi[k - 1] + acc * (hh / 3.0);
    }
    let (nx, ny, _) = ms.hex_a.dims();
    let mut psi_a = vec![Vec3::zeros(); ms.hex_a.n_nodes()];
    for (k, z) in zs.iter().enumerate() {
        let rk = rot(*z);
        for j in 0..ny {
            for i in 0..nx {
                let x = ms.hex_a.x[i];
                let y = ms.hex_a.y[j];
                psi_a[ms.hex_a.node(i, j, k)] = phi[k] + (rk * Vec3::new(x, y, 0.0)) * r;
            }
        }
    }
    DeformationState { psi_a, psi_b: ms.identity_state(h).psi_b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_multistructure, Geometry, Resolution};

    fn ms(r: f64, nz: usize) -> MultiStructureMesh {
        let res = Resolution { na: 4, nz, nb: 4, nh: 2, interval: 8, tri: 4, tri_grading: 1.0 };
        build_multistructure(&Geometry::default(), &res, r).unwrap()
    }

    #[test]
    fn identity_state_is_exactly_rigid() {
        let m = ms(0.5, 8);
        let s = m.identity_state(0.3);
        for (side, scale) in [(Side::A, 0.5), (Side::B, 0.3)] {
            let rep = rigidity_check(&s, &m, &WellSet::double(1.3).unwrap(), scale, side, 2.0).unwrap();
            assert!(rep.lhs < 1e-24 && rep.rhs_distance < 1e-24, "{rep:?}");
            assert!((rep.m_best - Mat3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn smooth_perturbation_ratio_is_stable_under_refinement() {
        let ratio = |nz: usize| {
            let m = ms(0.5, nz);
            let mut s = m.identity_state(0.3);
            for (p, x) in s.psi_a.iter_mut().zip(m.hex_a.sample(|x| *x)) {
                *p += Vec3::new(0.02 * (3.0 * x.z).sin(), 0.01 * x.x * x.z, 0.03 * x.z * x.z);
            }
            rigidity_check(&s, &m, &WellSet::SingleWell, 0.5, Side::A, 2.0).unwrap().ratio
        };
        let (a, b) = (ratio(16), ratio(32));
        assert!(a.is_finite() && b.is_finite());
        assert!((a - b).abs() < 0.1 * a, "{a} vs {b}");
    }

    #[test]
    fn bent_rod_ratio_grows_like_inverse_square() {
        let ratio = |r: f64| {
            let m = ms(r, 64);
            let s = bent_rod_state(&m, 0.5, 0.3);
            rigidity_check(&s, &m, &WellSet::double(1.3).unwrap(), r, Side::A, 2.0).unwrap().ratio
        };
        let (a, b) = (ratio(0.25), ratio(0.125));
        assert!(b / a > 3.0, "{a} {b}");
    }
}
