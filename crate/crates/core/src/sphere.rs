//! Closed-form Riemannian operations on the unit hypersphere.
//!
//! Two flavors of the logarithmic map exist. [`log_map`] is the accurate
//! pointwise map used for geometry: it takes the angle from `atan2` of the
//! tangent and normal components and refuses near-antipodal pairs.
//! [`LayerGeometry::log_map`] is the message-passing variant: the cosine is
//! clamped to `[-1 + 1e-7, 1 - 1e-7]` and the same clamped value drives both
//! attention and the log map, matching the differentiable layer exactly.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autodiff::theta_over_sin;
use crate::error::{Error, Result};

/// Cosines are clamped into `[-COS_CLAMP, COS_CLAMP]` before `arccos`.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Pairs with `x·y` below `-1 + ANTIPODAL_TOL` have no unique geodesic.
pub const ANTIPODAL_TOL: f64 = 1e-6;

/// Vectors with norm below this cannot be projected.
pub const MIN_NORM: f64 = 1e-12;

/// Tangent vectors shorter than this are treated as zero by [`exp_map`].
pub const MIN_TANGENT: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A point on the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePoint(Vec<f64>);

impl SpherePoint {
    /// Wraps coordinates that are already unit norm within `1e-6`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("point has norm {n}, expected 1")));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A tangent vector at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub direction: Vec<f64>,
}

impl TangentVector {
    pub fn norm(&self) -> f64 {
        norm(&self.direction)
    }
}

/// `v / ‖v‖`.
pub fn project_to_sphere(v: &[f64]) -> Result<SpherePoint> {
    let n = norm(v);
    if !(n >= MIN_NORM) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot project vector of norm {n} onto the sphere"
        )));
    }
    Ok(SpherePoint(v.iter().map(|x| x / n).collect()))
}

pub fn clamped_cos(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y).clamp(-COS_CLAMP, COS_CLAMP)
}

/// `arccos` of the clamped dot product, in `[0, π]`.
pub fn geodesic_distance(x: &SpherePoint, y: &SpherePoint) -> f64 {
    clamped_cos(&x.0, &y.0).acos()
}

/// Tangent vector at `x` pointing along the minimizing geodesic to `y`
/// with length equal to the arc length. Fails on near-antipodal pairs.
pub fn log_map(x: &SpherePoint, y: &SpherePoint) -> Result<TangentVector> {
    check_dims(x, y)?;
    let c = dot(&x.0, &y.0);
    if c < -1.0 + ANTIPODAL_TOL {
        return Err(Error::Antipodal { dot: c });
    }
    Ok(TangentVector {
        base: x.clone(),
        direction: log_direction(&x.0, &y.0, c),
    })
}

fn log_direction(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    if x == y {
        return vec![0.0; x.len()];
    }
    // w = y - (x·y) x, with one refinement pass to remove the residual
    // component along x.
    let mut w: Vec<f64> = y.iter().zip(x).map(|(yi, xi)| yi - c * xi).collect();
    let along = dot(&w, x);
    w.iter_mut().zip(x).for_each(|(wi, xi)| *wi -= along * xi);
    let s = norm(&w);
    let theta = s.atan2(c);
    // θ / sin θ with sin θ = ‖w‖.
    let scale = if theta < 1e-4 {
        1.0 + theta * theta / 6.0
    } else {
        theta / s
    };
    w.iter().map(|wi| scale * wi).collect()
}

fn check_dims(x: &SpherePoint, y: &SpherePoint) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Follows the geodesic from `x` along `alpha * u`. The result is
/// renormalized to unit length.
pub fn exp_map(x: &SpherePoint, u: &[f64], alpha: f64) -> SpherePoint {
    SpherePoint(exp_map_raw(&x.0, u, alpha))
}

pub(crate) fn exp_map_raw(x: &[f64], u: &[f64], alpha: f64) -> Vec<f64> {
    let un = norm(u);
    if un < MIN_TANGENT {
        return x.to_vec();
    }
    let (s, c) = (alpha * un).sin_cos();
    let mut out: Vec<f64> = x.iter().zip(u).map(|(xi, ui)| c * xi + s * ui / un).collect();
    let n = norm(&out);
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Geometry used inside message passing. Antipodal pairs are clamped and
/// counted instead of failing.
#[derive(Debug, Default)]
pub struct LayerGeometry {
    antipodal: AtomicUsize,
}

impl LayerGeometry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn antipodal_count(&self) -> usize {
        self.antipodal.load(Ordering::Relaxed)
    }

    /// Log map with the clamped cosine `c = clamp(x·y)`:
    /// `(θ / sin θ)(y - c x)`, `θ = arccos c`. Returns the cosine too, since
    /// attention uses the same value. `same_node` forces a zero tangent.
    pub fn log_map(&self, x: &[f64], y: &[f64], same_node: bool) -> (Vec<f64>, f64) {
        let raw = dot(x, y);
        if raw < -1.0 + ANTIPODAL_TOL {
            self.antipodal.fetch_add(1, Ordering::Relaxed);
        }
        let c = raw.clamp(-COS_CLAMP, COS_CLAMP);
        if same_node {
            return (vec![0.0; x.len()], c);
        }
        let scale = theta_over_sin(c.acos());
        let v = y.iter().zip(x).map(|(yi, xi)| scale * (yi - c * xi)).collect();
        (v, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn pt(v: &[f64]) -> SpherePoint {
        SpherePoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_sphere(&[3.0, 4.0]).unwrap().coords(), &[0.6, 0.8]);
        let u = [0.6, 0.8];
        let p = project_to_sphere(&u).unwrap();
        for (a, b) in p.coords().iter().zip(u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(project_to_sphere(&[1e-30, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn distance_examples() {
        let x = pt(&[1.0, 0.0]);
        assert!(geodesic_distance(&x, &x) <= 4.5e-4);
        assert!((geodesic_distance(&x, &pt(&[0.0, 1.0])) - FRAC_PI_2).abs() < 1e-15);
        let anti = geodesic_distance(&x, &pt(&[-1.0, 0.0]));
        assert!((anti - std::f64::consts::PI).abs() < 5e-4);
    }

    #[test]
    fn log_map_examples() {
        let x = pt(&[1.0, 0.0]);
        assert_eq!(log_map(&x, &x).unwrap().direction, vec![0.0, 0.0]);

        let v = log_map(&x, &pt(&[0.0, 1.0])).unwrap().direction;
        assert!(v[0].abs() < 1e-15 && (v[1] - FRAC_PI_2).abs() < 1e-15);

        let v = log_map(&x, &pt(&[0.3f64.cos(), 0.3f64.sin()])).unwrap().direction;
        assert!(v[0].abs() < 1e-9 && (v[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn near_antipodal_is_rejected_in_strict_mode() {
        let x = pt(&[1.0, 0.0]);
        let y = project_to_sphere(&[-1.0, 1e-9]).unwrap();
        assert!(matches!(log_map(&x, &y), Err(Error::Antipodal { .. })));

        let geo = LayerGeometry::new();
        let (v, c) = geo.log_map(x.coords(), y.coords(), false);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(c, -COS_CLAMP);
        assert_eq!(geo.antipodal_count(), 1);
    }

    #[test]
    fn exp_map_examples() {
        let x = pt(&[1.0, 0.0]);
        assert_eq!(exp_map(&x, &[0.0, 0.0], 3.0), x);
        let y = exp_map(&x, &[0.0, FRAC_PI_2], 1.0);
        assert!(y.coords()[0].abs() < 1e-9 && (y.coords()[1] - 1.0).abs() < 1e-9);

        let target = pt(&[0.6, 0.8]);
        let back = exp_map(&x, &log_map(&x, &target).unwrap().direction, 1.0);
        for (a, b) in back.coords().iter().zip(target.coords()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_log_map_self_is_zero() {
        let geo = LayerGeometry::new();
        let (v, c) = geo.log_map(&[1.0, 0.0], &[1.0, 0.0], true);
        assert_eq!(v, vec![0.0, 0.0]);
        assert_eq!(c, COS_CLAMP);
    }

    fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("non-zero", |v| norm(v) > 1e-3)
            .prop_map(|v| {
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        prop::sample::select(vec![2usize, 8, 64])
            .prop_flat_map(|d| (unit_vec(d), unit_vec(d)))
            .prop_filter("not antipodal", |(x, y)| dot(x, y) > -1.0 + ANTIPODAL_TOL)
    }

    proptest! {
        #[test]
        fn round_trip((x, y) in pair()) {
            let (xp, yp) = (SpherePoint(x), SpherePoint(y));
            let v = log_map(&xp, &yp).unwrap();
            let back = exp_map(&xp, &v.direction, 1.0);
            let err: f64 = back.coords().iter().zip(yp.coords()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err < 1e-6);
        }

        #[test]
        fn tangency_and_length((x, y) in pair()) {
            let (xp, yp) = (SpherePoint(x), SpherePoint(y));
            let v = log_map(&xp, &yp).unwrap();
            let len = v.norm();
            prop_assert!(dot(xp.coords(), &v.direction).abs() < 1e-8 * len.max(1.0));
            // Outside the clamp band the clamped distance is exact.
            if dot(xp.coords(), yp.coords()).abs() < COS_CLAMP {
                prop_assert!((len - geodesic_distance(&xp, &yp)).abs() < 1e-8);
            }
        }

        #[test]
        fn exp_map_stays_on_sphere(x in unit_vec(8), u in prop::collection::vec(-3.0f64..3.0, 8), alpha in 0.0f64..4.0) {
            let along = dot(&x, &u);
            let tangent: Vec<f64> = u.iter().zip(&x).map(|(ui, xi)| ui - along * xi).collect();
            // Before renormalization.
            let un = norm(&tangent);
            if un > MIN_TANGENT {
                let (s, c) = (alpha * un).sin_cos();
                let raw: Vec<f64> = x.iter().zip(&tangent).map(|(xi, ui)| c * xi + s * ui / un).collect();
                prop_assert!((norm(&raw) - 1.0).abs() < 1e-9);
            }
            let out = exp_map(&SpherePoint(x), &tangent, alpha);
            prop_assert!((norm(out.coords()) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn distance_is_symmetric((x, y) in pair()) {
            let (xp, yp) = (SpherePoint(x), SpherePoint(y));
            prop_assert_eq!(geodesic_distance(&xp, &yp), geodesic_distance(&yp, &xp));
        }
    }
}
