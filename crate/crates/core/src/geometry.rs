//! Homography algebra.
//!
//! A homography is stored as the eight free entries of a 3x3 matrix whose
//! bottom-right entry is fixed at 1. Pixel centers sit at integer
//! coordinates with the origin top-left, `x` to the right and `y` down. A
//! homography maps template coordinates to input coordinates.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = nalgebra::Point2<f64>;

/// Smallest perspective denominator accepted by [`HomographyParams::apply`].
pub const DENOMINATOR_EPS: f64 = 1e-8;

/// The serialized convention tag.
pub const CONVENTION: &str = "template_to_input_h33_1";

/// `(p11, p12, p13, p21, p22, p23, p31, p32)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyParams {
    pub p: [f64; 8],
}

impl Default for HomographyParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl HomographyParams {
    pub const IDENTITY: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

    pub fn new(p: [f64; 8]) -> Self {
        Self { p }
    }

    pub fn identity() -> Self {
        Self::new(Self::IDENTITY)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::new([sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0])
    }

    /// `identity + delta` placed entrywise; the solver's increment
    /// parameterization.
    pub fn from_delta(delta: &[f64; 8]) -> Self {
        let mut p = Self::IDENTITY;
        for (pi, di) in p.iter_mut().zip(delta) {
            *pi += di;
        }
        Self::new(p)
    }

    /// Difference to identity, the inverse of [`HomographyParams::from_delta`].
    pub fn delta(&self) -> [f64; 8] {
        let mut d = self.p;
        for (di, id) in d.iter_mut().zip(Self::IDENTITY) {
            *di -= id;
        }
        d
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let p = &self.p;
        Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
    }

    /// Normalize a 3x3 matrix so that its bottom-right entry is 1.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() <= 1e-12 {
            return Err(Error::Numeric(format!(
                "homography (3,3) entry {h33:e} cannot be normalized to 1"
            )));
        }
        let n = m / h33;
        let p = [
            n[(0, 0)],
            n[(0, 1)],
            n[(0, 2)],
            n[(1, 0)],
            n[(1, 1)],
            n[(1, 2)],
            n[(2, 0)],
            n[(2, 1)],
        ];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite homography entry".into()));
        }
        Ok(Self::new(p))
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, pt: Point) -> Result<Point> {
        let [p11, p12, p13, p21, p22, p23, p31, p32] = self.p;
        let d = p31 * pt.x + p32 * pt.y + 1.0;
        if d.abs() <= DENOMINATOR_EPS || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "perspective denominator {d:e} at ({}, {})",
                pt.x, pt.y
            )));
        }
        Ok(Point::new(
            (p11 * pt.x + p12 * pt.y + p13) / d,
            (p21 * pt.x + p22 * pt.y + p23) / d,
        ))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &HomographyParams) -> Result<Self> {
        Self::from_matrix(&(self.matrix() * other.matrix()))
    }

    pub fn invert(&self) -> Result<Self> {
        let m = self.matrix();
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= 1e-14 {
            return Err(Error::Singular(format!("homography determinant {det:e}")));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Singular("homography is not invertible".into()))?;
        Self::from_matrix(&inv)
    }

    /// Inverse-compositional update `P ∘ (dP)⁻¹`.
    pub fn ic_update(&self, dp: &HomographyParams) -> Result<Self> {
        self.compose(&dp.invert()?)
    }

    /// Express the homography at a pyramid level whose coordinates are `s`
    /// times the current ones: `S H S⁻¹` with `S = diag(s, s, 1)`.
    pub fn rescale(&self, s: f64) -> Self {
        let mut p = self.p;
        p[2] *= s;
        p[5] *= s;
        p[6] /= s;
        p[7] /= s;
        Self::new(p)
    }
}

/// Four template-rectangle corners, ordered TL, BL, BR, TR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerSet(pub [Point; 4]);

impl CornerSet {
    /// Corners of a `width x height` pixel grid.
    pub fn rectangle(width: usize, height: usize) -> Self {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        CornerSet([
            Point::new(0.0, 0.0),
            Point::new(0.0, h),
            Point::new(w, h),
            Point::new(w, 0.0),
        ])
    }

    pub fn points(&self) -> &[Point; 4] {
        &self.0
    }

    pub fn map(&self, h: &HomographyParams) -> Result<CornerSet> {
        let mut out = self.0;
        for pt in out.iter_mut() {
            *pt = h.apply(*pt)?;
        }
        Ok(CornerSet(out))
    }

    pub fn scaled(&self, s: f64) -> CornerSet {
        CornerSet(self.0.map(|p| Point::new(p.x * s, p.y * s)))
    }
}

fn collinear(a: &Point, b: &Point, c: &Point) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = (b - a).norm() * (c - a).norm();
    cross.abs() <= 1e-9 * scale.max(1e-12)
}

fn check_general_position(points: &[Point; 4], which: &str) -> Result<()> {
    for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
        if collinear(&points[i], &points[j], &points[k]) {
            return Err(Error::Degenerate(format!(
                "{which} corners {i}, {j}, {k} are collinear"
            )));
        }
    }
    Ok(())
}

/// Exact homography through four correspondences, solving the 8x8 linear
/// system of the direct linear transform with `h33 = 1`.
pub fn dlt_from_corners(src: &CornerSet, dst: &CornerSet) -> Result<HomographyParams> {
    check_general_position(&src.0, "source")?;
    check_general_position(&dst.0, "destination")?;

    // Conditioning: center and scale both point sets before solving.
    let (ts, ss) = normalizer(&src.0);
    let (td, sd) = normalizer(&dst.0);
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (s, d)) in src.0.iter().zip(&dst.0).enumerate() {
        let (x, y) = ((s.x - ts.0) * ss, (s.y - ts.1) * ss);
        let (u, v) = ((d.x - td.0) * sd, (d.y - td.1) * sd);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]);
        b[r] = u;
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]);
        b[r + 1] = v;
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("corner system is singular".into()))?;
    let hn = Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0);
    let t_src = Matrix3::new(ss, 0.0, -ss * ts.0, 0.0, ss, -ss * ts.1, 0.0, 0.0, 1.0);
    let t_dst_inv = Matrix3::new(1.0 / sd, 0.0, td.0, 0.0, 1.0 / sd, td.1, 0.0, 0.0, 1.0);
    HomographyParams::from_matrix(&(t_dst_inv * hn * t_src))
}

fn normalizer(points: &[Point; 4]) -> ((f64, f64), f64) {
    let cx = points.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    ((cx, cy), std::f64::consts::SQRT_2 / mean_dist.max(1e-12))
}

/// `∂(x', y') / ∂(p11 .. p32)` at the identity warp.
pub fn warp_jacobian(pt: Point) -> [[f64; 8]; 2] {
    let (x, y) = (pt.x, pt.y);
    [
        [x, y, 1.0, 0.0, 0.0, 0.0, -x * x, -x * y],
        [0.0, 0.0, 0.0, x, y, 1.0, -x * y, -y * y],
    ]
}

/// Mean Euclidean distance between the corners mapped by `p` and by `p_gt`.
pub fn corner_error(p: &HomographyParams, p_gt: &HomographyParams, corners: &CornerSet) -> Result<f64> {
    let mut total = 0.0;
    for c in corners.points() {
        total += (p.apply(*c)? - p_gt.apply(*c)?).norm();
    }
    Ok(total / 4.0)
}

#[derive(Serialize, Deserialize)]
struct HomographyJson {
    p: [f64; 8],
    #[serde(default = "default_convention")]
    convention: String,
}

fn default_convention() -> String {
    CONVENTION.to_string()
}

impl Serialize for HomographyParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        HomographyJson {
            p: self.p,
            convention: CONVENTION.to_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HomographyParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = HomographyJson::deserialize(deserializer)?;
        if raw.convention != CONVENTION {
            return Err(serde::de::Error::custom(format!(
                "unsupported homography convention `{}`, expected `{CONVENTION}`",
                raw.convention
            )));
        }
        Ok(HomographyParams::new(raw.p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_h() -> impl Strategy<Value = HomographyParams> {
        (
            prop::array::uniform4(-0.2f64..0.2),
            prop::array::uniform2(-20.0f64..20.0),
            prop::array::uniform2(-1e-3f64..1e-3),
        )
            .prop_map(|(a, t, q)| {
                HomographyParams::new([1.0 + a[0], a[1], t[0], a[2], 1.0 + a[3], t[1], q[0], q[1]])
            })
    }

    fn point() -> impl Strategy<Value = Point> {
        (-100.0f64..200.0, -100.0f64..200.0).prop_map(|(x, y)| Point::new(x, y))
    }

    fn assert_params_close(a: &HomographyParams, b: &HomographyParams, tol: f64) {
        for i in 0..8 {
            assert!((a.p[i] - b.p[i]).abs() <= tol, "p[{i}]: {} vs {}", a.p[i], b.p[i]);
        }
    }

    #[test]
    fn apply_examples() {
        let id = HomographyParams::identity();
        assert_eq!(id.apply(Point::new(5.0, 7.0)).unwrap(), Point::new(5.0, 7.0));
        let t = HomographyParams::translation(2.0, 0.0);
        assert_eq!(t.apply(Point::new(0.0, 0.0)).unwrap(), Point::new(2.0, 0.0));
        let s = HomographyParams::scaling(2.0, 2.0);
        assert_eq!(s.apply(Point::new(3.0, 4.0)).unwrap(), Point::new(6.0, 8.0));
    }

    #[test]
    fn apply_rejects_vanishing_denominator() {
        let h = HomographyParams::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.1, 0.0]);
        assert!(matches!(h.apply(Point::new(10.0, 3.0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn compose_examples() {
        let a = HomographyParams::new([1.1, 0.1, 3.0, -0.05, 0.9, 2.0, 1e-4, -2e-4]);
        assert_params_close(&a.compose(&HomographyParams::identity()).unwrap(), &a, 1e-15);
        let t = HomographyParams::translation(1.0, 0.0)
            .compose(&HomographyParams::translation(2.0, 0.0))
            .unwrap();
        assert_eq!(t, HomographyParams::translation(3.0, 0.0));
        assert_params_close(
            &a.compose(&a.invert().unwrap()).unwrap(),
            &HomographyParams::identity(),
            1e-6,
        );
    }

    #[test]
    fn compose_rejects_zero_h33() {
        // Row 3 of a times column 3 of b vanishes.
        let a = HomographyParams::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let b = HomographyParams::translation(-1.0, 0.0);
        assert!(matches!(a.compose(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(
            HomographyParams::identity().invert().unwrap(),
            HomographyParams::identity()
        );
        assert_params_close(
            &HomographyParams::translation(3.0, -4.0).invert().unwrap(),
            &HomographyParams::translation(-3.0, 4.0),
            1e-15,
        );
        let singular = HomographyParams::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0]);
        assert!(matches!(singular.invert(), Err(Error::Singular(_))));
    }

    #[test]
    fn ic_update_examples() {
        let p = HomographyParams::new([1.02, 0.01, 4.0, 0.0, 0.98, -2.0, 1e-5, 0.0]);
        assert_params_close(&p.ic_update(&HomographyParams::identity()).unwrap(), &p, 1e-15);
        let r = HomographyParams::identity()
            .ic_update(&HomographyParams::translation(1.0, 0.0))
            .unwrap();
        assert_params_close(&r, &HomographyParams::translation(-1.0, 0.0), 1e-15);
    }

    #[test]
    fn rescale_examples() {
        let h = HomographyParams::new([1.02, 0.01, 4.0, 0.0, 0.98, -2.0, 1e-5, 2e-5]);
        assert_eq!(h.rescale(1.0), h);
        assert_eq!(
            HomographyParams::translation(4.0, 6.0).rescale(0.5),
            HomographyParams::translation(2.0, 3.0)
        );
    }

    #[test]
    fn dlt_examples() {
        let src = CornerSet::rectangle(128, 128);
        let id = dlt_from_corners(&src, &src).unwrap();
        assert_params_close(&id, &HomographyParams::identity(), 1e-12);
        let shifted = CornerSet(src.0.map(|p| Point::new(p.x + 5.0, p.y)));
        let t = dlt_from_corners(&src, &shifted).unwrap();
        assert_params_close(&t, &HomographyParams::translation(5.0, 0.0), 1e-12);
    }

    #[test]
    fn dlt_rejects_collinear() {
        let src = CornerSet::rectangle(10, 10);
        let bad = CornerSet([
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
            Point::new(5.0, 0.0),
        ]);
        assert!(matches!(dlt_from_corners(&src, &bad), Err(Error::Degenerate(_))));
        assert!(matches!(dlt_from_corners(&bad, &src), Err(Error::Degenerate(_))));
    }

    #[test]
    fn warp_jacobian_examples() {
        let j0 = warp_jacobian(Point::new(0.0, 0.0));
        assert_eq!(j0[0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(j0[1], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let j1 = warp_jacobian(Point::new(1.0, 1.0));
        assert_eq!(j1[0], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn corner_error_examples() {
        let corners = CornerSet::rectangle(128, 128);
        let gt = HomographyParams::new([1.01, 0.02, 30.0, -0.01, 0.99, 31.0, 1e-5, -1e-5]);
        assert_eq!(corner_error(&gt, &gt, &corners).unwrap(), 0.0);
        let shifted = HomographyParams::translation(3.0, 4.0).compose(&gt).unwrap();
        assert_abs_diff_eq!(corner_error(&shifted, &gt, &corners).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn json_round_trip_and_convention_check() {
        let h = HomographyParams::new([1.0, 0.1, 2.5, 0.0, 1.0, -3.25, 1e-7, 3.3e-9]);
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("template_to_input_h33_1"));
        let back: HomographyParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        let bad = r#"{"p":[1,0,0,0,1,0,0,0],"convention":"input_to_template"}"#;
        assert!(serde_json::from_str::<HomographyParams>(bad).is_err());
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in random_h(), b in random_h(), c in random_h()) {
            let left = a.compose(&b).unwrap().compose(&c).unwrap();
            let right = a.compose(&b.compose(&c).unwrap()).unwrap();
            for i in 0..8 {
                prop_assert!((left.p[i] - right.p[i]).abs() <= 1e-9 * (1.0 + left.p[i].abs()));
            }
        }

        #[test]
        fn compose_matches_sequential_apply(a in random_h(), b in random_h(), x in point()) {
            let lhs = a.compose(&b).unwrap().apply(x).unwrap();
            let rhs = a.apply(b.apply(x).unwrap()).unwrap();
            prop_assert!((lhs - rhs).norm() <= 1e-9);
        }

        #[test]
        fn invert_round_trips_points(h in random_h(), x in point()) {
            let back = h.invert().unwrap().apply(h.apply(x).unwrap()).unwrap();
            prop_assert!((back - x).norm() <= 1e-9);
        }

        #[test]
        fn rescale_is_conjugation(h in random_h(), x in point(), s in 0.1f64..4.0) {
            let lhs = h.rescale(s).apply(Point::new(s * x.x, s * x.y)).unwrap();
            let mapped = h.apply(x).unwrap();
            prop_assert!((lhs - Point::new(s * mapped.x, s * mapped.y)).norm() <= 1e-9 * (1.0 + mapped.coords.norm() * s));
            let back = h.rescale(s).rescale(1.0 / s);
            for i in 0..8 {
                prop_assert!((back.p[i] - h.p[i]).abs() <= 1e-9 * (1.0 + h.p[i].abs()));
            }
        }

        #[test]
        fn dlt_reproduces_corners(offsets in prop::array::uniform8(-30.0f64..30.0)) {
            let src = CornerSet::rectangle(128, 128);
            let base = [(31.0, 31.0), (31.0, 159.0), (159.0, 159.0), (159.0, 31.0)];
            let dst = CornerSet(std::array::from_fn(|i| {
                Point::new(base[i].0 + offsets[2 * i], base[i].1 + offsets[2 * i + 1])
            }));
            let h = dlt_from_corners(&src, &dst).unwrap();
            for (s, d) in src.0.iter().zip(&dst.0) {
                prop_assert!((h.apply(*s).unwrap() - d).norm() < 1e-6);
            }
        }

        #[test]
        fn warp_jacobian_matches_finite_differences(x in point()) {
            let j = warp_jacobian(x);
            let step = 1e-7;
            for k in 0..8 {
                let mut plus = HomographyParams::IDENTITY;
                let mut minus = HomographyParams::IDENTITY;
                plus[k] += step;
                minus[k] -= step;
                let a = HomographyParams::new(plus).apply(x).unwrap();
                let b = HomographyParams::new(minus).apply(x).unwrap();
                let fd = (a - b) / (2.0 * step);
                let scale = 1.0 + j[0][k].abs().max(j[1][k].abs());
                prop_assert!((fd.x - j[0][k]).abs() <= 1e-6 * scale);
                prop_assert!((fd.y - j[1][k]).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn corner_error_is_symmetric(a in random_h(), b in random_h()) {
            let c = CornerSet::rectangle(128, 128);
            let ab = corner_error(&a, &b, &c).unwrap();
            let ba = corner_error(&b, &a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(corner_error(&a, &a, &c).unwrap(), 0.0);
        }
    }
}
