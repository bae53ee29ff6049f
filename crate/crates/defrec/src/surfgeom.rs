//! Local surface geometry: tangent frames, the rotation + in-plane stretch
//! deformation model, and strain.
//!
//! A surface sample carries two tangent vectors, the per-axis derivatives of
//! the point map. Local deformation between two observations of the same
//! sample is factored into a 3D rotation (axis-angle `r`) and a symmetric
//! in-plane stretch (`xi_uu`, `xi_vv`, `xi_uv`) expressed in the
//! orthonormalized tangent basis of the *before* frame, with unit stretch
//! out of plane. The factorization is a polar decomposition of the linear
//! map that carries the before frame (tangents plus unit normal) onto the
//! after frame, so rigid motions come out as pure rotation with identity
//! stretch.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::rastermap::{Deriv6Map, ParamSet, Point3Map, RasterMap};

/// Tangent pairs with a cross product below this norm (mm^2/px^2) are
/// treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("degenerate tangent pair (|du x dv| = {norm:.3e})")]
    DegenerateTangents { norm: f64 },
    #[error("deformation is orientation-reversing (det F = {det:.3e})")]
    Reflection { det: f64 },
}

/// The two tangent vectors of a surface sample, mm per grid step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentPair {
    pub du: Vector3<f64>,
    pub dv: Vector3<f64>,
}

impl TangentPair {
    pub fn new(du: Vector3<f64>, dv: Vector3<f64>) -> Self {
        Self { du, dv }
    }

    pub fn from_channels(c: [f64; 6]) -> Self {
        Self {
            du: Vector3::new(c[0], c[1], c[2]),
            dv: Vector3::new(c[3], c[4], c[5]),
        }
    }

    pub fn to_channels(self) -> [f64; 6] {
        [self.du.x, self.du.y, self.du.z, self.dv.x, self.dv.y, self.dv.z]
    }

    /// Unit normal `du x dv / |du x dv|`.
    pub fn normal(&self) -> Result<Vector3<f64>, GeomError> {
        let c = self.du.cross(&self.dv);
        let n = c.norm();
        if n <= DEGENERACY_TOL {
            return Err(GeomError::DegenerateTangents { norm: n });
        }
        Ok(c / n)
    }

    /// Orthonormal frame `[e1, e2, n]` with `e1` along `du` and `e2` the
    /// in-plane complement.
    pub fn orthonormal_frame(&self) -> Result<Matrix3<f64>, GeomError> {
        let n = self.normal()?;
        let e1 = self.du / self.du.norm();
        let mut e2 = self.dv - self.dv.dot(&e1) * e1;
        let e2n = e2.norm();
        if e2n <= DEGENERACY_TOL {
            return Err(GeomError::DegenerateTangents { norm: e2n });
        }
        e2 /= e2n;
        Ok(Matrix3::from_columns(&[e1, e2, n]))
    }

    fn frame_with_normal(&self) -> Result<Matrix3<f64>, GeomError> {
        let n = self.normal()?;
        Ok(Matrix3::from_columns(&[self.du, self.dv, n]))
    }
}

/// Rotation plus in-plane stretch at one surface sample.
///
/// `r` is the axis-angle rotation vector (radians, |r| < pi) and `xi` the
/// symmetric stretch `(xi_uu, xi_vv, xi_uv)` in the orthonormalized tangent
/// basis of the undeformed sample. Identity is `r = 0`, `xi = (1, 1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalDeformation {
    pub r: Vector3<f64>,
    pub xi: (f64, f64, f64),
}

impl LocalDeformation {
    pub const IDENTITY: LocalDeformation =
        LocalDeformation { r: Vector3::new(0.0, 0.0, 0.0), xi: (1.0, 1.0, 0.0) };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Map channel layout `(r1, r2, r3, xi_uu, xi_vv, xi_uv)`.
    pub fn from_channels(c: [f64; 6]) -> Self {
        Self { r: Vector3::new(c[0], c[1], c[2]), xi: (c[3], c[4], c[5]) }
    }

    pub fn to_channels(self) -> [f64; 6] {
        [self.r.x, self.r.y, self.r.z, self.xi.0, self.xi.1, self.xi.2]
    }

    /// Solver coordinates: identity maps to the zero vector
    /// `(r1, r2, r3, xi_uu - 1, xi_vv - 1, xi_uv)`.
    pub fn to_identity_centered(self) -> [f64; 6] {
        [self.r.x, self.r.y, self.r.z, self.xi.0 - 1.0, self.xi.1 - 1.0, self.xi.2]
    }

    pub fn from_identity_centered(c: [f64; 6]) -> Self {
        Self { r: Vector3::new(c[0], c[1], c[2]), xi: (c[3] + 1.0, c[4] + 1.0, c[5]) }
    }
}

/// In-plane engineering strain `(e_uu, e_vv, e_uv)`: stretch minus identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceStrain {
    pub e_uu: f64,
    pub e_vv: f64,
    pub e_uv: f64,
}

/// Strain of a stretch: `xi` minus the identity stretch, componentwise.
pub fn stretch_to_strain(d: &LocalDeformation) -> SurfaceStrain {
    SurfaceStrain { e_uu: d.xi.0 - 1.0, e_vv: d.xi.1 - 1.0, e_uv: d.xi.2 }
}

/// Eigenvalues of the 2x2 strain tensor, largest first.
pub fn principal_strain(s: &SurfaceStrain) -> (f64, f64) {
    let mean = 0.5 * (s.e_uu + s.e_vv);
    let rad = (0.25 * (s.e_uu - s.e_vv).powi(2) + s.e_uv * s.e_uv).sqrt();
    (mean + rad, mean - rad)
}

/// Factor the motion of one sample into rotation and in-plane stretch.
///
/// Builds the linear map `F` carrying `[du, dv, n]` of `before` onto the
/// same triple of `after` (unit normal to unit normal, so out-of-plane
/// stretch is one by construction), then polar-decomposes `F = R * U` and
/// reads the stretch components in the orthonormalized tangent basis of
/// `before`.
pub fn extract_local_deformation(
    before: &TangentPair,
    after: &TangentPair,
) -> Result<LocalDeformation, GeomError> {
    let a = before.frame_with_normal()?;
    let a_after = after.frame_with_normal()?;
    let a_inv = a.try_inverse().ok_or(GeomError::DegenerateTangents {
        norm: before.du.cross(&before.dv).norm(),
    })?;
    let f = a_after * a_inv;
    let det = f.determinant();
    if det <= 0.0 {
        return Err(GeomError::Reflection { det });
    }
    let svd = f.svd(true, true);
    let w = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let rot = w * vt;
    let stretch = vt.transpose() * Matrix3::from_diagonal(&svd.singular_values) * vt;
    let r = nalgebra::UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot))
        .scaled_axis();
    let e = before.orthonormal_frame()?;
    let s = e.transpose() * stretch * e;
    Ok(LocalDeformation { r, xi: (s[(0, 0)], s[(1, 1)], s[(0, 1)]) })
}

/// Deform a tangent pair: stretch in the local orthonormal basis, then
/// rotate in 3D. Inverse of [`extract_local_deformation`].
pub fn apply_local_deformation(
    before: &TangentPair,
    d: &LocalDeformation,
) -> Result<TangentPair, GeomError> {
    let e = before.orthonormal_frame()?;
    let s = Matrix3::new(
        d.xi.0, d.xi.2, 0.0, //
        d.xi.2, d.xi.1, 0.0, //
        0.0, 0.0, 1.0,
    );
    let stretch = e * s * e.transpose();
    let f = Rotation3::from_scaled_axis(d.r).matrix() * stretch;
    Ok(TangentPair::new(f * before.du, f * before.dv))
}

// ===================== grid derivatives =====================

/// Finite-difference stencil along one grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

impl Stencil {
    /// The two taps as (cell offset along the axis, coefficient).
    pub fn taps(self) -> [(i32, f64); 2] {
        match self {
            Stencil::Central => [(1, 0.5), (-1, -0.5)],
            Stencil::Forward => [(1, 1.0), (0, -1.0)],
            Stencil::Backward => [(0, 1.0), (-1, -1.0)],
        }
    }
}

/// Stencil for a derivative along `axis` (0 = u, 1 = v) at a defined cell:
/// central where both same-axis neighbors are defined, one-sided at
/// defined-set boundaries, `None` when no same-axis neighbor exists.
pub fn axis_stencil(set: &ParamSet, u: i32, v: i32, axis: usize) -> Option<Stencil> {
    let (du, dv) = if axis == 0 { (1, 0) } else { (0, 1) };
    let plus = set.contains(u + du, v + dv);
    let minus = set.contains(u - du, v - dv);
    match (plus, minus) {
        (true, true) => Some(Stencil::Central),
        (true, false) => Some(Stencil::Forward),
        (false, true) => Some(Stencil::Backward),
        (false, false) => None,
    }
}

/// Per-axis tangent derivatives of a point map, mm per grid step.
///
/// A cell keeps its derivative only if both axes produce one; isolated
/// cells and one-cell-wide necks end up undefined.
pub fn derivative_map(points: &Point3Map) -> Deriv6Map {
    assert_eq!(points.channels(), 3);
    let set = points.defined();
    let mut out = RasterMap::undefined(*points.domain(), 6);
    for (u, v) in set.iter() {
        let mut channels = [0.0f64; 6];
        let mut ok = true;
        for axis in 0..2 {
            match axis_stencil(set, u, v, axis) {
                Some(stencil) => {
                    let (du, dv) = if axis == 0 { (1, 0) } else { (0, 1) };
                    let mut d = Vector3::zeros();
                    for (off, coeff) in stencil.taps() {
                        let p = points.get3(u + du * off, v + dv * off).unwrap();
                        d += coeff * p;
                    }
                    channels[axis * 3] = d.x;
                    channels[axis * 3 + 1] = d.y;
                    channels[axis * 3 + 2] = d.z;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            out.set6(u, v, channels);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rastermap::GridDomain;
    use approx::assert_relative_eq;

    #[test]
    fn uniaxial_stretch_extracts_exactly() {
        let before = TangentPair::new(Vector3::x(), Vector3::y());
        let after = TangentPair::new(Vector3::x() * 1.1, Vector3::y());
        let d = extract_local_deformation(&before, &after).unwrap();
        assert_relative_eq!(d.r.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.xi.0, 1.1, epsilon = 1e-12);
        assert_relative_eq!(d.xi.1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.xi.2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rigid_rotation_extracts_identity_stretch() {
        let before = TangentPair::new(
            Vector3::new(0.8, 0.1, -0.2),
            Vector3::new(-0.05, 0.9, 0.3),
        );
        let rot = Rotation3::from_scaled_axis(Vector3::new(0.4, -0.3, 0.8));
        let after = TangentPair::new(rot * before.du, rot * before.dv);
        let d = extract_local_deformation(&before, &after).unwrap();
        assert_relative_eq!(d.xi.0, 1.0, epsilon = 1e-9);
        assert_relative_eq!(d.xi.1, 1.0, epsilon = 1e-9);
        assert_relative_eq!(d.xi.2, 0.0, epsilon = 1e-9);
        assert_relative_eq!(d.r, Vector3::new(0.4, -0.3, 0.8), epsilon = 1e-9);
    }

    #[test]
    fn extract_and_apply_are_mutual_inverses() {
        let before = TangentPair::new(
            Vector3::new(1.1, 0.2, 0.1),
            Vector3::new(-0.3, 0.9, -0.2),
        );
        let d = LocalDeformation {
            r: Vector3::new(0.7, -1.1, 0.4),
            xi: (1.3, 0.8, 0.12),
        };
        let after = apply_local_deformation(&before, &d).unwrap();
        let back = extract_local_deformation(&before, &after).unwrap();
        assert_relative_eq!(back.r, d.r, epsilon = 1e-9);
        assert_relative_eq!(back.xi.0, d.xi.0, epsilon = 1e-9);
        assert_relative_eq!(back.xi.1, d.xi.1, epsilon = 1e-9);
        assert_relative_eq!(back.xi.2, d.xi.2, epsilon = 1e-9);
        let again = apply_local_deformation(&before, &back).unwrap();
        assert_relative_eq!(again.du, after.du, epsilon = 1e-9);
        assert_relative_eq!(again.dv, after.dv, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_tangents_are_rejected() {
        let before = TangentPair::new(Vector3::x(), Vector3::x() * 2.0);
        let after = TangentPair::new(Vector3::x(), Vector3::y());
        assert!(matches!(
            extract_local_deformation(&before, &after),
            Err(GeomError::DegenerateTangents { .. })
        ));
    }

    #[test]
    fn orientation_flips_become_half_turns_not_reflections() {
        // Both frames are built right-handed from the cross product, so the
        // carried map always has positive determinant; a swapped tangent
        // pair reads as a rotation by pi, never as a reflection.
        let before = TangentPair::new(Vector3::x(), Vector3::y());
        let after = TangentPair::new(Vector3::y(), Vector3::x());
        let d = extract_local_deformation(&before, &after).unwrap();
        assert_relative_eq!(d.r.norm(), std::f64::consts::PI, epsilon = 1e-9);
        assert_relative_eq!(d.xi.0, 1.0, epsilon = 1e-9);
        assert_relative_eq!(d.xi.1, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn principal_strain_of_pure_shear() {
        let (hi, lo) = principal_strain(&SurfaceStrain { e_uu: 0.0, e_vv: 0.0, e_uv: 0.05 });
        assert_relative_eq!(hi, 0.05, epsilon = 1e-15);
        assert_relative_eq!(lo, -0.05, epsilon = 1e-15);
    }

    #[test]
    fn strain_is_stretch_minus_identity() {
        let d = LocalDeformation { r: Vector3::zeros(), xi: (1.05, 0.97, 0.02) };
        let s = stretch_to_strain(&d);
        assert_relative_eq!(s.e_uu, 0.05, epsilon = 1e-12);
        assert_relative_eq!(s.e_vv, -0.03, epsilon = 1e-12);
        assert_relative_eq!(s.e_uv, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn cylinder_derivatives_match_the_analytic_tangents() {
        let d = GridDomain::new(41, 11, (-20, -5));
        let h = 0.01;
        let points = RasterMap::from_fn(d, 3, |u, v| {
            Some(vec![
                (h * u as f64).cos() as f32,
                v as f32,
                (h * u as f64).sin() as f32,
            ])
        });
        let derivs = derivative_map(&points);
        for (u, v) in [(0, 0), (5, -2), (-12, 3)] {
            let got = derivs.get6(u, v).unwrap();
            let want = [
                -h * (h * u as f64).sin(),
                0.0,
                h * (h * u as f64).cos(),
                0.0,
                1.0,
                0.0,
            ];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-6, "at ({u},{v}): {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn one_sided_stencils_cover_defined_set_boundaries() {
        let d = GridDomain::new(4, 1, (0, 0));
        let points = RasterMap::from_fn(d, 3, |u, _| Some(vec![2.0 * u as f32, 0.0, 0.0]));
        let derivs = derivative_map(&points);
        assert!(derivs.get6(0, 0).is_none(), "no v-axis neighbor anywhere");
        let d2 = GridDomain::new(4, 4, (0, 0));
        let points2 = RasterMap::from_fn(d2, 3, |u, v| Some(vec![2.0 * u as f32, 3.0 * v as f32, 0.0]));
        let derivs2 = derivative_map(&points2);
        for (u, v) in d2.iter() {
            let got = derivs2.get6(u, v).unwrap();
            assert_relative_eq!(got[0], 2.0, epsilon = 1e-12);
            assert_relative_eq!(got[4], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn isolated_cells_have_no_derivative() {
        let d = GridDomain::new(5, 5, (0, 0));
        let mut points = RasterMap::undefined(d, 3);
        points.set3(2, 2, Vector3::new(1.0, 2.0, 3.0));
        let derivs = derivative_map(&points);
        assert!(derivs.defined().is_empty());
    }
}
