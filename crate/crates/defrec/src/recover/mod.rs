//! The online recovery core: canonical surface state, outlier gating, the
//! two per-frame deformation optimizations, reparameterization onto the new
//! image grid, and fusion with newly visible data.
//!
//! One call to [`step`] advances the canonical model by one frame:
//!
//! 1. measure scene flow and local deformation from the frame pair,
//! 2. partition canonical points into inliers and outliers,
//! 3. solve for a local deformation map over the whole canonical set,
//! 4. deform the canonical derivatives and solve for displaced points,
//! 5. reproject the deformed model onto the grid and fuse the new image.

use std::time::Instant;

use thiserror::Error;

use crate::measure::{CameraIntrinsics, FrameBundle};
use crate::rastermap::{
    Disp3Map, GridDomain, LocalDefMap, ParamSet, Point3Map, RasterError, RasterMap, TextureMap,
};
use crate::solver::SolverError;
use crate::surfgeom::{
    self, apply_local_deformation, principal_strain, stretch_to_strain, LocalDeformation,
    TangentPair,
};

mod optimize;
mod reparam;

pub use optimize::{
    optimize_displacement, optimize_local_deformation, DisplacementSolve, LocalSolve,
};
pub use reparam::reparameterize;

// ===================== errors =====================

#[derive(Debug, Error)]
pub enum RecoverError {
    /// No usable surface cells (all-undefined frame, or too sparse to
    /// differentiate anywhere).
    #[error("frame contains no usable surface region")]
    EmptyFrame,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

// ===================== canonical state =====================

/// The canonical surface model: everything recovered so far, parameterized
/// on a growing integer grid aligned with the latest image.
#[derive(Debug, Clone)]
pub struct CanonicalState {
    params: ParamSet,
    points: Point3Map,
    derivs: RasterMap,
    texture: TextureMap,
    frame_index: usize,
}

impl CanonicalState {
    /// Build a state from point and texture maps, recomputing derivatives.
    ///
    /// The parameter set shrinks to the cells where both grid derivatives
    /// exist, so isolated specks never enter the model. Texture gaps inside
    /// the parameter set are filled with neutral gray to keep every map
    /// defined on exactly the same cells.
    pub fn from_maps(
        points: Point3Map,
        texture: TextureMap,
        frame_index: usize,
    ) -> Result<CanonicalState, RecoverError> {
        assert_eq!(points.domain(), texture.domain(), "state maps must share a domain");
        let derivs = surfgeom::derivative_map(&points);
        let params = derivs.defined().clone();
        if params.is_empty() {
            return Err(RecoverError::EmptyFrame);
        }
        let points = points.restricted_to(&params);
        let mut texture = texture.restricted_to(&params);
        for (u, v) in params.iter() {
            if !texture.is_defined(u, v) {
                texture.set(u, v, &[0.5, 0.5, 0.5]);
            }
        }
        Ok(CanonicalState { params, points, derivs, texture, frame_index })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn points(&self) -> &Point3Map {
        &self.points
    }

    pub fn derivs(&self) -> &RasterMap {
        &self.derivs
    }

    pub fn texture(&self) -> &TextureMap {
        &self.texture
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn domain(&self) -> &GridDomain {
        self.points.domain()
    }
}

/// Start the canonical model from the first (instrument-masked) frame.
pub fn init_state(bundle: &FrameBundle) -> Result<CanonicalState, RecoverError> {
    CanonicalState::from_maps(bundle.points.clone(), bundle.texture.clone(), 0)
}

// ===================== outlier partition =====================

/// Split of the canonical parameter set for one frame's measurements.
///
/// `occluded`, `out_of_fov` and `strain_gated` are disjoint and together
/// equal `outliers`; `inliers` and `outliers` partition the full set.
#[derive(Debug, Clone)]
pub struct InlierPartition {
    pub inliers: ParamSet,
    pub outliers: ParamSet,
    /// Inside the image rectangle but unmeasured (instrument shadow, flow
    /// failure, silhouette).
    pub occluded: ParamSet,
    /// Outside the image rectangle entirely.
    pub out_of_fov: ParamSet,
    /// Measured, but with an implausibly large principal strain.
    pub strain_gated: ParamSet,
}

impl InlierPartition {
    /// The whole canonical set this partition covers.
    pub fn all(&self) -> ParamSet {
        self.inliers.union(&self.outliers)
    }
}

/// Classify every canonical point against one frame's measurements.
///
/// A point is an outlier when it lies outside the image rectangle, when
/// either measurement map is undefined there, or when the measured stretch
/// implies a principal strain beyond `strain_gate` in magnitude.
pub fn detect_outliers(
    state: &CanonicalState,
    d_i: &LocalDefMap,
    f_i: &Disp3Map,
    strain_gate: f64,
) -> InlierPartition {
    let dom = *state.params.domain();
    let image_rect = *f_i.domain();
    let mut inliers = ParamSet::empty(dom);
    let mut outliers = ParamSet::empty(dom);
    let mut occluded = ParamSet::empty(dom);
    let mut out_of_fov = ParamSet::empty(dom);
    let mut strain_gated = ParamSet::empty(dom);
    for (u, v) in state.params.iter() {
        if !image_rect.contains(u, v) {
            out_of_fov.insert(u, v);
            outliers.insert(u, v);
            continue;
        }
        let measured = match (f_i.get3(u, v), d_i.get6(u, v)) {
            (Some(_), Some(ch)) => Some(ch),
            _ => None,
        };
        let Some(ch) = measured else {
            occluded.insert(u, v);
            outliers.insert(u, v);
            continue;
        };
        let local = LocalDeformation::from_channels(ch);
        let (s_hi, s_lo) = principal_strain(&stretch_to_strain(&local));
        if s_hi.abs() > strain_gate || s_lo.abs() > strain_gate {
            strain_gated.insert(u, v);
            outliers.insert(u, v);
        } else {
            inliers.insert(u, v);
        }
    }
    InlierPartition { inliers, outliers, occluded, out_of_fov, strain_gated }
}

// ===================== recovered deformation =====================

/// Forward deformation of the canonical surface over one frame.
#[derive(Debug, Clone)]
pub struct RecoveredDeformation {
    /// 3D displacement per canonical cell, mm.
    pub displacement: Disp3Map,
    /// Local rotation and stretch per canonical cell.
    pub local: LocalDefMap,
}

/// Deform a derivative map by a local deformation map, cell by cell.
///
/// Cells where the tangents are too degenerate to orient keep their
/// original derivatives.
pub fn deform_derivatives(derivs: &RasterMap, local: &LocalDefMap) -> RasterMap {
    let mut out = RasterMap::undefined(*derivs.domain(), 6);
    for (u, v) in derivs.defined().iter() {
        let before = TangentPair::from_channels(derivs.get6(u, v).unwrap());
        let deformed = local
            .get6(u, v)
            .and_then(|ch| {
                apply_local_deformation(&before, &LocalDeformation::from_channels(ch)).ok()
            })
            .unwrap_or(before);
        out.set6(u, v, deformed.to_channels());
    }
    out
}

// ===================== fusion =====================

/// Merge the reparameterized canonical model with the new frame.
///
/// Geometry keeps the canonical value wherever one exists and adopts the
/// image value only on newly visible cells; texture is refreshed from the
/// image wherever the image has one. Increments the frame index.
pub fn fuse(reparam: CanonicalState, bundle: &FrameBundle) -> Result<CanonicalState, RecoverError> {
    let image = bundle.domain();
    let mut dom = *reparam.points.domain();
    if !dom.contains_domain(image) {
        let corners = [
            (image.offset.0, image.offset.1),
            (
                image.offset.0 + image.width as i32 - 1,
                image.offset.1 + image.height as i32 - 1,
            ),
        ];
        dom = dom.grown_to_include(corners);
    }
    let mut points = reparam.points.expand_to(dom)?;
    let mut texture = reparam.texture.expand_to(dom)?;
    for (u, v) in bundle.points.defined().iter() {
        if !points.is_defined(u, v) {
            points.set3(u, v, bundle.points.get3(u, v).unwrap());
        }
    }
    for (u, v) in bundle.texture.defined().iter() {
        texture.set(u, v, bundle.texture.get(u, v).unwrap());
    }
    CanonicalState::from_maps(points, texture, reparam.frame_index + 1)
}

// ===================== one full frame step =====================

/// Tunables for one recovery step.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    /// Weight of the neighbor-similarity term in the local solve.
    pub alpha: f64,
    /// Inlier gate on principal strain magnitude.
    pub strain_gate: f64,
    /// Constrain occluded points to stay under the instrument when a pose
    /// is available.
    pub use_pose: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { alpha: 200.0, strain_gate: 0.1, use_pose: false }
    }
}

/// Timing and solver effort for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    /// Wall time of the two optimizations, assembly included.
    pub solve_ms: f64,
    /// Wall time of reparameterization plus fusion.
    pub remap_ms: f64,
    pub cg_iterations: usize,
    pub active_set_rounds: usize,
    pub bound_relaxed: bool,
    pub inliers: usize,
    pub outliers: usize,
}

/// Result of advancing the canonical model by one frame.
#[derive(Debug)]
pub struct StepOutput {
    pub state: CanonicalState,
    pub deformation: RecoveredDeformation,
    pub partition: InlierPartition,
    pub stats: StepStats,
}

/// Advance the canonical model from frame t to t+1.
///
/// Both bundles must already be instrument-masked; intrinsics are in
/// canonical convention. The returned deformation is the forward motion of
/// every canonical cell of the *incoming* state.
pub fn step(
    state: &CanonicalState,
    bundle_t: &FrameBundle,
    bundle_t1: &FrameBundle,
    k: &CameraIntrinsics,
    config: &StepConfig,
) -> Result<StepOutput, RecoverError> {
    let dp_i = surfgeom::derivative_map(&bundle_t.points);
    let f_i = crate::measure::scene_flow(&bundle_t.points, &bundle_t1.points, &bundle_t.flow);
    let d_i = crate::measure::measure_local_deformation(&bundle_t.points, &dp_i, &f_i);
    let partition = detect_outliers(state, &d_i, &f_i, config.strain_gate);

    let solve_start = Instant::now();
    let local_solve = optimize_local_deformation(&d_i, &partition, config.alpha)?;
    let dp_target = deform_derivatives(&state.derivs, &local_solve.local);
    let pose = if config.use_pose {
        bundle_t1.pose.as_ref().or(bundle_t.pose.as_ref())
    } else {
        None
    };
    let disp_solve = optimize_displacement(state, &f_i, &dp_target, &partition, pose)?;
    let solve_ms = solve_start.elapsed().as_secs_f64() * 1e3;

    let remap_start = Instant::now();
    let deformation = RecoveredDeformation {
        displacement: disp_solve.displacement,
        local: local_solve.local,
    };
    let reparam = reparameterize(state, &deformation, k)?;
    let fused = fuse(reparam, bundle_t1)?;
    let remap_ms = remap_start.elapsed().as_secs_f64() * 1e3;

    let stats = StepStats {
        solve_ms,
        remap_ms,
        cg_iterations: local_solve.cg_iterations + disp_solve.cg_iterations,
        active_set_rounds: disp_solve.active_rounds,
        bound_relaxed: disp_solve.bound_relaxed,
        inliers: partition.inliers.len(),
        outliers: partition.outliers.len(),
    };
    Ok(StepOutput { state: fused, deformation, partition, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{mask_out_instrument, points_from_depth};
    use crate::rastermap::{Dtype, RasterMap};
    use nalgebra::Vector3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 0.0, cy: 0.0 }
    }

    fn plane_bundle(size: usize, z0: f32) -> FrameBundle {
        let d = GridDomain::image_centered(size, size);
        let depth = RasterMap::from_fn(d, 1, |_, _| Some(vec![z0]));
        let points = points_from_depth(&depth, &k());
        let flow = RasterMap::from_fn(d, 2, |_, _| Some(vec![0.0, 0.0]));
        let texture = RasterMap::from_fn(d, 3, |u, v| {
            Some(vec![0.5 + 0.3 * (u as f32 / 20.0).sin(), 0.5, 0.5 + 0.01 * v as f32])
        });
        FrameBundle::new(points, flow, ParamSet::empty(d), texture, None)
    }

    #[test]
    fn init_copies_the_masked_frame() {
        let bundle = plane_bundle(16, 100.0);
        let state = init_state(&bundle).unwrap();
        assert_eq!(state.params().len(), 16 * 16);
        assert_eq!(state.frame_index(), 0);
        assert_eq!(state.points().get3(3, -5), bundle.points.get3(3, -5));
        assert_eq!(state.texture().get(0, 0), bundle.texture.get(0, 0));
    }

    #[test]
    fn init_with_instrument_hole_shrinks_params() {
        let bundle = plane_bundle(64, 100.0);
        let d = *bundle.domain();
        let mask = ParamSet::from_fn(d, |u, v| (u - 5) * (u - 5) + v * v <= 25);
        let with_mask = FrameBundle { instrument_mask: mask, ..bundle };
        let masked = mask_out_instrument(&with_mask);
        let state = init_state(&masked).unwrap();
        assert_eq!(state.params().len(), 64 * 64 - masked.instrument_mask.len());
    }

    #[test]
    fn init_of_empty_frame_fails() {
        let d = GridDomain::image_centered(8, 8);
        let bundle = FrameBundle::new(
            RasterMap::undefined(d, 3),
            RasterMap::undefined(d, 2),
            ParamSet::empty(d),
            RasterMap::undefined(d, 3),
            None,
        );
        assert!(matches!(init_state(&bundle), Err(RecoverError::EmptyFrame)));
    }

    #[test]
    fn outlier_partition_is_the_documented_predicate() {
        let bundle = plane_bundle(16, 100.0);
        let state = init_state(&bundle).unwrap();
        let d = *bundle.domain();
        let identity = LocalDeformation::IDENTITY.to_channels();
        let identity_f32: Vec<f32> = identity.iter().map(|&x| x as f32).collect();
        let mut d_i = RasterMap::from_fn(d, 6, |_, _| Some(identity_f32.clone()));
        let mut f_i = RasterMap::from_fn(d, 3, |_, _| Some(vec![0.0, 0.0, 0.0]));
        // one hole in the measurements, one overstretched cell
        f_i.unset(2, 2);
        d_i.unset(-3, 1);
        let mut big = identity;
        big[3] = 1.25;
        d_i.set6(4, -4, big);
        let part = detect_outliers(&state, &d_i, &f_i, 0.1);
        assert_eq!(part.inliers.len() + part.outliers.len(), state.params().len());
        assert!(part.occluded.contains(2, 2));
        assert!(part.occluded.contains(-3, 1));
        assert!(part.strain_gated.contains(4, -4));
        assert_eq!(part.outliers.len(), 3);
        assert!(part.out_of_fov.is_empty());
    }

    #[test]
    fn out_of_rect_cells_are_their_own_outlier_class() {
        let bundle = plane_bundle(16, 100.0);
        let state = init_state(&bundle).unwrap();
        // measurements only cover a smaller central window
        let small = GridDomain::image_centered(8, 8);
        let identity: Vec<f32> =
            LocalDeformation::IDENTITY.to_channels().iter().map(|&x| x as f32).collect();
        let d_i = RasterMap::from_fn(small, 6, |_, _| Some(identity.clone()));
        let f_i = RasterMap::from_fn(small, 3, |_, _| Some(vec![0.0; 3]));
        let part = detect_outliers(&state, &d_i, &f_i, 0.1);
        assert_eq!(part.out_of_fov.len(), 16 * 16 - 8 * 8);
        assert_eq!(part.inliers.len(), 8 * 8);
        assert!(part.occluded.is_empty());
    }

    #[test]
    fn strain_gate_admits_009_rejects_011() {
        let bundle = plane_bundle(8, 100.0);
        let state = init_state(&bundle).unwrap();
        let d = *bundle.domain();
        let f_i = RasterMap::from_fn(d, 3, |_, _| Some(vec![0.0; 3]));
        let mut d_i = RasterMap::undefined(d, 6);
        let probes = [
            ((0, 0), 0.09, false),
            ((1, 0), 0.11, true),
            ((2, 0), -0.09, false),
            ((3, 0), -0.11, true),
        ];
        for (u, v) in d.iter() {
            d_i.set6(u, v, LocalDeformation::IDENTITY.to_channels());
        }
        for ((u, v), strain, _) in probes {
            let mut ch = LocalDeformation::IDENTITY.to_channels();
            ch[3] = 1.0 + strain;
            d_i.set6(u, v, ch);
        }
        let part = detect_outliers(&state, &d_i, &f_i, 0.1);
        for ((u, v), strain, gated) in probes {
            assert_eq!(
                part.strain_gated.contains(u, v),
                gated,
                "strain {strain} at ({u},{v})"
            );
            assert_eq!(part.inliers.contains(u, v), !gated);
        }
    }

    #[test]
    fn fusion_keeps_canonical_geometry_and_image_texture() {
        let bundle = plane_bundle(16, 100.0);
        let state = init_state(&bundle).unwrap();
        let mut shifted = plane_bundle(16, 90.0);
        shifted.texture = RasterMap::from_fn(*shifted.domain(), 3, |_, _| {
            Some(vec![0.9, 0.1, 0.1])
        });
        let fused = fuse(state.clone(), &shifted).unwrap();
        assert_eq!(fused.frame_index(), 1);
        // geometry untouched where canonical was defined
        assert_eq!(fused.points().get3(2, 3), state.points().get3(2, 3));
        // texture refreshed from the image
        assert_eq!(fused.texture().get(2, 3).unwrap(), &[0.9, 0.1, 0.1][..]);
    }

    #[test]
    fn fusion_unions_disjoint_regions() {
        let d = GridDomain::new(30, 10, (0, 0));
        let left = RasterMap::from_fn(d, 3, |u, v| {
            (u < 10).then(|| vec![u as f32, v as f32, 100.0])
        });
        let tex_left = RasterMap::from_fn(d, 3, |u, _| (u < 10).then(|| vec![0.5; 3]));
        let state = CanonicalState::from_maps(left, tex_left, 4).unwrap();
        let right = RasterMap::from_fn(d, 3, |u, v| {
            (u >= 22).then(|| vec![u as f32, v as f32, 90.0])
        });
        let tex_right = RasterMap::from_fn(d, 3, |u, _| (u >= 22).then(|| vec![0.2; 3]));
        let bundle = FrameBundle::new(
            right,
            RasterMap::undefined(d, 2),
            ParamSet::empty(d),
            tex_right,
            None,
        );
        let fused = fuse(state, &bundle).unwrap();
        assert_eq!(fused.params().len(), 10 * 10 + 8 * 10);
        assert_eq!(fused.frame_index(), 5);
    }

    #[test]
    fn static_step_is_a_fixed_point() {
        let bundle = plane_bundle(24, 100.0);
        let state = init_state(&bundle).unwrap();
        let out = step(&state, &bundle, &bundle, &k(), &StepConfig::default()).unwrap();
        assert_eq!(out.partition.outliers.len(), 0);
        let mut max_disp: f64 = 0.0;
        for (u, v) in out.deformation.displacement.defined().iter() {
            max_disp = max_disp.max(out.deformation.displacement.get3(u, v).unwrap().norm());
        }
        assert!(max_disp < 1e-6, "max recovered displacement {max_disp}");
        assert_eq!(out.state.params().len(), state.params().len());
        let mut max_drift: f64 = 0.0;
        for (u, v) in state.params().iter() {
            let before = state.points().get3(u, v).unwrap();
            let after = out.state.points().get3(u, v).unwrap();
            max_drift = max_drift.max((after - before).norm());
        }
        assert!(max_drift < 1e-6, "max geometry drift {max_drift}");
        assert_eq!(out.state.texture().dtype(), Dtype::F32);
    }

    #[test]
    fn rigid_translation_step_recovers_the_motion() {
        let size = 24;
        let d = GridDomain::image_centered(size, size);
        let t = Vector3::new(0.8, -0.4, 1.5);
        let kk = k();
        let depth = RasterMap::from_fn(d, 1, |_, _| Some(vec![100.0]));
        let points_t = points_from_depth(&depth, &kk);
        // a translated infinite plane is the plane at depth z+tz, so the
        // point seen at (u,v) next frame is a plain backprojection
        let points_t1 = RasterMap::from_fn(d, 3, |u, v| {
            let p = kk.backproject(u as f64, v as f64, 100.0 + t.z);
            Some(vec![p.x as f32, p.y as f32, p.z as f32])
        });
        // exact forward flow: where does the point at (u,v) land next frame
        let flow = RasterMap::from_fn(d, 2, |u, v| {
            let p = kk.backproject(u as f64, v as f64, 100.0);
            let moved = p + t;
            let (un, vn) = kk.project(&moved).unwrap();
            Some(vec![(un - u as f64) as f32, (vn - v as f64) as f32])
        });
        let tex = RasterMap::from_fn(d, 3, |_, _| Some(vec![0.5; 3]));
        let bundle_t =
            FrameBundle::new(points_t, flow.clone(), ParamSet::empty(d), tex.clone(), None);
        let bundle_t1 = FrameBundle::new(points_t1, flow, ParamSet::empty(d), tex, None);
        let state = init_state(&bundle_t).unwrap();
        let out = step(&state, &bundle_t, &bundle_t1, &kk, &StepConfig::default()).unwrap();
        for (u, v) in out.deformation.displacement.defined().iter() {
            let rec = out.deformation.displacement.get3(u, v).unwrap();
            assert!((rec - t).norm() < 1e-3, "at ({u},{v}): {rec:?}");
        }
    }
}
