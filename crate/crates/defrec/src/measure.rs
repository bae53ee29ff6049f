//! Per-frame measurements: camera geometry, instrument pose, and the
//! inter-frame motion fields derived from depth and optical flow.
//!
//! A [`FrameBundle`] carries one frame's maps on an image-centered grid, so
//! image pixels and canonical cells coincide for the current view. All
//! intrinsics used inside the engine are in canonical convention (principal
//! point near the origin); [`CameraIntrinsics::canonicalized`] converts from
//! the pixel convention stored in dataset manifests.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::rastermap::{
    Disp3Map, Flow2Map, GridDomain, LocalDefMap, ParamSet, Point3Map, RasterMap, TextureMap,
};
use crate::surfgeom::{self, TangentPair};

/// Instrument masks are widened by this Chebyshev radius before masking,
/// so mixed border pixels never contaminate measurements.
pub const MASK_DILATION_PX: i32 = 2;

/// Pinhole intrinsics, in whatever pixel convention the context states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Shift the principal point from image-pixel convention into the
    /// canonical coordinates of an image-centered domain.
    pub fn canonicalized(&self, image_domain: &GridDomain) -> CameraIntrinsics {
        CameraIntrinsics {
            cx: self.cx + image_domain.offset.0 as f64,
            cy: self.cy + image_domain.offset.1 as f64,
            ..*self
        }
    }

    /// Inverse shift, for writing manifests.
    pub fn to_pixel_convention(&self, image_domain: &GridDomain) -> CameraIntrinsics {
        CameraIntrinsics {
            cx: self.cx - image_domain.offset.0 as f64,
            cy: self.cy - image_domain.offset.1 as f64,
            ..*self
        }
    }

    /// Ray direction times depth: the 3D point seen at `(u, v)` with depth `z`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new(z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z)
    }

    /// Where a 3D point lands on the grid; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Intrinsics of the same camera after taking every `stride`-th pixel.
    pub fn downsampled(&self, stride: usize) -> CameraIntrinsics {
        let s = stride as f64;
        CameraIntrinsics { fx: self.fx / s, fy: self.fy / s, cx: self.cx / s, cy: self.cy / s }
    }
}

/// Lower surface of the instrument above the tissue, as depth `z_t` (mm).
#[derive(Debug, Clone)]
pub enum InstrumentPose {
    /// One depth for the whole masked region.
    Uniform { z_bottom: f64 },
    /// Per-cell depth, defined on the instrument footprint.
    Field(RasterMap),
}

impl InstrumentPose {
    /// The bound at one cell, if the pose covers it.
    pub fn z_bottom_at(&self, u: i32, v: i32) -> Option<f64> {
        match self {
            InstrumentPose::Uniform { z_bottom } => Some(*z_bottom),
            InstrumentPose::Field(map) => map.get(u, v).map(|s| s[0] as f64),
        }
    }
}

/// One frame's measurements on a shared image-centered domain.
///
/// `flow` is forward flow, frame t to t+1, in grid steps.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub points: Point3Map,
    pub flow: Flow2Map,
    pub instrument_mask: ParamSet,
    pub texture: TextureMap,
    pub pose: Option<InstrumentPose>,
}

impl FrameBundle {
    pub fn new(
        points: Point3Map,
        flow: Flow2Map,
        instrument_mask: ParamSet,
        texture: TextureMap,
        pose: Option<InstrumentPose>,
    ) -> Self {
        let d = points.domain();
        assert_eq!(d, flow.domain(), "bundle maps must share a domain");
        assert_eq!(d, instrument_mask.domain(), "bundle maps must share a domain");
        assert_eq!(d, texture.domain(), "bundle maps must share a domain");
        Self { points, flow, instrument_mask, texture, pose }
    }

    pub fn domain(&self) -> &GridDomain {
        self.points.domain()
    }
}

/// Backproject a single-channel depth map; non-positive depths stay
/// undefined.
pub fn points_from_depth(depth: &RasterMap, k: &CameraIntrinsics) -> Point3Map {
    assert_eq!(depth.channels(), 1);
    let mut out = RasterMap::undefined(*depth.domain(), 3);
    for (u, v) in depth.defined().iter() {
        let z = depth.get(u, v).unwrap()[0] as f64;
        if z > 0.0 {
            out.set3(u, v, k.backproject(u as f64, v as f64, z));
        }
    }
    out
}

/// Grow a cell set by a Chebyshev radius (square structuring element).
pub fn dilate(set: &ParamSet, radius: i32) -> ParamSet {
    ParamSet::from_fn(*set.domain(), |u, v| {
        for dv in -radius..=radius {
            for du in -radius..=radius {
                if set.contains(u + du, v + dv) {
                    return true;
                }
            }
        }
        false
    })
}

/// Undefine everything under the (dilated) instrument footprint.
///
/// The returned bundle's `instrument_mask` is the dilated footprint, which
/// is the effective occlusion set every later stage sees.
pub fn mask_out_instrument(bundle: &FrameBundle) -> FrameBundle {
    let effective = dilate(&bundle.instrument_mask, MASK_DILATION_PX);
    let mut points = bundle.points.clone();
    let mut flow = bundle.flow.clone();
    let mut texture = bundle.texture.clone();
    for (u, v) in effective.iter() {
        points.unset(u, v);
        flow.unset(u, v);
        texture.unset(u, v);
    }
    FrameBundle { points, flow, instrument_mask: effective, texture, pose: bundle.pose.clone() }
}

/// Per-cell 3D displacement implied by optical flow between two point maps:
/// the point seen at `p + flow(p)` in the next frame, minus the point seen
/// at `p` now. Undefined wherever either lookup fails.
pub fn scene_flow(points_t: &Point3Map, points_t1: &Point3Map, flow: &Flow2Map) -> Disp3Map {
    let mut out = RasterMap::undefined(*points_t.domain(), 3);
    for (u, v) in points_t.defined().iter() {
        let Some((du, dv)) = flow.get2(u, v) else { continue };
        let Some(moved) = points_t1.sample3(u as f64 + du, v as f64 + dv) else { continue };
        let here = points_t.get3(u, v).unwrap();
        out.set3(u, v, moved - here);
    }
    out
}

/// Local deformation of each surface sample between frames.
///
/// Differentiates the displaced point map `P_t + F` and factors the motion
/// of each tangent pair; cells with missing data or degenerate tangents
/// stay undefined.
pub fn measure_local_deformation(
    points_t: &Point3Map,
    derivs_t: &crate::rastermap::Deriv6Map,
    flow_3d: &Disp3Map,
) -> LocalDefMap {
    let mut deformed = RasterMap::undefined(*points_t.domain(), 3);
    for (u, v) in points_t.defined().iter() {
        if let (Some(p), Some(f)) = (points_t.get3(u, v), flow_3d.get3(u, v)) {
            deformed.set3(u, v, p + f);
        }
    }
    let derivs_after = surfgeom::derivative_map(&deformed);
    let mut out = RasterMap::undefined(*points_t.domain(), 6);
    for (u, v) in derivs_after.defined().iter() {
        let Some(before) = derivs_t.get6(u, v) else { continue };
        let after = derivs_after.get6(u, v).unwrap();
        let extracted = surfgeom::extract_local_deformation(
            &TangentPair::from_channels(before),
            &TangentPair::from_channels(after),
        );
        if let Ok(d) = extracted {
            out.set6(u, v, d.to_channels());
        }
    }
    out
}
