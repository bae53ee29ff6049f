//! Synthetic deformable-scene generator with analytic ground truth.
//!
//! A scene is a rectangular sheet of material observed by a fixed pinhole
//! camera. Material points are identified by continuous coordinates on the
//! frame-0 grid; a script of events (in-plane stretching, bending, a
//! pressed Gaussian bump, rigid motion of the whole sheet, an occluding
//! instrument disk) moves the material over time. Every frame is rendered
//! by inverting the projection per pixel, so point maps, flow, texture,
//! occlusion masks, and instrument depth bounds are all exact up to the
//! stated noise.
//!
//! Ground truth stays queryable after generation: [`true_point`] evaluates
//! the surface at any material coordinate and frame, and [`true_stretch`]
//! computes the analytic in-plane stretch between two frames through the
//! first fundamental form, independently of the recovery code paths.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::measure::{CameraIntrinsics, FrameBundle, InstrumentPose};
use crate::rastermap::{
    write_mask_rtf, GridDomain, ParamSet, Point3Map, RasterError, RasterMap,
};

/// Largest inter-frame principal strain a config may produce without
/// setting its override flag.
pub const STRAIN_INVARIANT_LIMIT: f64 = 0.08;

/// Depth clearance between the instrument bottom and the true surface.
pub const OCCLUDER_CLEARANCE_MM: f64 = 0.5;

// ===================== errors =====================

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config reaches inter-frame principal strain {strain:.4} at frame {frame}, above the {STRAIN_INVARIANT_LIMIT} limit; set allow_large_strain to generate anyway")]
    StrainTooLarge { frame: usize, strain: f64 },
    #[error("invalid scene config: {0}")]
    BadConfig(String),
    #[error("evaluation region is empty")]
    EmptyRegion,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

// ===================== scene configuration =====================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    U,
    V,
}

/// Rest geometry of the sheet.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Sheet {
    /// Fronto-parallel plane at depth `z0` mm.
    Plane { z0: f64 },
    /// Parabolic dish: depth `z0 + curvature * (x^2 + y^2)` mm with the
    /// lateral offsets in mm.
    Dish { z0: f64, curvature: f64 },
}

impl Sheet {
    fn z0(&self) -> f64 {
        match *self {
            Sheet::Plane { z0 } | Sheet::Dish { z0, .. } => z0,
        }
    }
}

/// Time profile of the bump height: smooth press, optional hold, optional
/// smooth release. Frames are sequence indices.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeightProfile {
    pub peak: f64,
    pub press: (usize, usize),
    pub release: Option<(usize, usize)>,
}

impl HeightProfile {
    fn height_at(&self, t: usize) -> f64 {
        let ramp = |a: usize, b: usize| {
            let x = (t - a) as f64 / (b - a).max(1) as f64;
            x * x * (3.0 - 2.0 * x)
        };
        if t < self.press.0 {
            return 0.0;
        }
        if t < self.press.1 {
            return self.peak * ramp(self.press.0, self.press.1);
        }
        match self.release {
            Some((a, _)) if t < a => self.peak,
            Some((a, b)) if t < b => self.peak * (1.0 - ramp(a, b)),
            Some(_) => 0.0,
            None => self.peak,
        }
    }
}

/// One scripted scene event. Stretch and bend rates act per frame and
/// accumulate from frame 0; rigid deltas apply on every frame inside their
/// half-open frame range; the occluder is purely an observation effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Event {
    /// In-plane stretch of one material axis about the sheet center:
    /// material inside `core_half_width` cells stretches by
    /// `(1 + rate)^t`, a cosine ramp of `ramp_width` cells eases out, and
    /// material beyond it keeps its rest spacing.
    UniaxialStretch { axis: Axis, rate: f64, core_half_width: f64, ramp_width: f64 },
    /// Isometric cylindrical bend about the sheet's vertical center line;
    /// curvature grows by `rate` (1/mm) each frame.
    Bend { rate: f64 },
    /// Gaussian indentation pressed away from the camera, riding the sheet
    /// normal. `center` and `sigma` are in material cells.
    Bump { center: (f64, f64), sigma: f64, height: HeightProfile },
    /// Rigid motion of the whole sheet: per-frame translation (mm) and
    /// rotation (axis-angle, rad) about the moving sheet center, applied
    /// on frames in `frames`.
    RigidSceneMotion { translation: [f64; 3], rotation: [f64; 3], frames: (usize, usize) },
    /// Opaque instrument disk in image pixels, present on frames in
    /// `frames`, carrying a per-pixel depth bound of the true surface
    /// minus [`OCCLUDER_CLEARANCE_MM`].
    Occluder { center: (f64, f64), radius: f64, frames: (usize, usize) },
}

/// Full description of a synthetic sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Principal point in canonical (image-centered) coordinates.
    pub intrinsics: CameraIntrinsics,
    pub sheet: Sheet,
    /// Material half-extent in cells per axis; pixels whose ray leaves the
    /// sheet are undefined.
    pub sheet_half_extent: (f64, f64),
    pub script: Vec<Event>,
    pub frames: usize,
    pub sigma_depth: f64,
    pub sigma_flow: f64,
    pub seed: u64,
    /// Permit scripts whose inter-frame strain exceeds the invariant.
    #[serde(default)]
    pub allow_large_strain: bool,
}

/// Names accepted by [`scenario`].
pub const SCENARIO_NAMES: [&str; 5] =
    ["traction", "palpation", "camera_pan", "occlusion", "rigid"];

/// Preset configs mirroring the evaluation scenarios. `frames` of `None`
/// picks each scenario's natural length.
pub fn scenario(name: &str, frames: Option<usize>, seed: u64) -> Option<SceneConfig> {
    let base = SceneConfig {
        width: 64,
        height: 64,
        intrinsics: CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 0.0, cy: 0.0 },
        sheet: Sheet::Plane { z0: 100.0 },
        sheet_half_extent: (96.0, 96.0),
        script: Vec::new(),
        frames: 0,
        sigma_depth: 0.0,
        sigma_flow: 0.0,
        seed,
        allow_large_strain: false,
    };
    let cfg = match name {
        "traction" => SceneConfig {
            width: 96,
            height: 96,
            script: vec![Event::UniaxialStretch {
                axis: Axis::U,
                rate: 0.01,
                core_half_width: 16.0,
                ramp_width: 8.0,
            }],
            frames: frames.unwrap_or(31),
            sigma_depth: 0.1,
            sigma_flow: 0.2,
            ..base
        },
        "palpation" => {
            let n = frames.unwrap_or(18);
            SceneConfig {
                script: vec![
                    Event::Bump {
                        center: (0.0, 0.0),
                        sigma: 4.0,
                        height: HeightProfile { peak: 1.0, press: (2, 9), release: None },
                    },
                    Event::Occluder { center: (0.0, 0.0), radius: 10.0, frames: (3, n) },
                ],
                frames: n,
                sigma_depth: 0.1,
                ..base
            }
        }
        "camera_pan" => {
            let n = frames.unwrap_or(22);
            let half = 1 + (n - 2) / 2;
            SceneConfig {
                script: vec![
                    Event::RigidSceneMotion {
                        translation: [2.0, 0.0, 0.0],
                        rotation: [0.0; 3],
                        frames: (1, half),
                    },
                    Event::RigidSceneMotion {
                        translation: [-2.0, 0.0, 0.0],
                        rotation: [0.0; 3],
                        frames: (half, n),
                    },
                ],
                frames: n,
                ..base
            }
        }
        "occlusion" => {
            let n = frames.unwrap_or(14);
            SceneConfig {
                script: vec![
                    Event::Occluder { center: (-12.0, 0.0), radius: 8.0, frames: (2, 6) },
                    Event::Occluder { center: (0.0, 0.0), radius: 8.0, frames: (6, 10) },
                    Event::Occluder { center: (12.0, 0.0), radius: 8.0, frames: (10, n) },
                ],
                frames: n,
                ..base
            }
        }
        "rigid" => SceneConfig {
            script: vec![Event::RigidSceneMotion {
                translation: [0.3, 0.2, 0.25],
                rotation: [0.0, 0.004, 0.0],
                frames: (1, usize::MAX),
            }],
            frames: frames.unwrap_or(41),
            ..base
        },
        _ => return None,
    };
    Some(cfg)
}

// ===================== surface model =====================

/// Accumulated stretch warp of one coordinate about 0: scale `lambda`
/// inside `core`, cosine-eased over `ramp`, rest spacing beyond.
fn warp_coord(xi: f64, lambda: f64, core: f64, ramp: f64) -> f64 {
    let a = xi.abs();
    let s = xi.signum();
    if a <= core {
        return lambda * xi;
    }
    if a >= core + ramp {
        return s * (a + (lambda - 1.0) * (core + 0.5 * ramp));
    }
    let d = a - core;
    let eased = d + 0.5 * (lambda - 1.0) * (d + (ramp / std::f64::consts::PI)
        * (std::f64::consts::PI * d / ramp).sin());
    s * (lambda * core + eased)
}

/// Precomputed per-frame rigid poses for one config.
struct Scene<'a> {
    cfg: &'a SceneConfig,
    /// Rotation and translated center per frame; a point maps to
    /// `r * (x - c0) + c`.
    poses: Vec<(UnitQuaternion<f64>, Vector3<f64>)>,
    center: Vector3<f64>,
}

impl<'a> Scene<'a> {
    fn new(cfg: &'a SceneConfig) -> Scene<'a> {
        let center = Vector3::new(0.0, 0.0, cfg.sheet.z0());
        let mut poses = Vec::with_capacity(cfg.frames + 1);
        let mut r = UnitQuaternion::identity();
        let mut c = center;
        poses.push((r, c));
        for t in 0..=cfg.frames {
            for ev in &cfg.script {
                if let Event::RigidSceneMotion { translation, rotation, frames } = ev {
                    if t >= frames.0 && t < frames.1 {
                        r = UnitQuaternion::from_scaled_axis(Vector3::from(*rotation)) * r;
                        c += Vector3::from(*translation);
                    }
                }
            }
            poses.push((r, c));
        }
        Scene { cfg, poses, center }
    }

    /// 3D position of material point `m` at frame `t`.
    fn point(&self, m: (f64, f64), t: usize) -> Vector3<f64> {
        let cfg = self.cfg;
        let z0 = cfg.sheet.z0();
        let (mut wu, mut wv) = m;
        let mut kappa = 0.0;
        for ev in &cfg.script {
            match ev {
                Event::UniaxialStretch { axis, rate, core_half_width, ramp_width } => {
                    let lambda = (1.0 + rate).powi(t as i32);
                    match axis {
                        Axis::U => wu = warp_coord(wu, lambda, *core_half_width, *ramp_width),
                        Axis::V => wv = warp_coord(wv, lambda, *core_half_width, *ramp_width),
                    }
                }
                Event::Bend { rate } => kappa += rate * t as f64,
                _ => {}
            }
        }
        let x = z0 * wu / cfg.intrinsics.fx;
        let y = z0 * wv / cfg.intrinsics.fy;
        let mut w = match cfg.sheet {
            Sheet::Plane { .. } => 0.0,
            Sheet::Dish { curvature, .. } => curvature * (x * x + y * y),
        };
        for ev in &cfg.script {
            if let Event::Bump { center, sigma, height } = ev {
                let rho2 = (wu - center.0).powi(2) + (wv - center.1).powi(2);
                w += height.height_at(t) * (-rho2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let p = if kappa.abs() < 1e-12 {
            Vector3::new(x, y, z0 + w)
        } else {
            let (sk, ck) = (kappa * x).sin_cos();
            Vector3::new(sk / kappa - w * sk, y, z0 + (1.0 - ck) / kappa + w * ck)
        };
        let (r, c) = self.poses[t.min(self.poses.len() - 1)];
        r * (p - self.center) + c
    }

    fn on_sheet(&self, m: (f64, f64)) -> bool {
        m.0.abs() <= self.cfg.sheet_half_extent.0 && m.1.abs() <= self.cfg.sheet_half_extent.1
    }
}

/// True surface position of material point `m` at frame `t`.
pub fn true_point(cfg: &SceneConfig, m: (f64, f64), t: usize) -> Vector3<f64> {
    Scene::new(cfg).point(m, t)
}

/// Analytic in-plane stretch `(xi_uu, xi_vv, xi_uv)` of the material at
/// `m` between frames `t0` and `t1`, expressed in the frame-`t0` tangent
/// basis.
///
/// Computed through the first fundamental form: with tangent matrices A
/// (at `t0`, in its own orthonormal basis) and the Gram matrix G of the
/// `t1` tangents, the stretch is the symmetric square root of
/// `A^-T G A^-1`. This route shares no code with the recovery-side polar
/// decomposition.
pub fn true_stretch(cfg: &SceneConfig, m: (f64, f64), t0: usize, t1: usize) -> (f64, f64, f64) {
    let scene = Scene::new(cfg);
    let h = 1e-3;
    let tangents = |t: usize| {
        let du = (scene.point((m.0 + h, m.1), t) - scene.point((m.0 - h, m.1), t)) / (2.0 * h);
        let dv = (scene.point((m.0, m.1 + h), t) - scene.point((m.0, m.1 - h), t)) / (2.0 * h);
        (du, dv)
    };
    let (a1, a2) = tangents(t0);
    let (b1, b2) = tangents(t1);
    let e1 = a1.normalize();
    let e2 = (a2 - e1 * a2.dot(&e1)).normalize();
    let a = Matrix2::new(a1.dot(&e1), a2.dot(&e1), 0.0, a2.dot(&e2));
    let g = Matrix2::new(b1.dot(&b1), b1.dot(&b2), b1.dot(&b2), b2.dot(&b2));
    let a_inv = a.try_inverse().expect("tangent frame is nondegenerate");
    let m2 = a_inv.transpose() * g * a_inv;
    // closed-form square root of a 2x2 SPD matrix
    let det_sqrt = (m2[(0, 0)] * m2[(1, 1)] - m2[(0, 1)] * m2[(1, 0)]).max(0.0).sqrt();
    let trace = m2[(0, 0)] + m2[(1, 1)];
    let denom = (trace + 2.0 * det_sqrt).sqrt();
    let u = (m2 + Matrix2::identity() * det_sqrt) / denom;
    (u[(0, 0)], u[(1, 1)], u[(0, 1)])
}

/// Largest absolute inter-frame principal strain over a coarse probe of
/// material points and frames.
fn max_interframe_strain(cfg: &SceneConfig) -> (f64, usize) {
    let stride = (cfg.width.max(cfg.height) / 32).max(2) as i32;
    let (hw, hh) = (cfg.width as i32 / 2, cfg.height as i32 / 2);
    let mut worst = (0.0f64, 0usize);
    for t in 0..cfg.frames.saturating_sub(1) {
        let mut v = -hh;
        while v <= hh {
            let mut u = -hw;
            while u <= hw {
                let (xu, xv, xuv) = true_stretch(cfg, (u as f64, v as f64), t, t + 1);
                let (e_uu, e_vv, e_uv) = (xu - 1.0, xv - 1.0, xuv);
                let mean = 0.5 * (e_uu + e_vv);
                let rad = (0.25 * (e_uu - e_vv).powi(2) + e_uv * e_uv).sqrt();
                let peak = (mean + rad).abs().max((mean - rad).abs());
                if peak > worst.0 {
                    worst = (peak, t);
                }
                u += stride;
            }
            v += stride;
        }
    }
    worst
}

// ===================== rendering =====================

/// Per-pixel material coordinates at one frame, found by Newton inversion
/// of the projection, scanned row-major with warm starts.
fn invert_frame(scene: &Scene, t: usize, domain: &GridDomain) -> Vec<Option<(f64, f64)>> {
    let k = &scene.cfg.intrinsics;
    let mut out = vec![None; domain.len()];
    let mut prev_row: Vec<Option<(f64, f64)>> = vec![None; domain.width];
    for row in 0..domain.height {
        let v = domain.offset.1 + row as i32;
        let mut last: Option<(f64, f64)> = None;
        for col in 0..domain.width {
            let u = domain.offset.0 + col as i32;
            let seed = last.or(prev_row[col]).unwrap_or((u as f64, v as f64));
            let m = newton_invert(scene, t, k, (u as f64, v as f64), seed);
            if let Some(m) = m {
                out[row * domain.width + col] = scene.on_sheet(m).then_some(m);
                last = Some(m);
            } else {
                last = None;
            }
            prev_row[col] = m;
        }
    }
    out
}

fn newton_invert(
    scene: &Scene,
    t: usize,
    k: &CameraIntrinsics,
    target: (f64, f64),
    seed: (f64, f64),
) -> Option<(f64, f64)> {
    let reach = 2.0 * (scene.cfg.sheet_half_extent.0 + scene.cfg.sheet_half_extent.1);
    let mut m = Vector2::new(seed.0, seed.1);
    let h = 1e-3;
    for _ in 0..15 {
        let (px, py) = k.project(&scene.point((m.x, m.y), t))?;
        let r = Vector2::new(px - target.0, py - target.1);
        if r.amax() < 1e-9 {
            return Some((m.x, m.y));
        }
        let proj = |mu: f64, mv: f64| -> Option<Vector2<f64>> {
            let (x, y) = k.project(&scene.point((mu, mv), t))?;
            Some(Vector2::new(x, y))
        };
        let ju = (proj(m.x + h, m.y)? - proj(m.x - h, m.y)?) / (2.0 * h);
        let jv = (proj(m.x, m.y + h)? - proj(m.x, m.y - h)?) / (2.0 * h);
        let jac = Matrix2::new(ju.x, jv.x, ju.y, jv.y);
        let step = jac.try_inverse()? * r;
        m -= step;
        if m.amax() > reach {
            return None;
        }
    }
    None
}

/// Procedural surface color tied to material coordinates.
fn texture_at(m: (f64, f64)) -> [f32; 3] {
    let (mu, mv) = m;
    let r = 0.5 + 0.35 * (0.9 * mu + 0.3).sin() * (0.7 * mv).cos();
    let g = 0.5 + 0.35 * (0.45 * mu - 1.1).sin() * (0.55 * mv + 0.4).sin();
    let b = 0.55 + 0.3 * (0.8 * mu).cos() * (0.35 * mv - 0.7).cos();
    [r.clamp(0.0, 1.0) as f32, g.clamp(0.0, 1.0) as f32, b.clamp(0.0, 1.0) as f32]
}

/// One generated frame: noisy measurements plus the noiseless point map.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub bundle: FrameBundle,
    pub truth_points: Point3Map,
}

/// Render the whole sequence.
///
/// Ground truth is recorded before noise; the occluder only sets the mask
/// and depth-bound entries and never blanks the underlying data, which the
/// pipeline is expected to discard via the mask.
pub fn generate(cfg: &SceneConfig) -> Result<Vec<SimFrame>, SimError> {
    if cfg.frames == 0 {
        return Err(SimError::BadConfig("frame count must be positive".into()));
    }
    if cfg.width < 2 || cfg.height < 2 {
        return Err(SimError::BadConfig("grid must be at least 2x2".into()));
    }
    if cfg.sigma_depth < 0.0 || cfg.sigma_flow < 0.0 {
        return Err(SimError::BadConfig("noise levels must be nonnegative".into()));
    }
    if !cfg.allow_large_strain {
        let (strain, frame) = max_interframe_strain(cfg);
        if strain > STRAIN_INVARIANT_LIMIT {
            return Err(SimError::StrainTooLarge { frame, strain });
        }
    }

    let scene = Scene::new(cfg);
    let domain = GridDomain::image_centered(cfg.width, cfg.height);
    let k = &cfg.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut materials = invert_frame(&scene, 0, &domain);
    for t in 0..cfg.frames {
        let next_materials =
            (t + 1 < cfg.frames).then(|| invert_frame(&scene, t + 1, &domain));

        let material_at =
            |u: i32, v: i32| materials[domain.index_of(u, v).expect("in domain")];
        let truth_points = RasterMap::from_fn(domain, 3, |u, v| {
            material_at(u, v).map(|m| {
                let p = scene.point(m, t);
                vec![p.x as f32, p.y as f32, p.z as f32]
            })
        });
        let texture =
            RasterMap::from_fn(domain, 3, |u, v| material_at(u, v).map(|m| texture_at(m).to_vec()));
        let flow_true = RasterMap::from_fn(domain, 2, |u, v| {
            let m = material_at(u, v)?;
            if t + 1 < cfg.frames {
                let (px, py) = k.project(&scene.point(m, t + 1))?;
                Some(vec![(px - u as f64) as f32, (py - v as f64) as f32])
            } else {
                Some(vec![0.0, 0.0])
            }
        });

        let mask = ParamSet::from_fn(domain, |u, v| {
            cfg.script.iter().any(|ev| match ev {
                Event::Occluder { center, radius, frames } => {
                    t >= frames.0
                        && t < frames.1
                        && (u as f64 - center.0).powi(2) + (v as f64 - center.1).powi(2)
                            <= radius * radius
                }
                _ => false,
            })
        });
        let pose = if mask.is_empty() {
            None
        } else {
            let mut z_bottom = RasterMap::undefined(domain, 1);
            for (u, v) in mask.iter() {
                if let Some(p) = truth_points.get3(u, v) {
                    z_bottom.set(u, v, &[(p.z - OCCLUDER_CLEARANCE_MM) as f32]);
                }
            }
            Some(InstrumentPose::Field(z_bottom))
        };

        // noise, drawn row-major over defined cells only
        let mut points = truth_points.clone();
        if cfg.sigma_depth > 0.0 {
            for (u, v) in truth_points.defined().clone().iter() {
                let p = truth_points.get3(u, v).unwrap();
                let delta: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.sigma_depth;
                points.set3(u, v, p * ((p.z + delta) / p.z));
            }
        }
        let mut flow = flow_true.clone();
        if cfg.sigma_flow > 0.0 && t + 1 < cfg.frames {
            for (u, v) in flow_true.defined().clone().iter() {
                let (fu, fv) = flow_true.get2(u, v).unwrap();
                let du: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.sigma_flow;
                let dv: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.sigma_flow;
                flow.set(u, v, &[(fu + du) as f32, (fv + dv) as f32]);
            }
        }

        frames.push(SimFrame {
            bundle: FrameBundle::new(points, flow, mask, texture, pose),
            truth_points,
        });
        if let Some(next) = next_materials {
            materials = next;
        }
    }
    Ok(frames)
}

// ===================== dataset io =====================

/// Sequence-level metadata written next to the frame directories.
/// Intrinsics are stored in image-pixel convention (principal point
/// relative to the top-left pixel).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Per-frame relative path of the instrument depth-bound map, when an
    /// occluder is present.
    pub pose: Vec<Option<String>>,
    pub config: SceneConfig,
}

fn frame_dir_name(t: usize) -> String {
    format!("frame_{t:06}")
}

/// Write the sequence as one directory per frame plus `manifest.json`.
pub fn write_dataset(
    frames: &[SimFrame],
    cfg: &SceneConfig,
    dir: &Path,
) -> Result<Manifest, SimError> {
    fs::create_dir_all(dir)?;
    let domain = GridDomain::image_centered(cfg.width, cfg.height);
    let mut pose_entries = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let sub = dir.join(frame_dir_name(t));
        fs::create_dir_all(&sub)?;
        frame.bundle.points.write_rtf(&sub.join("points.rtf"))?;
        frame.bundle.flow.write_rtf(&sub.join("flow.rtf"))?;
        write_mask_rtf(&frame.bundle.instrument_mask, &sub.join("mask.rtf"))?;
        frame.bundle.texture.write_rtf(&sub.join("texture.rtf"))?;
        frame.truth_points.write_rtf(&sub.join("truth_points.rtf"))?;
        match &frame.bundle.pose {
            Some(InstrumentPose::Field(map)) => {
                map.write_rtf(&sub.join("z_bottom.rtf"))?;
                pose_entries.push(Some(format!("{}/z_bottom.rtf", frame_dir_name(t))));
            }
            Some(InstrumentPose::Uniform { .. }) | None => pose_entries.push(None),
        }
    }
    let manifest = Manifest {
        width: cfg.width,
        height: cfg.height,
        frames: frames.len(),
        seed: cfg.seed,
        intrinsics: cfg.intrinsics.to_pixel_convention(&domain),
        pose: pose_entries,
        config: cfg.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

// ===================== evaluation =====================

/// Closest distance from `p` to triangle `(a, b, c)`.
fn point_triangle_distance(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (ap - ab * t).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (ap - ac * t).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * t).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let s = vb * denom;
    let t = vc * denom;
    (ap - ab * s - ac * t).norm()
}

const MSD_WINDOW: i32 = 8;

/// Distance from one recovered point to the truth surface near cell
/// `(u, v)`: the nearest triangle of the truth grid mesh within a
/// [`MSD_WINDOW`]-cell window, falling back to nearest truth points (the
/// whole map if the window is empty).
fn surface_distance(p: &Vector3<f64>, truth: &Point3Map, u: i32, v: i32) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut seen_any = false;
    for dv in -MSD_WINDOW..=MSD_WINDOW {
        for du in -MSD_WINDOW..=MSD_WINDOW {
            let (tu, tv) = (u + du, v + dv);
            let Some(p00) = truth.get3(tu, tv) else { continue };
            seen_any = true;
            let d = (p - p00).norm();
            if best.map_or(true, |b| d < b) {
                best = Some(d);
            }
            let p10 = truth.get3(tu + 1, tv);
            let p01 = truth.get3(tu, tv + 1);
            let p11 = truth.get3(tu + 1, tv + 1);
            if let (Some(p10), Some(p01), Some(p11)) = (p10, p01, p11) {
                let d1 = point_triangle_distance(p, &p00, &p10, &p11);
                let d2 = point_triangle_distance(p, &p00, &p11, &p01);
                let d = d1.min(d2);
                if best.map_or(true, |b| d < b) {
                    best = Some(d);
                }
            }
        }
    }
    if !seen_any {
        for (tu, tv) in truth.defined().iter() {
            let q = truth.get3(tu, tv).unwrap();
            let d = (p - q).norm();
            if best.map_or(true, |b| d < b) {
                best = Some(d);
            }
        }
    }
    best
}

/// Raw per-point error samples from one evaluation region, mergeable
/// across frames for pooled reporting.
#[derive(Debug, Clone, Default)]
pub struct EvalSamples {
    /// Sum of squared point-correspondence errors.
    pub sq_sum: f64,
    /// Number of correspondence pairs behind `sq_sum`.
    pub pairs: usize,
    /// Nearest-surface distance of every recovered point.
    pub distances: Vec<f64>,
}

impl EvalSamples {
    pub fn is_empty(&self) -> bool {
        self.pairs == 0 || self.distances.is_empty()
    }

    pub fn merge(&mut self, other: &EvalSamples) {
        self.sq_sum += other.sq_sum;
        self.pairs += other.pairs;
        self.distances.extend_from_slice(&other.distances);
    }

    /// `(rmse, msd, std)` of the collected samples.
    pub fn summarize(&self) -> Result<(f64, f64, f64), SimError> {
        if self.is_empty() {
            return Err(SimError::EmptyRegion);
        }
        let rmse = (self.sq_sum / self.pairs as f64).sqrt();
        let msd = self.distances.iter().sum::<f64>() / self.distances.len() as f64;
        let var = self.distances.iter().map(|d| (d - msd) * (d - msd)).sum::<f64>()
            / self.distances.len() as f64;
        Ok((rmse, msd, var.sqrt()))
    }
}

/// Collect evaluation samples over `region`: squared point errors where
/// both maps are defined, and the nearest-truth-surface distance of every
/// recovered point.
pub fn eval_samples(recovered: &Point3Map, truth: &Point3Map, region: &ParamSet) -> EvalSamples {
    let mut samples = EvalSamples::default();
    for (u, v) in region.iter() {
        let Some(r) = recovered.get3(u, v) else { continue };
        if let Some(t) = truth.get3(u, v) {
            samples.sq_sum += (r - t).norm_squared();
            samples.pairs += 1;
        }
        if let Some(d) = surface_distance(&r, truth, u, v) {
            samples.distances.push(d);
        }
    }
    samples
}

/// Root-mean-square point error and mean surface distance (with standard
/// deviation) of the recovered map against the truth, over `region`.
///
/// RMSE pairs cells defined in both maps; MSD measures each recovered
/// point in `region` against the truth grid mesh.
pub fn eval_rmse_msd(
    recovered: &Point3Map,
    truth: &Point3Map,
    region: &ParamSet,
) -> Result<(f64, f64, f64), SimError> {
    eval_samples(recovered, truth, region).summarize()
}

/// Group map cells by whether they fall inside a region, for split
/// reporting. Returns (inside, outside) partitions of `cells`.
pub fn split_region(cells: &ParamSet, region: &ParamSet) -> (ParamSet, ParamSet) {
    let inside = cells.intersection(region);
    let outside = cells.difference(region);
    (inside, outside)
}

// ===================== tests =====================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::scene_flow;
    use approx::assert_relative_eq;
    use std::collections::BTreeSet;

    fn static_config(frames: usize) -> SceneConfig {
        SceneConfig {
            width: 16,
            height: 16,
            intrinsics: CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 0.0, cy: 0.0 },
            sheet: Sheet::Plane { z0: 100.0 },
            sheet_half_extent: (48.0, 48.0),
            script: Vec::new(),
            frames,
            sigma_depth: 0.0,
            sigma_flow: 0.0,
            seed: 11,
            allow_large_strain: false,
        }
    }

    #[test]
    fn empty_script_repeats_the_frame_with_zero_flow() {
        let cfg = static_config(3);
        let frames = generate(&cfg).unwrap();
        assert_eq!(frames.len(), 3);
        for f in &frames {
            for (u, v) in f.truth_points.defined().iter() {
                let a = f.truth_points.get3(u, v).unwrap();
                let b = frames[0].truth_points.get3(u, v).unwrap();
                assert_eq!(a, b);
                let (fu, fv) = f.bundle.flow.get2(u, v).unwrap();
                assert!(fu.abs() < 1e-9 && fv.abs() < 1e-9, "flow ({fu},{fv})");
            }
            assert!(f.bundle.instrument_mask.is_empty());
            assert!(f.bundle.pose.is_none());
        }
    }

    #[test]
    fn stretch_ground_truth_matches_the_closed_form() {
        let mut cfg = static_config(6);
        cfg.script = vec![Event::UniaxialStretch {
            axis: Axis::U,
            rate: 0.01,
            core_half_width: 10.0,
            ramp_width: 8.0,
        }];
        let (xu, xv, xuv) = true_stretch(&cfg, (2.0, 1.0), 0, 5);
        assert_relative_eq!(xu, 1.01f64.powi(5), epsilon = 1e-9);
        assert_relative_eq!(xv, 1.0, epsilon = 1e-9);
        assert_relative_eq!(xuv, 0.0, epsilon = 1e-9);
        // far field keeps rest spacing
        let (xu, _, _) = true_stretch(&cfg, (30.0, 0.0), 0, 5);
        assert_relative_eq!(xu, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rigid_motion_has_identity_ground_truth_stretch() {
        let mut cfg = static_config(4);
        cfg.script = vec![Event::RigidSceneMotion {
            translation: [0.5, -0.2, 0.3],
            rotation: [0.01, 0.02, -0.015],
            frames: (0, usize::MAX),
        }];
        for m in [(0.0, 0.0), (5.0, -3.0), (-7.5, 6.25)] {
            let (xu, xv, xuv) = true_stretch(&cfg, m, 0, 3);
            assert_relative_eq!(xu, 1.0, epsilon = 1e-9);
            assert_relative_eq!(xv, 1.0, epsilon = 1e-9);
            assert_relative_eq!(xuv, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn generated_flow_is_consistent_with_the_point_maps() {
        // in-plane stretch of a fronto-parallel plane: point maps stay
        // linear, so interior consistency holds to well under a
        // micrometer even through f32 map storage
        let mut cfg = static_config(3);
        cfg.width = 24;
        cfg.height = 24;
        cfg.intrinsics = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 0.0, cy: 0.0 };
        cfg.script = vec![Event::UniaxialStretch {
            axis: Axis::U,
            rate: 0.01,
            core_half_width: 20.0,
            ramp_width: 10.0,
        }];
        let frames = generate(&cfg).unwrap();
        let scene = Scene::new(&cfg);
        let measured =
            scene_flow(&frames[0].truth_points, &frames[1].truth_points, &frames[0].bundle.flow);
        let inv = invert_frame(&scene, 0, frames[0].truth_points.domain());
        let domain = *frames[0].truth_points.domain();
        let mut checked = 0;
        for (u, v) in measured.defined().iter() {
            if u.abs() > 3 || v.abs() > 3 {
                continue;
            }
            let m = inv[domain.index_of(u, v).unwrap()].unwrap();
            let truth_d = scene.point(m, 1) - scene.point(m, 0);
            let got = measured.get3(u, v).unwrap();
            assert!(
                (got - truth_d).amax() < 1e-6,
                "cell ({u},{v}): {got:?} vs {truth_d:?}"
            );
            checked += 1;
        }
        assert!(checked >= 40);
    }

    #[test]
    fn extraction_route_agrees_with_the_metric_route() {
        let mut cfg = static_config(8);
        cfg.script = vec![
            Event::UniaxialStretch {
                axis: Axis::U,
                rate: 0.012,
                core_half_width: 8.0,
                ramp_width: 6.0,
            },
            Event::Bump {
                center: (3.0, -2.0),
                sigma: 6.0,
                height: HeightProfile { peak: 1.0, press: (1, 6), release: None },
            },
        ];
        let scene = Scene::new(&cfg);
        let h = 1e-3;
        for (m, t0, t1) in [
            ((0.0, 0.0), 0, 5),
            ((3.0, -2.0), 2, 6),
            ((10.0, 4.0), 0, 7),
            ((-6.0, -5.0), 1, 4),
        ] {
            let tangents = |t: usize| {
                crate::surfgeom::TangentPair::new(
                    (scene.point((m.0 + h, m.1), t) - scene.point((m.0 - h, m.1), t))
                        / (2.0 * h),
                    (scene.point((m.0, m.1 + h), t) - scene.point((m.0, m.1 - h), t))
                        / (2.0 * h),
                )
            };
            let extracted =
                crate::surfgeom::extract_local_deformation(&tangents(t0), &tangents(t1))
                    .unwrap();
            let (xu, xv, xuv) = true_stretch(&cfg, m, t0, t1);
            assert_relative_eq!(extracted.xi.0, xu, epsilon = 1e-5);
            assert_relative_eq!(extracted.xi.1, xv, epsilon = 1e-5);
            assert_relative_eq!(extracted.xi.2, xuv, epsilon = 1e-5);
        }
    }

    #[test]
    fn strain_invariant_rejects_hot_configs_unless_overridden() {
        let mut cfg = static_config(3);
        cfg.script = vec![Event::UniaxialStretch {
            axis: Axis::U,
            rate: 0.12,
            core_half_width: 10.0,
            ramp_width: 6.0,
        }];
        match generate(&cfg) {
            Err(SimError::StrainTooLarge { strain, .. }) => assert!(strain > 0.1),
            other => panic!("expected strain rejection, got {other:?}"),
        }
        cfg.allow_large_strain = true;
        assert!(generate(&cfg).is_ok());
    }

    #[test]
    fn occluder_sets_mask_and_depth_bound() {
        let mut cfg = static_config(4);
        cfg.script = vec![
            Event::Bump {
                center: (0.0, 0.0),
                sigma: 5.0,
                height: HeightProfile { peak: 1.0, press: (0, 2), release: None },
            },
            Event::Occluder { center: (0.0, 0.0), radius: 3.0, frames: (1, 4) },
        ];
        let frames = generate(&cfg).unwrap();
        assert!(frames[0].bundle.instrument_mask.is_empty());
        let f = &frames[2];
        assert!(f.bundle.instrument_mask.contains(0, 0));
        assert!(!f.bundle.instrument_mask.contains(5, 0));
        let Some(InstrumentPose::Field(zb)) = &f.bundle.pose else {
            panic!("expected a field pose");
        };
        let z_true = f.truth_points.get3(0, 0).unwrap().z;
        let bound = zb.get(0, 0).unwrap()[0] as f64;
        assert_relative_eq!(bound, z_true - OCCLUDER_CLEARANCE_MM, epsilon = 1e-5);
        // the bump presses away from the camera
        assert!(z_true > 100.5, "bump center at {z_true}");
    }

    #[test]
    fn datasets_are_deterministic_per_seed() {
        let mut cfg = static_config(2);
        cfg.sigma_depth = 0.1;
        cfg.sigma_flow = 0.2;
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_dataset(&generate(&cfg).unwrap(), &cfg, dir_a.path()).unwrap();
        write_dataset(&generate(&cfg).unwrap(), &cfg, dir_b.path()).unwrap();
        for name in ["points", "flow", "mask", "texture", "truth_points"] {
            let rel = format!("frame_000001/{name}.rtf");
            let a = std::fs::read(dir_a.path().join(&rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
        }
        let mut other = cfg.clone();
        other.seed = cfg.seed + 1;
        let dir_c = tempfile::tempdir().unwrap();
        write_dataset(&generate(&other).unwrap(), &other, dir_c.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("frame_000000/points.rtf")).unwrap();
        let c = std::fs::read(dir_c.path().join("frame_000000/points.rtf")).unwrap();
        assert_ne!(a, c, "different seeds produced identical noise");
    }

    #[test]
    fn dataset_layout_matches_the_contract() {
        let cfg = static_config(3);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&generate(&cfg).unwrap(), &cfg, dir.path()).unwrap();
        assert_eq!(manifest.frames, 3);
        for t in 0..3 {
            for name in ["points", "flow", "mask", "texture", "truth_points"] {
                let p = dir.path().join(format!("frame_{t:06}/{name}.rtf"));
                assert!(p.is_file(), "missing {p:?}");
            }
        }
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.width, 16);
        assert_eq!(back.pose.len(), 3);
        // manifest intrinsics use pixel convention: principal point at the
        // image center of a 16x16 grid
        assert_relative_eq!(back.intrinsics.cx, 8.0, epsilon = 1e-12);
        let map = RasterMap::read_rtf(&dir.path().join("frame_000000/points.rtf")).unwrap();
        for (u, v) in map.defined().iter() {
            assert_eq!(map.get3(u, v), generate(&cfg).unwrap()[0].bundle.points.get3(u, v));
        }
    }

    #[test]
    fn eval_is_zero_on_exact_recovery_and_sees_constant_offsets() {
        let cfg = static_config(1);
        let frames = generate(&cfg).unwrap();
        let truth = &frames[0].truth_points;
        let region = truth.defined().clone();
        let (rmse, msd, std) = eval_rmse_msd(truth, truth, &region).unwrap();
        assert_eq!((rmse, msd, std), (0.0, 0.0, 0.0));
        let mut offset = truth.clone();
        for (u, v) in truth.defined().clone().iter() {
            let p = truth.get3(u, v).unwrap();
            offset.set3(u, v, p + Vector3::new(0.0, 0.0, 1.0));
        }
        let (rmse, msd, std) = eval_rmse_msd(&offset, truth, &region).unwrap();
        assert_relative_eq!(rmse, 1.0, epsilon = 1e-5);
        assert_relative_eq!(msd, 1.0, epsilon = 1e-5);
        assert!(std < 1e-5);
    }

    #[test]
    fn toy_msd_matches_brute_force_nearest_points() {
        let d = GridDomain::new(4, 1, (0, 0));
        let mut truth = RasterMap::undefined(d, 3);
        truth.set3(0, 0, Vector3::new(0.0, 0.0, 0.0));
        truth.set3(1, 0, Vector3::new(4.0, 0.0, 0.0));
        let mut rec = RasterMap::undefined(d, 3);
        rec.set3(0, 0, Vector3::new(0.0, 1.0, 0.0));
        rec.set3(1, 0, Vector3::new(3.0, 0.0, 0.0));
        rec.set3(2, 0, Vector3::new(10.0, 0.0, 0.0));
        let region = rec.defined().clone();
        let (_, msd, _) = eval_rmse_msd(&rec, &truth, &region).unwrap();
        let expect = (1.0 + 1.0 + 6.0) / 3.0;
        assert_relative_eq!(msd, expect, epsilon = 1e-12);
    }

    #[test]
    fn scenario_presets_cover_the_documented_names() {
        let names: BTreeSet<&str> = SCENARIO_NAMES.into_iter().collect();
        assert_eq!(names.len(), 5);
        for name in SCENARIO_NAMES {
            let cfg = scenario(name, None, 3).unwrap();
            assert!(cfg.frames >= 2, "{name} too short");
        }
        assert!(scenario("warp_core", None, 3).is_none());
        let pal = scenario("palpation", Some(10), 3).unwrap();
        assert!(pal.script.iter().any(|e| matches!(e, Event::Occluder { .. })));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = scenario("palpation", None, 9).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SceneConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.width, cfg.width);
        assert_eq!(back.frames, cfg.frames);
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.script.len(), cfg.script.len());
    }
}
