//! Online recovery of tissue surface deformation from stereo video, with no
//! camera pose input.
//!
//! The engine keeps a *canonical* model of everything it has seen: a 2D grid
//! of surface points with tangent derivatives and texture, addressed by
//! integer canonical coordinates that extend past the image borders as the
//! camera moves. Each new frame contributes per-pixel 3D points and optical
//! flow; the engine measures local deformation, rejects implausible
//! measurements with a principal-strain gate, diffuses deformation across
//! occluded and out-of-view regions, deforms the canonical geometry, and
//! re-parameterizes it through the camera so the grid stays aligned with the
//! current view. Strain tracking composes the recovered motion over long
//! horizons.
//!
//! Modules follow the data path:
//!
//! - [`rastermap`]: grids, defined-ness, bilinear sampling, and the RTF
//!   container format used for every map on disk.
//! - [`surfgeom`]: tangent-frame extraction, the rotation + in-plane stretch
//!   deformation model, and strain conversions.
//! - [`measure`]: per-frame inputs (points, flow, instrument mask, pose) and
//!   the inter-frame deformation measurements derived from them.
//! - [`recover`]: the canonical state and the per-frame update: outlier
//!   detection, the two regularized solves, reparameterization, fusion.
//! - [`straintrack`]: long-horizon point tracking and accumulated strain.
//! - [`simcam`]: an analytic scene generator with exact ground truth, plus
//!   RMSE/MSD evaluation.
//! - [`driver`]: dataset layout, the online loop, and the exporters behind
//!   the `defrec` binary (`simulate | run | eval`).
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --release --example rtf_maps          # grids, sampling, RTF round trips
//! cargo run --release --example local_deformation # extract/apply stretch and rotation
//! cargo run --release --example simulate_scene    # write a synthetic dataset to disk
//! cargo run --release --example recover_sequence  # full online recovery, in memory
//! cargo run --release --example occlusion_pose    # instrument occlusion with/without pose
//! cargo run --release --example pan_and_fuse      # leave the field of view and return
//! cargo run --release --example strain_tracking   # accumulated strain over 30 frames
//! ```

pub mod driver;
pub mod measure;
pub mod rastermap;
pub mod recover;
pub mod simcam;
pub mod solver;
pub mod straintrack;
pub mod surfgeom;

pub use measure::{CameraIntrinsics, FrameBundle, InstrumentPose};
pub use rastermap::{GridDomain, ParamSet, RasterMap};
pub use recover::{CanonicalState, RecoveredDeformation, StepConfig, StepOutput};
pub use surfgeom::{LocalDeformation, SurfaceStrain};
