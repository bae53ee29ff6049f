//! Dataset-to-recovery orchestration: loading simulated (or converted)
//! sequences, running the per-frame pipeline, and exporting meshes,
//! strain tables, and metrics.
//!
//! A dataset is a directory of `frame_%06d/` subdirectories plus a
//! `manifest.json`, as produced by [`crate::simcam::write_dataset`]. The
//! run writes one `recovered_%06d.rtf` canonical point map per processed
//! frame into the output directory, with optional PLY meshes, a strain
//! CSV, and a `metrics.json` when ground truth is available.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::measure::{
    dilate, mask_out_instrument, FrameBundle, InstrumentPose, MASK_DILATION_PX,
};
use crate::rastermap::{
    read_mask_rtf, Dtype, GridDomain, ParamSet, Point3Map, RasterError, RasterMap,
};
use crate::recover::{init_state, step, CanonicalState, RecoverError, StepConfig};
use crate::simcam::{
    self, eval_samples, scenario, EvalSamples, Manifest, SimError, SCENARIO_NAMES,
};
use crate::straintrack::{
    accumulative_deformation, advance_tracks, canonical_flow, strain_rows, TrackSet,
    STRAIN_CSV_HEADER,
};

// ===================== errors =====================

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unknown scenario {0:?}; valid names: {}", SCENARIO_NAMES.join(", "))]
    UnknownScenario(String),
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error("run has {found} recovered frames but the dataset has {expected}")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("frame range {0}..{1} selects no steps")]
    EmptyRange(usize, usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Recover(#[from] RecoverError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl DriverError {
    /// Process exit status for this failure; missing input files are
    /// distinguished as 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::MissingFile(_) => 2,
            _ => 1,
        }
    }
}

// ===================== run configuration =====================

/// Everything a recovery run needs. Mirrored one-to-one by the JSON
/// config file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_strain_gate")]
    pub strain_gate: f64,
    #[serde(default)]
    pub use_pose: bool,
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    /// Half-open dataset frame range to process; whole sequence if absent.
    #[serde(default)]
    pub frame_range: Option<(usize, usize)>,
    #[serde(default)]
    pub export_ply: bool,
    #[serde(default)]
    pub export_strain_csv: bool,
    #[serde(default = "default_true")]
    pub export_metrics_json: bool,
}

fn default_alpha() -> f64 {
    200.0
}

fn default_strain_gate() -> f64 {
    0.1
}

fn default_downsample() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(input_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            alpha: default_alpha(),
            strain_gate: default_strain_gate(),
            use_pose: false,
            downsample: default_downsample(),
            frame_range: None,
            export_ply: false,
            export_strain_csv: false,
            export_metrics_json: true,
        }
    }

    fn validate(&self) -> Result<(), DriverError> {
        if !(self.alpha > 0.0) {
            return Err(DriverError::BadConfig("alpha must be positive".into()));
        }
        if !(self.strain_gate > 0.0 && self.strain_gate < 1.0) {
            return Err(DriverError::BadConfig("strain gate must lie in (0, 1)".into()));
        }
        if self.downsample < 1 {
            return Err(DriverError::BadConfig("downsample stride must be at least 1".into()));
        }
        Ok(())
    }
}

// ===================== dataset loading =====================

fn require(path: PathBuf) -> Result<PathBuf, DriverError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(DriverError::MissingFile(path))
    }
}

/// Read and parse `manifest.json` from a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<Manifest, DriverError> {
    let path = require(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn frame_dir(dataset: &Path, t: usize) -> PathBuf {
    dataset.join(format!("frame_{t:06}"))
}

/// One dataset frame: measurements plus ground truth when present.
pub struct LoadedFrame {
    pub bundle: FrameBundle,
    pub truth: Option<Point3Map>,
}

/// Load frame `t`, downsampled by `stride`. Required files missing map to
/// [`DriverError::MissingFile`]; a missing `truth_points.rtf` just leaves
/// the truth out.
pub fn load_frame(
    dataset: &Path,
    manifest: &Manifest,
    t: usize,
    stride: usize,
) -> Result<LoadedFrame, DriverError> {
    let dir = frame_dir(dataset, t);
    let points = RasterMap::read_rtf_expect(&require(dir.join("points.rtf"))?, Dtype::F32)?;
    let flow = RasterMap::read_rtf_expect(&require(dir.join("flow.rtf"))?, Dtype::F32)?;
    let mask = read_mask_rtf(&require(dir.join("mask.rtf"))?)?;
    let texture = RasterMap::read_rtf_expect(&require(dir.join("texture.rtf"))?, Dtype::F32)?;
    let pose = match manifest.pose.get(t).and_then(|p| p.as_ref()) {
        Some(rel) => {
            let map = RasterMap::read_rtf_expect(&require(dataset.join(rel))?, Dtype::F32)?;
            Some(InstrumentPose::Field(subsample_map(&map, stride, 1.0)))
        }
        None => None,
    };
    let truth_path = dir.join("truth_points.rtf");
    let truth = if truth_path.is_file() {
        Some(subsample_map(&RasterMap::read_rtf_expect(&truth_path, Dtype::F32)?, stride, 1.0))
    } else {
        None
    };
    let bundle = FrameBundle::new(
        subsample_map(&points, stride, 1.0),
        subsample_map(&flow, stride, 1.0 / stride as f64),
        subsample_set(&mask, stride),
        subsample_map(&texture, stride, 1.0),
        pose,
    );
    Ok(LoadedFrame { bundle, truth })
}

/// Every `stride`-th cell of a map, optionally scaling values (for flow,
/// whose units are source pixels).
fn subsample_map(map: &RasterMap, stride: usize, scale: f64) -> RasterMap {
    if stride == 1 && scale == 1.0 {
        return map.clone();
    }
    let d = map.domain();
    let nd = GridDomain::image_centered(d.width / stride, d.height / stride);
    let s = stride as i32;
    RasterMap::from_fn(nd, map.channels(), |u, v| {
        map.get(u * s, v * s)
            .map(|vals| vals.iter().map(|&x| (x as f64 * scale) as f32).collect())
    })
}

fn subsample_set(set: &ParamSet, stride: usize) -> ParamSet {
    if stride == 1 {
        return set.clone();
    }
    let d = set.domain();
    let nd = GridDomain::image_centered(d.width / stride, d.height / stride);
    let s = stride as i32;
    ParamSet::from_fn(nd, |u, v| set.contains(u * s, v * s))
}

// ===================== metrics =====================

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RegionMetrics {
    pub rmse: f64,
    pub msd: f64,
    pub std: f64,
}

fn region_metrics(samples: &EvalSamples) -> Option<RegionMetrics> {
    samples.summarize().ok().map(|(rmse, msd, std)| RegionMetrics { rmse, msd, std })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Canonical cells after this frame's update.
    pub points: usize,
    pub solve_ms: f64,
    pub remap_ms: f64,
    pub cg_iterations: usize,
    pub non_occluded: Option<RegionMetrics>,
    pub occluded: Option<RegionMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub non_occluded: Option<RegionMetrics>,
    pub occluded: Option<RegionMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
    pub timing_ms: f64,
}

/// Evaluate one recovered map against truth, split into non-occluded and
/// occluded regions by the dilated instrument mask.
fn eval_frame(
    recovered: &Point3Map,
    truth: &Point3Map,
    mask: &ParamSet,
) -> (EvalSamples, EvalSamples) {
    let occluded_region = dilate(mask, MASK_DILATION_PX);
    let all = truth.defined();
    let non_occ = all.difference(&occluded_region);
    let occ = all.intersection(&occluded_region);
    (eval_samples(recovered, truth, &non_occ), eval_samples(recovered, truth, &occ))
}

// ===================== exports =====================

/// Write the canonical surface as an ASCII PLY mesh: one vertex per
/// defined cell with its texture color, two triangles per fully defined
/// 2x2 quad.
pub fn write_ply(state: &CanonicalState, path: &Path) -> Result<(), DriverError> {
    let params = state.params();
    let domain = *params.domain();
    let mut index = vec![u32::MAX; domain.len()];
    let mut vertices = Vec::with_capacity(params.len());
    for (u, v) in params.iter() {
        index[domain.index_of(u, v).unwrap()] = vertices.len() as u32;
        let p = state.points().get3(u, v).unwrap();
        let c = state.texture().get(u, v).map_or([0.5f32; 3], |t| [t[0], t[1], t[2]]);
        let to_u8 = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        vertices.push((p, [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]));
    }
    let at = |u: i32, v: i32| {
        domain
            .index_of(u, v)
            .map(|i| index[i])
            .filter(|&i| i != u32::MAX)
    };
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (u, v) in params.iter() {
        if let (Some(a), Some(b), Some(c), Some(d)) =
            (at(u, v), at(u + 1, v), at(u, v + 1), at(u + 1, v + 1))
        {
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str(&format!("element face {}\n", faces.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (p, c) in &vertices {
        out.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, c[0], c[1], c[2]));
    }
    for f in &faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

fn recovered_name(t: usize) -> String {
    format!("recovered_{t:06}.rtf")
}

// ===================== run =====================

/// Result of a full recovery run.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub frames_processed: usize,
}

/// Run the recovery pipeline over a dataset directory.
///
/// Writes `recovered_%06d.rtf` per processed frame (dataset frame
/// numbering), plus the exports the config asks for. Returns the metrics
/// that were (or would be) written.
pub fn cmd_run(config: &RunConfig) -> Result<RunOutput, DriverError> {
    config.validate()?;
    let manifest = load_manifest(&config.input_dir)?;
    let (first, last) = match config.frame_range {
        Some((a, b)) => (a, b.min(manifest.frames)),
        None => (0, manifest.frames),
    };
    if first >= last {
        return Err(DriverError::EmptyRange(first, last));
    }
    fs::create_dir_all(&config.output_dir)?;

    let image_domain = GridDomain::image_centered(
        manifest.width / config.downsample,
        manifest.height / config.downsample,
    );
    let k = manifest
        .intrinsics
        .downsampled(config.downsample)
        .canonicalized(&image_domain);
    let step_config = StepConfig {
        alpha: config.alpha,
        strain_gate: config.strain_gate,
        use_pose: config.use_pose,
    };

    let run_start = Instant::now();
    let mut per_frame = Vec::new();
    let mut agg_non_occ = EvalSamples::default();
    let mut agg_occ = EvalSamples::default();
    let mut strain_csv: Option<fs::File> = if config.export_strain_csv {
        let mut f = fs::File::create(config.output_dir.join("strain.csv"))?;
        writeln!(f, "{STRAIN_CSV_HEADER}")?;
        Some(f)
    } else {
        None
    };

    let first_frame = load_frame(&config.input_dir, &manifest, first, config.downsample)?;
    let mut masked = mask_out_instrument(&first_frame.bundle);
    let mut state = init_state(&masked)?;
    let mut tracks = TrackSet::seed_from(state.params(), first);
    let start_points = state.points().clone();

    let record = |state: &CanonicalState,
                      frame: &LoadedFrame,
                      t: usize,
                      solve_ms: f64,
                      remap_ms: f64,
                      cg: usize,
                      tracks: &TrackSet,
                      strain_csv: &mut Option<fs::File>,
                      agg_non_occ: &mut EvalSamples,
                      agg_occ: &mut EvalSamples|
     -> Result<FrameMetrics, DriverError> {
        state.points().write_rtf(&config.output_dir.join(recovered_name(t)))?;
        if config.export_ply {
            write_ply(state, &config.output_dir.join(format!("mesh_{t:06}.ply")))?;
        }
        if let Some(csv) = strain_csv {
            if t > first {
                let (disp, local) = accumulative_deformation(&start_points, state, tracks);
                for row in strain_rows(t, &start_points, &disp, &local) {
                    writeln!(csv, "{}", row.csv_line())?;
                }
            }
        }
        let (non_occluded, occluded) = match &frame.truth {
            Some(truth) => {
                let (non_occ, occ) =
                    eval_frame(state.points(), truth, &frame.bundle.instrument_mask);
                agg_non_occ.merge(&non_occ);
                agg_occ.merge(&occ);
                (region_metrics(&non_occ), region_metrics(&occ))
            }
            None => (None, None),
        };
        Ok(FrameMetrics {
            frame: t,
            points: state.params().len(),
            solve_ms,
            remap_ms,
            cg_iterations: cg,
            non_occluded,
            occluded,
        })
    };

    per_frame.push(record(
        &state,
        &first_frame,
        first,
        0.0,
        0.0,
        0,
        &tracks,
        &mut strain_csv,
        &mut agg_non_occ,
        &mut agg_occ,
    )?);
    drop(first_frame);

    for t in first..last - 1 {
        let next = load_frame(&config.input_dir, &manifest, t + 1, config.downsample)?;
        let next_masked = mask_out_instrument(&next.bundle);
        let out = step(&state, &masked, &next_masked, &k, &step_config)?;
        let flow = canonical_flow(&out.deformation, &state, &k);
        tracks = advance_tracks(&tracks, &flow);
        state = out.state;
        log::info!(
            "frame {}: {} points, solve {:.2} ms, remap {:.2} ms, {} cg iterations",
            t + 1,
            state.params().len(),
            out.stats.solve_ms,
            out.stats.remap_ms,
            out.stats.cg_iterations
        );
        per_frame.push(record(
            &state,
            &next,
            t + 1,
            out.stats.solve_ms,
            out.stats.remap_ms,
            out.stats.cg_iterations,
            &tracks,
            &mut strain_csv,
            &mut agg_non_occ,
            &mut agg_occ,
        )?);
        masked = next_masked;
    }

    let metrics = Metrics {
        per_frame,
        aggregate: AggregateMetrics {
            non_occluded: region_metrics(&agg_non_occ),
            occluded: region_metrics(&agg_occ),
        },
        timing_ms: run_start.elapsed().as_secs_f64() * 1e3,
    };
    if config.export_metrics_json {
        let mut text = serde_json::to_string_pretty(&metrics)?;
        text.push('\n');
        fs::write(config.output_dir.join("metrics.json"), text)?;
    }
    Ok(RunOutput { frames_processed: last - first, metrics })
}

// ===================== eval =====================

/// Re-evaluate a finished run's recovered maps against the dataset's
/// ground truth, printing per-frame and aggregate rows and writing
/// `metrics_eval.json` into the run directory.
pub fn cmd_eval(run_dir: &Path, dataset_dir: &Path) -> Result<Metrics, DriverError> {
    let manifest = load_manifest(dataset_dir)?;
    let mut found = 0;
    while run_dir.join(recovered_name(found)).is_file() {
        found += 1;
    }
    if found != manifest.frames {
        return Err(DriverError::FrameCountMismatch { expected: manifest.frames, found });
    }

    let first = RasterMap::read_rtf_expect(&run_dir.join(recovered_name(0)), Dtype::F32)?;
    let stride = (manifest.width / first.domain().width).max(1);

    let mut per_frame = Vec::new();
    let mut agg_non_occ = EvalSamples::default();
    let mut agg_occ = EvalSamples::default();
    for t in 0..manifest.frames {
        let recovered =
            RasterMap::read_rtf_expect(&run_dir.join(recovered_name(t)), Dtype::F32)?;
        let dir = frame_dir(dataset_dir, t);
        let truth = subsample_map(
            &RasterMap::read_rtf_expect(&require(dir.join("truth_points.rtf"))?, Dtype::F32)?,
            stride,
            1.0,
        );
        let mask = subsample_set(&read_mask_rtf(&require(dir.join("mask.rtf"))?)?, stride);
        let (non_occ, occ) = eval_frame(&recovered, &truth, &mask);
        agg_non_occ.merge(&non_occ);
        agg_occ.merge(&occ);
        let fm = FrameMetrics {
            frame: t,
            points: recovered.defined().len(),
            solve_ms: 0.0,
            remap_ms: 0.0,
            cg_iterations: 0,
            non_occluded: region_metrics(&non_occ),
            occluded: region_metrics(&occ),
        };
        println!("{}", format_metrics_row(&fm));
        per_frame.push(fm);
    }
    let metrics = Metrics {
        per_frame,
        aggregate: AggregateMetrics {
            non_occluded: region_metrics(&agg_non_occ),
            occluded: region_metrics(&agg_occ),
        },
        timing_ms: 0.0,
    };
    println!("{}", format_aggregate(&metrics.aggregate));
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    fs::write(run_dir.join("metrics_eval.json"), text)?;
    Ok(metrics)
}

fn format_region(m: &Option<RegionMetrics>) -> String {
    match m {
        Some(r) => format!("rmse {:.4} msd {:.4} +/- {:.4}", r.rmse, r.msd, r.std),
        None => "no samples".to_string(),
    }
}

/// One printable per-frame metrics row.
pub fn format_metrics_row(fm: &FrameMetrics) -> String {
    format!(
        "frame {:4}  non-occluded: {}  occluded: {}",
        fm.frame,
        format_region(&fm.non_occluded),
        format_region(&fm.occluded)
    )
}

/// Printable aggregate metrics block.
pub fn format_aggregate(agg: &AggregateMetrics) -> String {
    format!(
        "aggregate   non-occluded: {}  occluded: {}",
        format_region(&agg.non_occluded),
        format_region(&agg.occluded)
    )
}

// ===================== simulate =====================

/// Source for `simulate`: a named preset or a JSON scene config file.
pub enum SimSource<'a> {
    Scenario { name: &'a str, frames: Option<usize>, seed: u64 },
    ConfigFile(&'a Path),
}

/// Generate a synthetic dataset into `out_dir`.
pub fn cmd_simulate(source: SimSource, out_dir: &Path) -> Result<Manifest, DriverError> {
    let config = match source {
        SimSource::Scenario { name, frames, seed } => scenario(name, frames, seed)
            .ok_or_else(|| DriverError::UnknownScenario(name.to_string()))?,
        SimSource::ConfigFile(path) => {
            serde_json::from_str(&fs::read_to_string(require(path.to_path_buf())?)?)?
        }
    };
    let frames = simcam::generate(&config)?;
    Ok(simcam::write_dataset(&frames, &config, out_dir)?)
}

// ===================== tests =====================
