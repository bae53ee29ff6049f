//! Long-horizon point tracking and accumulative strain extraction.
//!
//! A [`TrackSet`] pins one tracked point to every cell of a start-frame
//! parameter set and advances the points frame by frame through the
//! canonical optical flow induced by each recovered displacement. Once the
//! tracks have crossed any number of frames, [`accumulative_deformation`]
//! reads off the start-to-current displacement and local deformation in a
//! single extraction, so long-horizon strain does not accumulate
//! per-step linearization error.
//!
//! Strain is reported in the start-frame tangent basis of each cell.

use nalgebra::Vector3;

use crate::measure::CameraIntrinsics;
use crate::rastermap::{Disp3Map, Flow2Map, LocalDefMap, ParamSet, Point3Map, RasterMap};
use crate::recover::{CanonicalState, RecoveredDeformation};
use crate::surfgeom::{
    derivative_map, extract_local_deformation, principal_strain, stretch_to_strain,
    LocalDeformation, SurfaceStrain, TangentPair,
};

// ===================== track set =====================

/// A set of points tracked across frames at continuous canonical
/// coordinates.
///
/// Each point is seeded at the center of one cell of the start frame's
/// parameter set and keeps that cell as its identity. Points die when the
/// flow under them becomes undefined; dead points never revive and their
/// coordinates freeze at the last live position.
#[derive(Debug, Clone)]
pub struct TrackSet {
    start_frame: usize,
    frame: usize,
    seed: ParamSet,
    coords: Vec<(f64, f64)>,
    alive: Vec<bool>,
}

impl TrackSet {
    /// Seed one track per cell of `set`, at the cell's own coordinates.
    pub fn seed_from(set: &ParamSet, frame: usize) -> TrackSet {
        let coords: Vec<(f64, f64)> = set.iter().map(|(u, v)| (u as f64, v as f64)).collect();
        let alive = vec![true; coords.len()];
        TrackSet { start_frame: frame, frame, seed: set.clone(), coords, alive }
    }

    /// Frame the tracks were seeded at.
    pub fn start_frame(&self) -> usize {
        self.start_frame
    }

    /// Frame the tracks currently sit in.
    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Cells the tracks were seeded on.
    pub fn seed(&self) -> &ParamSet {
        &self.seed
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of tracks still alive.
    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Current coordinates of the live track seeded at `(u, v)`.
    pub fn coord_of(&self, u: i32, v: i32) -> Option<(f64, f64)> {
        let i = self.position_of(u, v)?;
        self.alive[i].then_some(self.coords[i])
    }

    /// Seed cell, current coordinates, and liveness of every track.
    pub fn iter(&self) -> impl Iterator<Item = ((i32, i32), (f64, f64), bool)> + '_ {
        self.seed
            .iter()
            .zip(self.coords.iter().zip(self.alive.iter()))
            .map(|(cell, (&c, &a))| (cell, c, a))
    }

    fn position_of(&self, u: i32, v: i32) -> Option<usize> {
        if !self.seed.contains(u, v) {
            return None;
        }
        // seed iteration is row-major; count members before (u, v)
        let mut i = 0;
        for cell in self.seed.iter() {
            if cell == (u, v) {
                return Some(i);
            }
            i += 1;
        }
        None
    }
}

// ===================== flow and advancement =====================

/// Optical flow of the canonical grid under a recovered displacement.
///
/// Each cell maps to `project(point + displacement) - cell`; cells whose
/// displaced point falls behind the camera are left undefined.
pub fn canonical_flow(
    rec: &RecoveredDeformation,
    state: &CanonicalState,
    k: &CameraIntrinsics,
) -> Flow2Map {
    let mut flow = RasterMap::undefined(*state.domain(), 2);
    for (u, v) in state.params().iter() {
        let (Some(p), Some(d)) = (state.points().get3(u, v), rec.displacement.get3(u, v)) else {
            continue;
        };
        if let Some((x, y)) = k.project(&(p + d)) {
            flow.set(u, v, &[(x - u as f64) as f32, (y - v as f64) as f32]);
        }
    }
    flow
}

/// Move every live track by the flow sampled at its current position.
///
/// Tracks whose flow lookup is undefined die and keep their last
/// coordinates; dead tracks are never advanced again.
pub fn advance_tracks(tracks: &TrackSet, flow: &Flow2Map) -> TrackSet {
    let mut out = tracks.clone();
    out.frame += 1;
    for i in 0..out.coords.len() {
        if !out.alive[i] {
            continue;
        }
        let (x, y) = out.coords[i];
        match flow.sample2(x, y) {
            Some((fx, fy)) => out.coords[i] = (x + fx, y + fy),
            None => out.alive[i] = false,
        }
    }
    out
}

// ===================== accumulative deformation =====================

/// Start-to-current displacement and local deformation of a track set.
///
/// `p_n` is the canonical point map of the start frame and `state_m` the
/// canonical state the tracks have been advanced into. Each track reads
/// its current 3D position off `state_m` at its tracked coordinates; the
/// displacement is that position minus the start point. The local part is
/// extracted in one shot between the start derivatives and the finite
/// differences of the tracked positions over the seed grid, so it is
/// undefined wherever fewer than two same-axis neighbors are still alive.
pub fn accumulative_deformation(
    p_n: &Point3Map,
    state_m: &CanonicalState,
    tracks: &TrackSet,
) -> (Disp3Map, LocalDefMap) {
    let domain = *tracks.seed.domain();
    let mut tracked = RasterMap::undefined(domain, 3);
    for ((u, v), (x, y), alive) in tracks.iter() {
        if !alive {
            continue;
        }
        if let Some(p) = state_m.points().sample3(x, y) {
            tracked.set3(u, v, p);
        }
    }

    let mut displacement = RasterMap::undefined(domain, 3);
    for (u, v) in tracked.defined().clone().iter() {
        let (Some(now), Some(start)) = (tracked.get3(u, v), p_n.get3(u, v)) else { continue };
        displacement.set3(u, v, now - start);
    }

    let derivs_start = derivative_map(p_n);
    let derivs_now = derivative_map(&tracked);
    let mut local = RasterMap::undefined(domain, 6);
    for (u, v) in derivs_now.defined().clone().iter() {
        let (Some(before6), Some(after6)) = (derivs_start.get6(u, v), derivs_now.get6(u, v))
        else {
            continue;
        };
        let before = TangentPair::from_channels(before6);
        let after = TangentPair::from_channels(after6);
        if let Ok(ld) = extract_local_deformation(&before, &after) {
            local.set6(u, v, ld.to_channels());
        }
    }
    (displacement, local)
}

// ===================== strain export =====================

/// Column header of the strain CSV export.
pub const STRAIN_CSV_HEADER: &str = "frame,u,v,x,y,z,eps_uu,eps_vv,eps_uv,lambda_max,lambda_min";

/// One exported strain sample: a tracked cell's current position and its
/// accumulative surface strain with principal values.
#[derive(Debug, Clone)]
pub struct StrainRow {
    pub frame: usize,
    pub cell: (i32, i32),
    pub position: Vector3<f64>,
    pub strain: SurfaceStrain,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl StrainRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.frame,
            self.cell.0,
            self.cell.1,
            self.position.x,
            self.position.y,
            self.position.z,
            self.strain.e_uu,
            self.strain.e_vv,
            self.strain.e_uv,
            self.lambda_max,
            self.lambda_min,
        )
    }
}

/// Strain rows for every cell where both the accumulative displacement and
/// local deformation are defined.
pub fn strain_rows(
    frame: usize,
    p_n: &Point3Map,
    displacement: &Disp3Map,
    local: &LocalDefMap,
) -> Vec<StrainRow> {
    let mut rows = Vec::new();
    for (u, v) in local.defined().iter() {
        let (Some(start), Some(d), Some(ld6)) =
            (p_n.get3(u, v), displacement.get3(u, v), local.get6(u, v))
        else {
            continue;
        };
        let ld = LocalDeformation::from_channels(ld6);
        let strain = stretch_to_strain(&ld);
        let (lambda_max, lambda_min) = principal_strain(&strain);
        rows.push(StrainRow {
            frame,
            cell: (u, v),
            position: start + d,
            strain,
            lambda_max,
            lambda_min,
        });
    }
    rows
}

// ===================== tests =====================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{points_from_depth, FrameBundle};
    use crate::rastermap::GridDomain;
    use crate::recover::init_state;
    use approx::assert_relative_eq;

    /// fx = fy = z0 = 100 puts one canonical cell at exactly 1 mm.
    fn k100() -> CameraIntrinsics {
        CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 0.0, cy: 0.0 }
    }

    fn plane_state(size: usize, k: &CameraIntrinsics, z0: f64) -> CanonicalState {
        let d = GridDomain::image_centered(size, size);
        let depth = RasterMap::from_fn(d, 1, |_, _| Some(vec![z0 as f32]));
        let points = points_from_depth(&depth, k);
        let tex = RasterMap::from_fn(d, 3, |_, _| Some(vec![0.5; 3]));
        let flow = RasterMap::from_fn(d, 2, |_, _| Some(vec![0.0, 0.0]));
        let bundle = FrameBundle::new(points, flow, ParamSet::empty(d), tex, None);
        init_state(&bundle).unwrap()
    }

    fn zero_deformation(state: &CanonicalState) -> RecoveredDeformation {
        let d = *state.domain();
        let identity: Vec<f32> =
            LocalDeformation::IDENTITY.to_channels().iter().map(|&x| x as f32).collect();
        RecoveredDeformation {
            displacement: RasterMap::from_fn(d, 3, |u, v| {
                state.params().contains(u, v).then(|| vec![0.0; 3])
            }),
            local: RasterMap::from_fn(d, 6, |u, v| {
                state.params().contains(u, v).then(|| identity.clone())
            }),
        }
    }

    /// Displacement map for a 5% in-plane stretch of the x axis about the
    /// optical center, on a plane where one cell is one millimeter.
    fn stretch_step(state: &CanonicalState, rate: f64) -> RecoveredDeformation {
        let mut rec = zero_deformation(state);
        for (u, v) in state.params().iter() {
            let p = state.points().get3(u, v).unwrap();
            rec.displacement.set3(u, v, Vector3::new(rate * p.x, 0.0, 0.0));
        }
        rec
    }

    #[test]
    fn zero_displacement_gives_zero_flow() {
        let k = k100();
        let state = plane_state(8, &k, 100.0);
        let flow = canonical_flow(&zero_deformation(&state), &state, &k);
        for (u, v) in state.params().iter() {
            let (fx, fy) = flow.get2(u, v).unwrap();
            assert!(fx.abs() < 1e-5 && fy.abs() < 1e-5, "flow at ({u},{v}) = ({fx},{fy})");
        }
    }

    #[test]
    fn lateral_displacement_projects_to_the_expected_flow() {
        let k = CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 0.0, cy: 0.0 };
        let state = plane_state(8, &k, 100.0);
        let mut rec = zero_deformation(&state);
        for (u, v) in state.params().iter() {
            rec.displacement.set3(u, v, Vector3::new(2.0, 0.0, 0.0));
        }
        let flow = canonical_flow(&rec, &state, &k);
        for (u, v) in state.params().iter() {
            let (fx, fy) = flow.get2(u, v).unwrap();
            assert_relative_eq!(fx, 10.0, epsilon = 1e-4);
            assert_relative_eq!(fy, 0.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn motion_toward_the_camera_flows_radially_outward() {
        let k = k100();
        let state = plane_state(9, &k, 100.0);
        let mut rec = zero_deformation(&state);
        for (u, v) in state.params().iter() {
            rec.displacement.set3(u, v, Vector3::new(0.0, 0.0, -10.0));
        }
        let flow = canonical_flow(&rec, &state, &k);
        let (fx, fy) = flow.get2(0, 0).unwrap();
        assert!(fx.abs() < 1e-5 && fy.abs() < 1e-5, "principal point moved: ({fx},{fy})");
        for (u, v) in state.params().iter() {
            if (u, v) == (0, 0) {
                continue;
            }
            let (fx, fy) = flow.get2(u, v).unwrap();
            let outward = fx * u as f64 + fy * v as f64;
            assert!(outward > 0.0, "flow at ({u},{v}) not outward");
        }
    }

    #[test]
    fn behind_camera_cells_have_no_flow_entry() {
        let k = k100();
        let state = plane_state(8, &k, 100.0);
        let mut rec = zero_deformation(&state);
        rec.displacement.set3(1, 1, Vector3::new(0.0, 0.0, -200.0));
        let flow = canonical_flow(&rec, &state, &k);
        assert!(flow.get2(1, 1).is_none());
        assert!(flow.get2(0, 1).is_some());
    }

    #[test]
    fn constant_flow_telescopes_and_edge_tracks_die_monotonically() {
        let d = GridDomain::new(8, 3, (0, 0));
        let flow = RasterMap::from_fn(d, 2, |_, _| Some(vec![1.0, 0.0]));
        let mut tracks = TrackSet::seed_from(&ParamSet::full(d), 0);
        let mut last_alive = tracks.alive_count();
        for m in 1..=4 {
            tracks = advance_tracks(&tracks, &flow);
            assert_eq!(tracks.frame(), m);
            let alive = tracks.alive_count();
            assert!(alive <= last_alive, "track death must be monotone");
            last_alive = alive;
            if let Some((x, y)) = tracks.coord_of(0, 1) {
                assert_relative_eq!(x, m as f64, epsilon = 1e-9);
                assert_relative_eq!(y, 1.0, epsilon = 1e-9);
            }
        }
        // after 4 steps a track seeded at u=0 sits at x=4; seeds past
        // u=3 have sampled outside the defined strip and died
        assert!(tracks.coord_of(0, 1).is_some());
        assert!(tracks.coord_of(7, 1).is_none());
        assert_eq!(tracks.start_frame(), 0);
        // a dead track stays dead even under fully defined zero flow,
        // and live tracks parked outside the strip die rather than revive
        let zero = RasterMap::from_fn(d, 2, |_, _| Some(vec![0.0, 0.0]));
        let again = advance_tracks(&tracks, &zero);
        assert!(again.alive_count() <= tracks.alive_count());
        assert!(again.coord_of(7, 1).is_none());
        assert_eq!(again.coord_of(0, 1), tracks.coord_of(0, 1));
    }

    #[test]
    fn static_sequence_accumulates_nothing() {
        let k = k100();
        let state = plane_state(10, &k, 100.0);
        let p0 = state.points().clone();
        let mut tracks = TrackSet::seed_from(state.params(), 0);
        let flow = canonical_flow(&zero_deformation(&state), &state, &k);
        for _ in 0..3 {
            tracks = advance_tracks(&tracks, &flow);
        }
        assert_eq!(tracks.alive_count(), tracks.len());
        let (disp, local) = accumulative_deformation(&p0, &state, &tracks);
        for (u, v) in disp.defined().iter() {
            assert!(disp.get3(u, v).unwrap().norm() < 1e-5);
        }
        assert!(!local.defined().is_empty());
        for (u, v) in local.defined().iter() {
            let ld = LocalDeformation::from_channels(local.get6(u, v).unwrap());
            let strain = stretch_to_strain(&ld);
            let (lo, hi) = principal_strain(&strain);
            assert!(lo.abs() < 1e-5 && hi.abs() < 1e-5);
            assert!(Vector3::new(ld.r.x, ld.r.y, ld.r.z).norm() < 1e-5);
        }
    }

    #[test]
    fn two_five_percent_stretches_compose_multiplicatively() {
        let k = k100();
        // each canonical step lands on the same plane geometry; only the
        // material, carried by the tracks, moves
        let state = plane_state(32, &k, 100.0);
        let p0 = state.points().clone();
        let mut tracks = TrackSet::seed_from(state.params(), 0);
        for _ in 0..2 {
            let rec = stretch_step(&state, 0.05);
            let flow = canonical_flow(&rec, &state, &k);
            tracks = advance_tracks(&tracks, &flow);
        }
        let (disp, local) = accumulative_deformation(&p0, &state, &tracks);
        let mut checked = 0;
        for (u, v) in local.defined().iter() {
            if u.abs() > 10 || v.abs() > 10 {
                continue;
            }
            let ld = LocalDeformation::from_channels(local.get6(u, v).unwrap());
            assert_relative_eq!(ld.xi.0, 1.1025, epsilon = 1e-4);
            assert_relative_eq!(ld.xi.1, 1.0, epsilon = 1e-4);
            assert_relative_eq!(ld.xi.2, 0.0, epsilon = 1e-4);
            let d = disp.get3(u, v).unwrap();
            assert_relative_eq!(d.x, 0.1025 * u as f64, epsilon = 1e-3);
            checked += 1;
        }
        assert!(checked >= 400, "only {checked} interior cells survived");
    }

    #[test]
    fn tracked_rigid_rotation_reads_as_zero_strain() {
        let k = k100();
        let state = plane_state(24, &k, 100.0);
        let p0 = state.points().clone();
        let mut tracks = TrackSet::seed_from(state.params(), 0);
        let theta = 0.1f64;
        for _ in 0..2 {
            let mut rec = zero_deformation(&state);
            for (u, v) in state.params().iter() {
                let p = state.points().get3(u, v).unwrap();
                let rotated = Vector3::new(
                    p.x * theta.cos() - p.y * theta.sin(),
                    p.x * theta.sin() + p.y * theta.cos(),
                    p.z,
                );
                rec.displacement.set3(u, v, rotated - p);
            }
            let flow = canonical_flow(&rec, &state, &k);
            tracks = advance_tracks(&tracks, &flow);
        }
        let (_, local) = accumulative_deformation(&p0, &state, &tracks);
        let mut checked = 0;
        for (u, v) in local.defined().iter() {
            if u.abs() > 7 || v.abs() > 7 {
                continue;
            }
            let ld = LocalDeformation::from_channels(local.get6(u, v).unwrap());
            let strain = stretch_to_strain(&ld);
            let (hi, lo) = principal_strain(&strain);
            assert!(hi.abs() <= 1e-5 && lo.abs() <= 1e-5, "strain at ({u},{v}): {strain:?}");
            // the extracted rotation is the in-plane turn the tracks took
            assert_relative_eq!(ld.r.norm(), 2.0 * theta, epsilon = 1e-4);
            checked += 1;
        }
        assert!(checked >= 100);
    }

    #[test]
    fn strain_rows_follow_the_schema() {
        let k = k100();
        let state = plane_state(16, &k, 100.0);
        let p0 = state.points().clone();
        let mut tracks = TrackSet::seed_from(state.params(), 0);
        let rec = stretch_step(&state, 0.05);
        let flow = canonical_flow(&rec, &state, &k);
        tracks = advance_tracks(&tracks, &flow);
        let (disp, local) = accumulative_deformation(&p0, &state, &tracks);
        let rows = strain_rows(1, &p0, &disp, &local);
        assert_eq!(rows.len(), local.defined().len());
        assert_eq!(STRAIN_CSV_HEADER.split(',').count(), 11);
        for row in &rows {
            assert_eq!(row.frame, 1);
            assert_eq!(row.csv_line().split(',').count(), 11);
        }
        let (u, v) = rows[0].cell;
        let expect = p0.get3(u, v).unwrap() + disp.get3(u, v).unwrap();
        assert_relative_eq!(rows[0].position.x, expect.x, epsilon = 1e-12);
    }
}
