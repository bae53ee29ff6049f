//! Reprojection of the deformed canonical model onto the grid of the next
//! image, so canonical cells and image pixels stay aligned frame to frame.

use std::collections::HashMap;

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::measure::CameraIntrinsics;
use crate::rastermap::{GridDomain, Point3Map, RasterMap};

use super::{CanonicalState, RecoverError, RecoveredDeformation};

/// Newton iterations when locating the exact surface point behind a cell.
const REFINE_MAX_ITER: usize = 8;
/// A refined source coordinate may wander at most this far from the
/// projected winner before the cell falls back to the unrefined value.
const REFINE_MAX_DRIFT: f64 = 1.5;

/// Realign the deformed canonical model with the camera grid.
///
/// Every canonical point is displaced by the recovered deformation and
/// projected; each hit grid cell keeps the nearest surface point (smallest
/// depth). The stored value is then refined so it is the point of the
/// deformed surface that projects exactly onto the cell center, with the
/// texture resampled at the same surface location. Points behind the
/// camera are dropped; cells projected beyond the current domain grow it.
///
/// The frame index is unchanged: fusion is what advances time.
pub fn reparameterize(
    state: &CanonicalState,
    rec: &RecoveredDeformation,
    k: &CameraIntrinsics,
) -> Result<CanonicalState, RecoverError> {
    let mut deformed = RasterMap::undefined(*state.domain(), 3);
    for (u, v) in state.params().iter() {
        let Some(d) = rec.displacement.get3(u, v) else { continue };
        deformed.set3(u, v, state.points().get3(u, v).unwrap() + d);
    }

    // keep projections within a sane reach of the current grid so a rogue
    // near-camera point cannot blow the domain up
    let dom = *state.domain();
    let center = (
        dom.offset.0 as f64 + dom.width as f64 / 2.0,
        dom.offset.1 as f64 + dom.height as f64 / 2.0,
    );
    let reach = 4.0 * dom.width.max(dom.height) as f64;

    struct Winner {
        z: f64,
        src: (i32, i32),
    }
    let mut winners: HashMap<(i32, i32), Winner> = HashMap::new();
    for (u, v) in deformed.defined().iter() {
        let x = deformed.get3(u, v).unwrap();
        let Some((pu, pv)) = k.project(&x) else { continue };
        if (pu - center.0).abs() > reach || (pv - center.1).abs() > reach {
            continue;
        }
        let cell = (pu.round() as i32, pv.round() as i32);
        let candidate = Winner { z: x.z, src: (u, v) };
        match winners.get_mut(&cell) {
            Some(w) if w.z <= candidate.z => {}
            Some(w) => *w = candidate,
            None => {
                winners.insert(cell, candidate);
            }
        }
    }

    let new_dom = dom.grown_to_include(winners.keys().copied());
    let sample_points = extend_one_ring(&deformed)?;
    let sample_texture = extend_one_ring(state.texture())?;

    let mut points = RasterMap::undefined(new_dom, 3);
    let mut texture = RasterMap::undefined(new_dom, 3);
    let mut entries: Vec<(&(i32, i32), &Winner)> = winners.iter().collect();
    entries.sort_by_key(|(cell, _)| (cell.1, cell.0));
    for (&(cu, cv), w) in entries {
        match refine_source(&sample_points, k, (cu as f64, cv as f64), w.src) {
            Some((s, x)) => {
                points.set3(cu, cv, x);
                let tex = sample_texture
                    .sample3(s.0, s.1)
                    .unwrap_or_else(|| state.texture().get3(w.src.0, w.src.1).unwrap());
                texture.set3(cu, cv, tex);
            }
            None => {
                points.set3(cu, cv, deformed.get3(w.src.0, w.src.1).unwrap());
                texture.set3(cu, cv, state.texture().get3(w.src.0, w.src.1).unwrap());
            }
        }
    }
    CanonicalState::from_maps(points, texture, state.frame_index())
}

/// Find source coordinates on the deformed map whose surface point
/// projects exactly onto `target`, starting from the winning cell.
///
/// Newton iteration on the projected bilinear surface with a forward
/// difference Jacobian. Returns the coordinates and the surface point, or
/// `None` when the cell should keep the unrefined winner value.
fn refine_source(
    deformed: &Point3Map,
    k: &CameraIntrinsics,
    target: (f64, f64),
    src: (i32, i32),
) -> Option<((f64, f64), Vector3<f64>)> {
    let start = (src.0 as f64, src.1 as f64);
    let mut s = start;
    let mut last = None;
    for _ in 0..REFINE_MAX_ITER {
        let x = deformed.sample3(s.0, s.1)?;
        let (pu, pv) = k.project(&x)?;
        let r = Vector2::new(pu - target.0, pv - target.1);
        last = Some((s, x, r.amax()));
        if r.amax() < 1e-9 {
            return Some((s, x));
        }
        let eps = 1e-3;
        let xu = deformed.sample3(s.0 + eps, s.1)?;
        let xv = deformed.sample3(s.0, s.1 + eps)?;
        let (puu, pvu) = k.project(&xu)?;
        let (puv, pvv) = k.project(&xv)?;
        let j = Matrix2::new(
            (puu - pu) / eps,
            (puv - pu) / eps,
            (pvu - pv) / eps,
            (pvv - pv) / eps,
        );
        let step = j.try_inverse()? * r;
        s.0 -= step.x.clamp(-1.0, 1.0);
        s.1 -= step.y.clamp(-1.0, 1.0);
        if (s.0 - start.0).abs() > REFINE_MAX_DRIFT || (s.1 - start.1).abs() > REFINE_MAX_DRIFT {
            return None;
        }
    }
    // a seam of the piecewise-bilinear surface can stall the iteration; a
    // residual under a thousandth of a pixel is far below resampling error
    match last {
        Some((s, x, r)) if r < 1e-3 => Some((s, x)),
        _ => None,
    }
}

/// Copy of a map with a one-cell rim of linear extrapolation around the
/// defined set, so sub-cell resampling near the boundary has support.
///
/// Edge-adjacent rim cells extrapolate along the axes; convex-corner rim
/// cells have no axial neighbor and extrapolate along the diagonals in a
/// second pass, so the bilinear patches touching a corner are complete.
fn extend_one_ring(map: &RasterMap) -> Result<RasterMap, RecoverError> {
    let d = *map.domain();
    let grown = GridDomain::new(d.width + 2, d.height + 2, (d.offset.0 - 1, d.offset.1 - 1));
    let mut out = map.expand_to(grown)?;
    let set = map.defined();
    let ch = map.channels();
    let mut acc = vec![0.0f64; ch];
    let axial = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    let diagonal = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
    for directions in [&axial, &diagonal] {
        for (u, v) in grown.iter() {
            if set.contains(u, v) || out.get(u, v).is_some() {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut hits = 0usize;
            for &(du, dv) in directions {
                let Some(near) = map.get(u + du, v + dv) else { continue };
                match map.get(u + 2 * du, v + 2 * dv) {
                    Some(far) => {
                        for c in 0..ch {
                            acc[c] += 2.0 * near[c] as f64 - far[c] as f64;
                        }
                    }
                    None => {
                        for c in 0..ch {
                            acc[c] += near[c] as f64;
                        }
                    }
                }
                hits += 1;
            }
            if hits > 0 {
                let vals: Vec<f32> = acc.iter().map(|&a| (a / hits as f64) as f32).collect();
                out.set(u, v, &vals);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{points_from_depth, CameraIntrinsics, FrameBundle};
    use crate::rastermap::ParamSet;
    use crate::recover::init_state;
    use nalgebra::Vector3;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 0.0, cy: 0.0 }
    }

    fn plane_state(size: usize, k: &CameraIntrinsics, z0: f32) -> CanonicalState {
        let d = GridDomain::image_centered(size, size);
        let depth = RasterMap::from_fn(d, 1, |_, _| Some(vec![z0]));
        let points = points_from_depth(&depth, k);
        let tex = RasterMap::from_fn(d, 3, |u, v| {
            Some(vec![0.5 + 0.002 * u as f32, 0.5 - 0.002 * v as f32, 0.25])
        });
        let flow = RasterMap::from_fn(d, 2, |_, _| Some(vec![0.0, 0.0]));
        let bundle = FrameBundle::new(points, flow, ParamSet::empty(d), tex, None);
        init_state(&bundle).unwrap()
    }

    fn zero_deformation(state: &CanonicalState) -> RecoveredDeformation {
        let d = *state.domain();
        let disp = RasterMap::from_fn(d, 3, |u, v| {
            state.params().contains(u, v).then(|| vec![0.0; 3])
        });
        let ident: Vec<f32> = crate::surfgeom::LocalDeformation::IDENTITY
            .to_channels()
            .iter()
            .map(|&x| x as f32)
            .collect();
        let local = RasterMap::from_fn(d, 6, |u, v| {
            state.params().contains(u, v).then(|| ident.clone())
        });
        RecoveredDeformation { displacement: disp, local }
    }

    #[test]
    fn identity_deformation_changes_nothing() {
        let k = k500();
        let state = plane_state(16, &k, 100.0);
        let rec = zero_deformation(&state);
        let out = reparameterize(&state, &rec, &k).unwrap();
        assert_eq!(out.params(), state.params());
        assert_eq!(out.domain(), state.domain());
        let mut max_move: f64 = 0.0;
        for (u, v) in state.params().iter() {
            let before = state.points().get3(u, v).unwrap();
            let after = out.points().get3(u, v).unwrap();
            max_move = max_move.max((after - before).norm());
            assert_eq!(out.texture().get(u, v), state.texture().get(u, v));
        }
        assert!(max_move < 1e-6, "geometry moved by {max_move}");
    }

    #[test]
    fn rigid_x_translation_shifts_the_grid_ten_cells() {
        let k = k500();
        let state = plane_state(64, &k, 100.0);
        let t = Vector3::new(2.0, 0.0, 0.0);
        let d = *state.domain();
        let disp = RasterMap::from_fn(d, 3, |u, v| {
            state.params().contains(u, v).then(|| vec![t.x as f32, t.y as f32, t.z as f32])
        });
        let rec = RecoveredDeformation { displacement: disp, ..zero_deformation(&state) };
        let out = reparameterize(&state, &rec, &k).unwrap();
        // 500 px * 2 mm / 100 mm = 10 px shift
        assert_eq!(out.params().len(), 64 * 64);
        for (u, v) in state.params().iter() {
            assert!(out.params().contains(u + 10, v), "missing cell ({},{v})", u + 10);
            let before = state.points().get3(u, v).unwrap();
            let after = out.points().get3(u + 10, v).unwrap();
            assert!(
                (after - before - t).norm() < 0.02,
                "bad resample at ({u},{v}): {after:?}"
            );
        }
        // grown on the +u side only, with the margin
        assert_eq!(out.domain().offset.1, d.offset.1);
        assert_eq!(out.domain().offset.0, d.offset.0);
        assert_eq!(out.domain().width, 64 + 10 + 16);
    }

    #[test]
    fn nearer_fold_wins_the_cell() {
        // two separate 2x2 slabs; the far one is displaced to project onto
        // the near slab's cells at smaller depth
        let k = k500();
        let d = GridDomain::new(14, 2, (0, 0));
        let points = RasterMap::from_fn(d, 3, |u, v| {
            if u < 2 {
                let p = k.backproject(u as f64, v as f64, 110.0);
                Some(vec![p.x as f32, p.y as f32, p.z as f32])
            } else if (10..12).contains(&u) {
                let p = k.backproject(u as f64, v as f64, 120.0);
                Some(vec![p.x as f32, p.y as f32, p.z as f32])
            } else {
                None
            }
        });
        let tex = RasterMap::from_fn(d, 3, |_, _| Some(vec![0.5; 3]));
        let state = CanonicalState::from_maps(points, tex, 3).unwrap();
        let disp = RasterMap::from_fn(d, 3, |u, v| {
            state.params().contains(u, v).then(|| {
                if u >= 10 {
                    let here = state.points().get3(u, v).unwrap();
                    let there = k.backproject(u as f64 - 10.0, v as f64, 90.0);
                    let dd = there - here;
                    vec![dd.x as f32, dd.y as f32, dd.z as f32]
                } else {
                    vec![0.0; 3]
                }
            })
        });
        let rec = RecoveredDeformation { displacement: disp, ..zero_deformation(&state) };
        let out = reparameterize(&state, &rec, &k).unwrap();
        for v in 0..2 {
            for u in 0..2 {
                let z = out.points().get3(u, v).unwrap().z;
                assert!((z - 90.0).abs() < 1e-3, "cell ({u},{v}) kept z={z}");
            }
        }
        assert_eq!(out.frame_index(), 3);
    }

    #[test]
    fn points_pushed_behind_the_camera_are_dropped() {
        let k = k500();
        let state = plane_state(8, &k, 100.0);
        let d = *state.domain();
        let disp = RasterMap::from_fn(d, 3, |u, v| {
            state.params().contains(u, v).then(|| {
                if (u, v) == (0, 0) {
                    vec![0.0, 0.0, -200.0]
                } else {
                    vec![0.0; 3]
                }
            })
        });
        let rec = RecoveredDeformation { displacement: disp, ..zero_deformation(&state) };
        let out = reparameterize(&state, &rec, &k).unwrap();
        // the interior hole costs exactly one cell; its neighbors still have
        // one-sided derivative stencils and survive
        assert!(!out.params().contains(0, 0));
        assert!(out.params().contains(1, 0) && out.params().contains(0, 1));
        assert_eq!(out.params().len(), 8 * 8 - 1);
    }
}
