//! Sparse least-squares assembly and solves for the two per-frame
//! optimizations: the local deformation map and the displaced point map.
//!
//! Both objectives are quadratics over per-cell unknowns on the canonical
//! grid, solved channel by channel with conjugate gradients on the normal
//! equations. The solver works in coordinates where the identity
//! deformation is the zero vector, so an all-identity measurement costs no
//! iterations in the local solve and only rounding-level polish in the
//! displacement solve.
//!
//! Result maps quantize to the map storage format; the accompanying
//! `cells`/`values` arrays carry the solution at solver precision.

use crate::measure::InstrumentPose;
use crate::rastermap::{Disp3Map, GridDomain, LocalDefMap, ParamSet, Point3Map, RasterMap};
use crate::solver::{solve_cg, solve_with_lower_bounds, LowerBound, LsqBuilder};
use crate::surfgeom::{axis_stencil, LocalDeformation};

use super::{CanonicalState, InlierPartition, RecoverError};

/// Result of the local deformation solve.
#[derive(Debug)]
pub struct LocalSolve {
    /// Local deformation on every canonical cell.
    pub local: LocalDefMap,
    /// Solved cells in row-major order.
    pub cells: Vec<(i32, i32)>,
    /// Solver-precision solution per cell, identity-centered
    /// `(r1, r2, r3, xi_uu - 1, xi_vv - 1, xi_uv)`.
    pub values: Vec<[f64; 6]>,
    pub cg_iterations: usize,
}

/// Result of the displacement solve.
#[derive(Debug)]
pub struct DisplacementSolve {
    /// Displaced canonical points.
    pub points: Point3Map,
    /// Displacement relative to the incoming state.
    pub displacement: Disp3Map,
    /// Solved cells in row-major order.
    pub cells: Vec<(i32, i32)>,
    /// Solver-precision displaced point per cell.
    pub values: Vec<[f64; 3]>,
    pub cg_iterations: usize,
    pub active_rounds: usize,
    pub bound_relaxed: bool,
}

// ===================== grid indexing =====================

/// Dense unknown numbering for the member cells of a set, in row-major
/// order.
struct GridIndexer {
    domain: GridDomain,
    index: Vec<u32>,
    cells: Vec<(i32, i32)>,
}

impl GridIndexer {
    fn new(set: &ParamSet) -> GridIndexer {
        let domain = *set.domain();
        let mut index = vec![u32::MAX; domain.len()];
        let mut cells = Vec::with_capacity(set.len());
        for (u, v) in set.iter() {
            index[domain.index_of(u, v).unwrap()] = cells.len() as u32;
            cells.push((u, v));
        }
        GridIndexer { domain, index, cells }
    }

    fn get(&self, u: i32, v: i32) -> Option<usize> {
        let k = self.domain.index_of(u, v)?;
        let i = self.index[k];
        (i != u32::MAX).then_some(i as usize)
    }

    fn len(&self) -> usize {
        self.cells.len()
    }
}

/// 4-neighborhood connected component id per unknown.
fn connected_components(idx: &GridIndexer) -> Vec<u32> {
    let n = idx.len();
    let mut comp = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut queue = Vec::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        comp[start] = next;
        queue.push(start);
        while let Some(i) = queue.pop() {
            let (u, v) = idx.cells[i];
            for (du, dv) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(j) = idx.get(u + du, v + dv) {
                    if comp[j] == u32::MAX {
                        comp[j] = next;
                        queue.push(j);
                    }
                }
            }
        }
        next += 1;
    }
    comp
}

/// Unknowns living in components with no grounding row; those cells get
/// explicit anchor rows so every component is determined.
fn ungrounded_cells(idx: &GridIndexer, comp: &[u32], grounded_unknowns: &[usize]) -> Vec<usize> {
    let ncomp = comp.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut grounded = vec![false; ncomp];
    for &i in grounded_unknowns {
        grounded[comp[i] as usize] = true;
    }
    (0..idx.len()).filter(|&i| !grounded[comp[i] as usize]).collect()
}

// ===================== local deformation =====================

/// Solve for the local deformation of every canonical cell.
///
/// Minimizes the misfit to the measured deformation on inliers plus
/// `alpha` times the squared difference across every adjacent pair of
/// canonical cells, independently for each of the six coordinates
/// (axis-angle rotation, and stretch with the identity as origin).
///
/// Out-of-view cells keep identity stretch: their stretch coordinates are
/// not unknowns, and pairs reaching them pull neighbors toward identity.
/// Components with no measurement at all fall back to the identity
/// deformation.
pub fn optimize_local_deformation(
    d_i: &LocalDefMap,
    part: &InlierPartition,
    alpha: f64,
) -> Result<LocalSolve, RecoverError> {
    assert!(alpha > 0.0, "smoothness weight must be positive");
    let u_c = part.all();
    let stretch_set = u_c.difference(&part.out_of_fov);
    let rot_idx = GridIndexer::new(&u_c);
    let str_idx = GridIndexer::new(&stretch_set);

    let mut solutions: Vec<Vec<f64>> = Vec::with_capacity(6);
    let mut cg_iterations = 0;
    for channel in 0..6 {
        let idx = if channel < 3 { &rot_idx } else { &str_idx };
        let mut lsq = LsqBuilder::new(idx.len());
        let mut grounded: Vec<usize> = Vec::new();
        for (u, v) in part.inliers.iter() {
            let i = idx.get(u, v).expect("inliers are always unknowns");
            let centered =
                LocalDeformation::from_channels(d_i.get6(u, v).unwrap()).to_identity_centered();
            lsq.add_residual(&[(i, 1.0)], centered[channel]);
            grounded.push(i);
        }
        for (u, v) in u_c.iter() {
            for (du, dv) in [(1, 0), (0, 1)] {
                let (un, vn) = (u + du, v + dv);
                if !u_c.contains(un, vn) {
                    continue;
                }
                match (idx.get(u, v), idx.get(un, vn)) {
                    (Some(i), Some(j)) => {
                        lsq.add_residual_weighted(&[(i, 1.0), (j, -1.0)], 0.0, alpha);
                    }
                    // the missing side is a frozen identity-stretch cell
                    (Some(i), None) | (None, Some(i)) => {
                        lsq.add_residual_weighted(&[(i, 1.0)], 0.0, alpha);
                        grounded.push(i);
                    }
                    (None, None) => {}
                }
            }
        }
        let comp = connected_components(idx);
        for i in ungrounded_cells(idx, &comp, &grounded) {
            lsq.add_residual(&[(i, 1.0)], 0.0);
        }
        let system = lsq.build();
        let sol = solve_cg(&system.a, &system.b, None)?;
        cg_iterations += sol.iterations;
        solutions.push(sol.x);
    }

    let mut local = RasterMap::undefined(*u_c.domain(), 6);
    let mut values = Vec::with_capacity(rot_idx.len());
    for (u, v) in u_c.iter() {
        let mut centered = [0.0f64; 6];
        let ri = rot_idx.get(u, v).unwrap();
        for channel in 0..3 {
            centered[channel] = solutions[channel][ri];
        }
        if let Some(si) = str_idx.get(u, v) {
            for channel in 3..6 {
                centered[channel] = solutions[channel][si];
            }
        }
        values.push(centered);
        local.set6(u, v, LocalDeformation::from_identity_centered(centered).to_channels());
    }
    Ok(LocalSolve { local, cells: rot_idx.cells, values, cg_iterations })
}

// ===================== displacement =====================

/// Solve for the displaced canonical point map.
///
/// Data rows tie inlier points to their scene-flow targets; derivative
/// rows tie the finite differences of the unknowns to the deformed
/// canonical derivatives on every cell, which is what carries the solution
/// into unmeasured regions. With an instrument pose, occluded cells also
/// get a depth lower bound (the tissue stays under the tool).
pub fn optimize_displacement(
    state: &CanonicalState,
    f_i: &Disp3Map,
    dp_target: &RasterMap,
    part: &InlierPartition,
    pose: Option<&InstrumentPose>,
) -> Result<DisplacementSolve, RecoverError> {
    let u_c = part.all();
    let idx = GridIndexer::new(&u_c);
    let comp = connected_components(&idx);
    let points = state.points();

    let mut cg_iterations = 0;
    let mut active_rounds = 0;
    let mut bound_relaxed = false;
    let mut solutions: Vec<Vec<f64>> = Vec::with_capacity(3);
    for channel in 0..3 {
        let mut lsq = LsqBuilder::new(idx.len());
        let mut grounded: Vec<usize> = Vec::new();
        for (u, v) in part.inliers.iter() {
            let i = idx.get(u, v).expect("inliers are always unknowns");
            let target = points.get3(u, v).unwrap()[channel] + f_i.get3(u, v).unwrap()[channel];
            lsq.add_residual(&[(i, 1.0)], target);
            grounded.push(i);
        }
        for &(u, v) in &idx.cells {
            let Some(t6) = dp_target.get6(u, v) else { continue };
            for axis in 0..2 {
                let Some(stencil) = axis_stencil(&u_c, u, v, axis) else { continue };
                let (du, dv) = if axis == 0 { (1, 0) } else { (0, 1) };
                let terms: Vec<(usize, f64)> = stencil
                    .taps()
                    .iter()
                    .map(|&(off, c)| {
                        (idx.get(u + du * off, v + dv * off).unwrap(), c)
                    })
                    .collect();
                lsq.add_residual(&terms, t6[axis * 3 + channel]);
            }
        }
        for i in ungrounded_cells(&idx, &comp, &grounded) {
            let (u, v) = idx.cells[i];
            lsq.add_residual(&[(i, 1.0)], points.get3(u, v).unwrap()[channel]);
        }
        let system = lsq.build();
        let warm: Vec<f64> =
            idx.cells.iter().map(|&(u, v)| points.get3(u, v).unwrap()[channel]).collect();
        if channel == 2 {
            let bounds = depth_bounds(&idx, part, pose);
            let sol = solve_with_lower_bounds(&system, &bounds, Some(&warm))?;
            active_rounds = sol.rounds;
            bound_relaxed = sol.relaxed;
            cg_iterations += sol.cg_iterations;
            solutions.push(sol.x);
        } else {
            let sol = solve_cg(&system.a, &system.b, Some(&warm))?;
            cg_iterations += sol.iterations;
            solutions.push(sol.x);
        }
    }

    let mut new_points = RasterMap::undefined(*u_c.domain(), 3);
    let mut displacement = RasterMap::undefined(*u_c.domain(), 3);
    let mut values = Vec::with_capacity(idx.len());
    for (i, &(u, v)) in idx.cells.iter().enumerate() {
        let x = nalgebra::Vector3::new(solutions[0][i], solutions[1][i], solutions[2][i]);
        values.push([x.x, x.y, x.z]);
        new_points.set3(u, v, x);
        displacement.set3(u, v, x - points.get3(u, v).unwrap());
    }
    Ok(DisplacementSolve {
        points: new_points,
        displacement,
        cells: idx.cells,
        values,
        cg_iterations,
        active_rounds,
        bound_relaxed,
    })
}

/// Depth lower bounds for occluded cells covered by the instrument pose.
fn depth_bounds(
    idx: &GridIndexer,
    part: &InlierPartition,
    pose: Option<&InstrumentPose>,
) -> Vec<LowerBound> {
    let Some(pose) = pose else { return Vec::new() };
    let mut bounds = Vec::new();
    for (u, v) in part.occluded.iter() {
        if let (Some(index), Some(z_bottom)) = (idx.get(u, v), pose.z_bottom_at(u, v)) {
            bounds.push(LowerBound { index, bound: z_bottom });
        }
    }
    bounds
}
