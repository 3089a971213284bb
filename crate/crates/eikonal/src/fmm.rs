//! Fast Marching Method reference solver for the Eikonal equation
//! `||grad T|| = 1/S*(q)` on occupancy grids, plus geodesic backtracking and
//! the mean-absolute-error protocol against learned fields.
//!
//! First-order upwind scheme with a min-heap wavefront. Occupied and
//! unreachable cells keep a `+inf` sentinel.

use std::collections::BinaryHeap;
use std::time::Instant;

use crate::env::GridEnv;
use crate::grid::{GridField, OccupancyGrid};
use crate::plan::PlanResult;
use crate::{Error, Result};

/// Wavefront bookkeeping per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Far,
    Considered,
    Accepted,
}

/// Solution of one fast-marching run from a single source cell.
#[derive(Debug, Clone)]
pub struct FmmSolution {
    /// World coordinates of the source cell center.
    pub source: Vec<f64>,
    pub source_cell: [usize; 3],
    /// Travel time from the source; `+inf` on occupied or unreachable cells.
    pub travel_time: GridField,
    pub state: Vec<CellState>,
    accepted: Vec<f64>,
}

impl FmmSolution {
    /// Travel-time values in acceptance order (nondecreasing by causality).
    pub fn accepted_values(&self) -> &[f64] {
        &self.accepted
    }
}

/// Min-heap key: travel time (non-negative, so bit order equals numeric
/// order) with cell-index tie-break for determinism.
type HeapEntry = std::cmp::Reverse<(u64, usize)>;

/// Solve the Eikonal equation on `env`'s grid from a source configuration.
///
/// The source snaps to its nearest cell, which must be free.
pub fn fmm_solve(env: &GridEnv, source: &[f64]) -> Result<FmmSolution> {
    let grid = &env.grid;
    let cell = grid
        .nearest_cell(source)
        .ok_or_else(|| Error::OutOfDomain(source.to_vec()))?;
    let src_idx = grid.index(cell[0], cell[1], cell[2]);
    if grid.occupied(src_idx) {
        return Err(Error::SourceInObstacle);
    }

    let n = grid.len();
    let h = grid.resolution();
    // Cell cost: h / S* at the cell center; the clearance lattice holds d_obs
    // at cell centers exactly.
    let cost: Vec<f64> = grid.clearance().iter().map(|&c| h / env.speed.speed(c)).collect();

    let mut time = vec![f64::INFINITY; n];
    let mut state = vec![CellState::Far; n];
    let mut accepted = Vec::new();
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();

    time[src_idx] = 0.0;
    state[src_idx] = CellState::Considered;
    heap.push(std::cmp::Reverse((0u64, src_idx)));

    let [nx, ny, nz] = grid.shape();
    let dims = grid.dims();
    let strides = [1usize, nx, nx * ny];
    let extents = [nx, ny, nz];
    let coords = |idx: usize| -> [usize; 3] {
        let iz = idx / (nx * ny);
        let rem = idx % (nx * ny);
        [rem % nx, rem / nx, iz]
    };

    let mut last_accepted = 0.0f64;
    while let Some(std::cmp::Reverse((bits, idx))) = heap.pop() {
        let t = f64::from_bits(bits);
        if state[idx] == CellState::Accepted || t > time[idx] {
            continue; // stale entry
        }
        state[idx] = CellState::Accepted;
        assert!(
            t >= last_accepted,
            "causality violated: accepted {t} after {last_accepted}"
        );
        last_accepted = t;
        accepted.push(t);

        let c = coords(idx);
        for axis in 0..dims {
            for dir in [-1isize, 1isize] {
                let coord = c[axis] as isize + dir;
                if coord < 0 || coord as usize >= extents[axis] {
                    continue;
                }
                let nidx = (idx as isize + dir * strides[axis] as isize) as usize;
                if grid.occupied(nidx) || state[nidx] == CellState::Accepted {
                    continue;
                }
                let trial = upwind_update(nidx, &coords, &time, &state, grid, dims, &strides, &extents, cost[nidx]);
                if trial < time[nidx] {
                    time[nidx] = trial;
                    state[nidx] = CellState::Considered;
                    heap.push(std::cmp::Reverse((trial.to_bits(), nidx)));
                }
            }
        }
    }

    let travel_time = GridField {
        dims,
        shape: grid.shape(),
        resolution: h,
        origin: grid.origin(),
        data: time,
    };
    Ok(FmmSolution {
        source: grid.cell_center(cell[0], cell[1], cell[2]),
        source_cell: cell,
        travel_time,
        state,
        accepted,
    })
}

/// First-order upwind update at one cell: solve the quadratic cascade over
/// the accepted axis minima.
#[allow(clippy::too_many_arguments)]
fn upwind_update(
    idx: usize,
    coords: &dyn Fn(usize) -> [usize; 3],
    time: &[f64],
    state: &[CellState],
    grid: &OccupancyGrid,
    dims: usize,
    strides: &[usize; 3],
    extents: &[usize; 3],
    f: f64,
) -> f64 {
    let c = coords(idx);
    let mut u = [f64::INFINITY; 3];
    for axis in 0..dims {
        for dir in [-1isize, 1isize] {
            let coord = c[axis] as isize + dir;
            if coord < 0 || coord as usize >= extents[axis] {
                continue;
            }
            let nidx = (idx as isize + dir * strides[axis] as isize) as usize;
            if grid.occupied(nidx) || state[nidx] != CellState::Accepted {
                continue;
            }
            u[axis] = u[axis].min(time[nidx]);
        }
    }
    let mut vals: Vec<f64> = u[..dims].iter().copied().filter(|v| v.is_finite()).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if vals.is_empty() {
        return f64::INFINITY;
    }

    let mut t = vals[0] + f;
    for k in 2..=vals.len() {
        if t <= vals[k - 1] {
            break;
        }
        let s: f64 = vals[..k].iter().sum();
        let ss: f64 = vals[..k].iter().map(|v| v * v).sum();
        let kk = k as f64;
        let disc = s * s - kk * (ss - f * f);
        if disc < 0.0 {
            break;
        }
        let cand = (s + disc.sqrt()) / kk;
        if cand >= vals[k - 1] {
            t = cand;
        } else {
            break;
        }
    }
    t
}

/// Residual of the discrete upwind equation at an accepted interior cell, for
/// verification: `sum_axes max(T - u_axis, 0)^2 - f^2`.
pub fn upwind_residual(sol: &FmmSolution, env: &GridEnv, idx: usize) -> Option<f64> {
    let grid = &env.grid;
    if grid.occupied(idx) || sol.state[idx] != CellState::Accepted {
        return None;
    }
    let [nx, ny, _nz] = grid.shape();
    let iz = idx / (nx * ny);
    let rem = idx % (nx * ny);
    let c = [rem % nx, rem / nx, iz];
    if sol.travel_time.data[idx] == 0.0 {
        return None; // source cell carries the boundary condition
    }
    let strides = [1usize, nx, nx * ny];
    let extents = grid.shape();
    let t = sol.travel_time.data[idx];
    let mut acc = 0.0;
    for axis in 0..grid.dims() {
        let mut u = f64::INFINITY;
        for dir in [-1isize, 1isize] {
            let coord = c[axis] as isize + dir;
            if coord < 0 || coord as usize >= extents[axis] {
                continue;
            }
            let nidx = (idx as isize + dir * strides[axis] as isize) as usize;
            if grid.occupied(nidx) {
                continue;
            }
            let tn = sol.travel_time.data[nidx];
            if tn < t {
                u = u.min(tn);
            }
        }
        if u.is_finite() {
            let d = (t - u).max(0.0);
            acc += d * d;
        }
    }
    let f = grid.resolution() / env.speed.speed(grid.clearance()[idx]);
    Some(acc - f * f)
}

/// Trace the geodesic from `goal` back to the solution's source by gradient
/// descent on the interpolated travel time.
///
/// The returned waypoints run source-first. Falls back to a discrete descent
/// step next to obstacle cells where the interpolant is not finite.
pub fn fmm_backtrack(sol: &FmmSolution, goal: &[f64], step: f64) -> Result<PlanResult> {
    let start = Instant::now();
    let field = &sol.travel_time;
    let grid_hull = {
        let lo: Vec<f64> = field.origin[..field.dims].to_vec();
        let hi: Vec<f64> = (0..field.dims)
            .map(|a| field.origin[a] + (field.shape[a] - 1) as f64 * field.resolution)
            .collect();
        (lo, hi)
    };
    let dims = field.dims;
    if goal.len() != dims
        || goal
            .iter()
            .zip(grid_hull.0.iter().zip(grid_hull.1.iter()))
            .any(|(&x, (&l, &u))| x < l || x > u)
    {
        return Err(Error::OutOfDomain(goal.to_vec()));
    }
    let t_goal = field.interp(goal);
    if !t_goal.is_finite() {
        return Err(Error::Unreachable);
    }
    let h = field.resolution;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let arrive = step.max(h);
    if dist(goal, &sol.source) <= arrive {
        let waypoints = if dist(goal, &sol.source) == 0.0 {
            vec![sol.source.clone()]
        } else {
            vec![sol.source.clone(), goal.to_vec()]
        };
        let path_length = if waypoints.len() == 2 { dist(goal, &sol.source) } else { 0.0 };
        let cost_trace = waypoints.iter().map(|w| field.interp(w)).collect();
        return Ok(PlanResult {
            waypoints,
            success: true,
            path_length,
            wall_time: start.elapsed().as_secs_f64(),
            cost_trace,
        });
    }

    let cap = ((t_goal / step).ceil() as usize * 4).max(64);
    let mut trace_rev = vec![goal.to_vec()];
    let mut p = goal.to_vec();
    let mut iter = 0usize;
    loop {
        if iter >= cap {
            return Err(Error::BacktrackStalled(cap));
        }
        iter += 1;
        let g = interp_gradient(field, &p, &grid_hull);
        let gnorm = g.as_ref().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
        match (g, gnorm) {
            (Some(g), Some(n)) if n > 1e-12 => {
                for (x, gi) in p.iter_mut().zip(g.iter()) {
                    *x -= step * gi / n;
                }
                for (x, (&l, &u)) in p.iter_mut().zip(grid_hull.0.iter().zip(grid_hull.1.iter())) {
                    *x = x.clamp(l, u);
                }
            }
            _ => {
                // Discrete fallback: hop to the lowest-T neighboring cell center.
                if !discrete_descent(field, &mut p) {
                    return Err(Error::BacktrackStalled(iter));
                }
            }
        }
        trace_rev.push(p.clone());
        if dist(&p, &sol.source) <= arrive {
            trace_rev.push(sol.source.clone());
            break;
        }
    }

    trace_rev.reverse();
    let path_length = trace_rev.windows(2).map(|w| dist(&w[0], &w[1])).sum();
    let cost_trace = trace_rev.iter().map(|w| field.interp(w)).collect();
    Ok(PlanResult {
        waypoints: trace_rev,
        success: true,
        path_length,
        wall_time: start.elapsed().as_secs_f64(),
        cost_trace,
    })
}

/// Central-difference gradient of the interpolated field, one-sided at the
/// domain border; None when a sample is not finite.
fn interp_gradient(field: &GridField, p: &[f64], hull: &(Vec<f64>, Vec<f64>)) -> Option<Vec<f64>> {
    let delta = field.resolution / 2.0;
    let mut g = vec![0.0; field.dims];
    for a in 0..field.dims {
        let hi = (p[a] + delta).min(hull.1[a]);
        let lo = (p[a] - delta).max(hull.0[a]);
        let mut qp = p.to_vec();
        let mut qm = p.to_vec();
        qp[a] = hi;
        qm[a] = lo;
        let vp = field.interp(&qp);
        let vm = field.interp(&qm);
        if !vp.is_finite() || !vm.is_finite() || hi <= lo {
            return None;
        }
        g[a] = (vp - vm) / (hi - lo);
    }
    Some(g)
}

/// Move `p` to the neighboring cell center with the smallest finite travel
/// time; false when the current cell is already the local minimum.
fn discrete_descent(field: &GridField, p: &mut Vec<f64>) -> bool {
    let dims = field.dims;
    let mut cell = [0usize; 3];
    for a in 0..dims {
        let t = ((p[a] - field.origin[a]) / field.resolution)
            .round()
            .clamp(0.0, (field.shape[a] - 1) as f64);
        cell[a] = t as usize;
    }
    let here = field.data[field.index(cell[0], cell[1], cell[2])];
    let mut best = (here, cell);
    let range = |c: usize, n: usize| {
        let lo = c.saturating_sub(1);
        let hi = (c + 1).min(n - 1);
        lo..=hi
    };
    let z_range = if dims == 3 { range(cell[2], field.shape[2]) } else { 0..=0 };
    for iz in z_range {
        for iy in range(cell[1], field.shape[1]) {
            for ix in range(cell[0], field.shape[0]) {
                let v = field.data[field.index(ix, iy, iz)];
                if v < best.0 {
                    best = (v, [ix, iy, iz]);
                }
            }
        }
    }
    if best.1 == cell {
        return false;
    }
    for a in 0..dims {
        p[a] = field.origin[a] + best.1[a] as f64 * field.resolution;
    }
    true
}

/// Mean absolute difference between a model field and the oracle over free
/// cells with finite oracle travel time.
pub fn mae_vs_oracle(model_field: &GridField, oracle: &FmmSolution, grid: &OccupancyGrid) -> Result<f64> {
    if !model_field.same_lattice(&oracle.travel_time) || model_field.data.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "model {:?} vs oracle {:?} vs grid {:?}",
            model_field.shape,
            oracle.travel_time.shape,
            grid.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..grid.len() {
        let t = oracle.travel_time.data[idx];
        if grid.occupied(idx) || !t.is_finite() {
            continue;
        }
        sum += (model_field.data[idx] - t).abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GridEnv, SpeedParams};
    use crate::grid::OccupancyGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_unit_grid(n: usize) -> GridEnv {
        let occ = vec![false; n * n];
        let h = 1.0 / (n - 1) as f64;
        let grid = OccupancyGrid::new(&[n, n], h, &[0.0, 0.0], occ).unwrap();
        // Empty grid: clearance is +inf, S* saturates at 1 everywhere.
        GridEnv::new(grid, None)
    }

    #[test]
    fn constant_speed_matches_euclidean_within_2h() {
        let env = empty_unit_grid(128);
        let h = env.grid.resolution();
        let sol = fmm_solve(&env, &[0.0, 0.0]).unwrap();
        let mut max_err = 0.0f64;
        for iy in 0..128 {
            for ix in 0..128 {
                let t = sol.travel_time.data[sol.travel_time.index(ix, iy, 0)];
                let d = ((ix as f64 * h).powi(2) + (iy as f64 * h).powi(2)).sqrt();
                max_err = max_err.max((t - d).abs());
            }
        }
        assert!(max_err <= 2.0 * h, "max |T - d| = {max_err}, 2h = {}", 2.0 * h);
    }

    #[test]
    fn source_cell_time_is_zero() {
        let env = empty_unit_grid(16);
        let sol = fmm_solve(&env, &[0.4, 0.6]).unwrap();
        let [cx, cy, _] = sol.source_cell;
        assert_eq!(sol.travel_time.data[sol.travel_time.index(cx, cy, 0)], 0.0);
    }

    #[test]
    fn occupied_source_is_an_error() {
        let n = 8;
        let mut occ = vec![false; n * n];
        occ[3 * n + 3] = true;
        let grid = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let err = fmm_solve(&env, &[3.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("source in obstacle"));
    }

    #[test]
    fn wall_blocks_the_far_side() {
        let n = 16;
        let mut occ = vec![false; n * n];
        for iy in 0..n {
            occ[iy * n + 8] = true; // full vertical wall, no gap
        }
        let grid = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let sol = fmm_solve(&env, &[2.0, 2.0]).unwrap();
        for iy in 0..n {
            for ix in 9..n {
                assert!(sol.travel_time.data[sol.travel_time.index(ix, iy, 0)].is_infinite());
            }
        }
    }

    #[test]
    fn accepted_order_is_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let n = 32;
            let occ: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.2)).collect();
            let Ok(grid) = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ) else {
                continue;
            };
            let env = GridEnv::new(grid, None);
            // Find a free source.
            let Some(free) = (0..n * n).find(|&i| !env.grid.occupied(i)) else {
                continue;
            };
            let c = env.grid.cell_center(free % n, free / n, 0);
            let sol = fmm_solve(&env, &c).unwrap();
            let acc = sol.accepted_values();
            assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn slower_speed_never_decreases_travel_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..3 {
            let n = 32;
            let occ: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.15)).collect();
            let Ok(grid) = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ) else {
                continue;
            };
            let fast = GridEnv::new(grid.clone(), Some(SpeedParams::new(1.0, 5.0).unwrap()));
            let slow = GridEnv::new(grid, Some(SpeedParams::new(2.0, 10.0).unwrap()));
            let Some(free) = (0..n * n).find(|&i| !fast.grid.occupied(i)) else {
                continue;
            };
            let c = fast.grid.cell_center(free % n, free / n, 0);
            let sol_fast = fmm_solve(&fast, &c).unwrap();
            let sol_slow = fmm_solve(&slow, &c).unwrap();
            for idx in 0..n * n {
                let (a, b) = (sol_fast.travel_time.data[idx], sol_slow.travel_time.data[idx]);
                if a.is_finite() && b.is_finite() {
                    assert!(b >= a - 1e-9, "slower speed decreased T at {idx}: {b} < {a}");
                }
            }
        }
    }

    #[test]
    fn upwind_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 32;
        let occ: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.2)).collect();
        let grid = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let free = (0..n * n).find(|&i| !env.grid.occupied(i)).unwrap();
        let c = env.grid.cell_center(free % n, free / n, 0);
        let sol = fmm_solve(&env, &c).unwrap();
        for idx in 0..n * n {
            if let Some(r) = upwind_residual(&sol, &env, idx) {
                assert!(r.abs() <= 1e-9, "residual {r} at cell {idx}");
            }
        }
    }

    #[test]
    fn travel_time_is_symmetric_up_to_discretization() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let n = 24;
        let mut occ = vec![false; n * n];
        for y in 8..16 {
            for x in 10..13 {
                occ[y * n + x] = true;
            }
        }
        let grid = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let h = env.grid.resolution();
        for _ in 0..5 {
            let a = loop {
                let i = rng.gen_range(0..n * n);
                if !env.grid.occupied(i) {
                    break i;
                }
            };
            let b = loop {
                let i = rng.gen_range(0..n * n);
                if !env.grid.occupied(i) && i != a {
                    break i;
                }
            };
            let ca = env.grid.cell_center(a % n, a / n, 0);
            let cb = env.grid.cell_center(b % n, b / n, 0);
            let t_ab = fmm_solve(&env, &ca).unwrap().travel_time.data[b];
            let t_ba = fmm_solve(&env, &cb).unwrap().travel_time.data[a];
            if t_ab.is_finite() && t_ba.is_finite() {
                assert!((t_ab - t_ba).abs() <= 4.0 * h, "asymmetry {} > 4h", (t_ab - t_ba).abs());
            }
        }
    }

    #[test]
    fn backtrack_goal_equals_source() {
        let env = empty_unit_grid(32);
        let sol = fmm_solve(&env, &[0.5, 0.5]).unwrap();
        let res = fmm_backtrack(&sol, &sol.source.clone(), 0.01).unwrap();
        assert!(res.success);
        assert_eq!(res.waypoints.len(), 1);
        assert_eq!(res.path_length, 0.0);
    }

    #[test]
    fn backtrack_on_empty_grid_is_nearly_straight() {
        let env = empty_unit_grid(64);
        let sol = fmm_solve(&env, &[0.1, 0.1]).unwrap();
        let goal = [0.9, 0.85];
        let res = fmm_backtrack(&sol, &goal, 0.01).unwrap();
        assert!(res.success);
        let straight = ((0.9f64 - sol.source[0]).powi(2) + (0.85f64 - sol.source[1]).powi(2)).sqrt();
        assert!(
            res.path_length <= 1.05 * straight + 2.0 * env.grid.resolution(),
            "path {} vs straight {}",
            res.path_length,
            straight
        );
    }

    #[test]
    fn backtrack_unreachable_goal_errors() {
        let n = 16;
        let mut occ = vec![false; n * n];
        for iy in 0..n {
            occ[iy * n + 8] = true;
        }
        let grid = OccupancyGrid::new(&[n, n], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let sol = fmm_solve(&env, &[2.0, 2.0]).unwrap();
        let err = fmm_backtrack(&sol, &[12.0, 12.0], 0.5).unwrap_err();
        assert!(err.to_string().contains("unreachable"));
    }

    /// Dijkstra on the 8-connected grid graph; edge cost is the mean slowness
    /// at the endpoints times the edge length. Returns (time, path length).
    fn dijkstra_oracle(env: &GridEnv, from: usize, to: usize) -> (f64, f64) {
        let grid = &env.grid;
        let [nx, ny, _] = grid.shape();
        let h = grid.resolution();
        let slowness: Vec<f64> = grid.clearance().iter().map(|&c| 1.0 / env.speed.speed(c)).collect();
        let mut dist = vec![f64::INFINITY; grid.len()];
        let mut prev = vec![usize::MAX; grid.len()];
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(std::cmp::Reverse((0u64, from)));
        while let Some(std::cmp::Reverse((bits, idx))) = heap.pop() {
            let d = f64::from_bits(bits);
            if d > dist[idx] {
                continue;
            }
            let (x, y) = (idx % nx, idx / nx);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ax, ay) = (x as isize + dx, y as isize + dy);
                    if ax < 0 || ay < 0 || ax as usize >= nx || ay as usize >= ny {
                        continue;
                    }
                    let aidx = ay as usize * nx + ax as usize;
                    if grid.occupied(aidx) {
                        continue;
                    }
                    let len = h * ((dx * dx + dy * dy) as f64).sqrt();
                    let cost = 0.5 * (slowness[idx] + slowness[aidx]) * len;
                    let nd = d + cost;
                    if nd < dist[aidx] {
                        dist[aidx] = nd;
                        prev[aidx] = idx;
                        heap.push(std::cmp::Reverse((nd.to_bits(), aidx)));
                    }
                }
            }
        }
        let mut length = 0.0;
        let mut cur = to;
        while cur != from && prev[cur] != usize::MAX {
            let p = prev[cur];
            let (x0, y0) = ((cur % nx) as f64, (cur / nx) as f64);
            let (x1, y1) = ((p % nx) as f64, (p / nx) as f64);
            length += h * ((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt();
            cur = p;
        }
        (dist[to], length)
    }

    #[test]
    fn backtrack_around_u_trap_matches_grid_shortest_path() {
        // U-shaped obstacle opening left, source inside the cup, goal behind it.
        let n = 48;
        let mut occ = vec![false; n * n];
        for x in 14..34 {
            occ[14 * n + x] = true;
            occ[15 * n + x] = true;
            occ[32 * n + x] = true;
            occ[33 * n + x] = true;
        }
        for y in 14..34 {
            occ[y * n + 32] = true;
            occ[y * n + 33] = true;
        }
        let h = 1.0 / (n - 1) as f64;
        let grid = OccupancyGrid::new(&[n, n], h, &[0.0, 0.0], occ).unwrap();
        let env = GridEnv::new(grid, None);
        let source_cell = [22usize, 23usize];
        let goal_cell = [44usize, 23usize];
        let src = env.grid.cell_center(source_cell[0], source_cell[1], 0);
        let goal = env.grid.cell_center(goal_cell[0], goal_cell[1], 0);
        let sol = fmm_solve(&env, &src).unwrap();
        let res = fmm_backtrack(&sol, &goal, h / 2.0).unwrap();
        assert!(res.success);
        let from = source_cell[1] * n + source_cell[0];
        let to = goal_cell[1] * n + goal_cell[0];
        let (dij_time, dij_length) = dijkstra_oracle(&env, from, to);
        assert!(
            (res.path_length - dij_length).abs() <= 0.10 * dij_length,
            "backtrack length {} vs Dijkstra length {dij_length}",
            res.path_length
        );
        // The travel times of the two oracles agree as well.
        let fmm_t = sol.travel_time.data[to];
        assert!(
            (fmm_t - dij_time).abs() <= 0.10 * dij_time,
            "FMM time {fmm_t} vs Dijkstra time {dij_time}"
        );
    }

    #[test]
    fn mae_identity_and_offset() {
        let env = empty_unit_grid(16);
        let sol = fmm_solve(&env, &[0.0, 0.0]).unwrap();
        assert_eq!(mae_vs_oracle(&sol.travel_time, &sol, &env.grid).unwrap(), 0.0);
        let mut shifted = sol.travel_time.clone();
        for v in shifted.data.iter_mut() {
            *v += 0.1;
        }
        let mae = mae_vs_oracle(&shifted, &sol, &env.grid).unwrap();
        assert!((mae - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mae_empty_mask_errors() {
        let env = empty_unit_grid(8);
        let sol = fmm_solve(&env, &[0.0, 0.0]).unwrap();
        let mut oracle = sol.clone();
        for v in oracle.travel_time.data.iter_mut() {
            *v = f64::INFINITY;
        }
        let err = mae_vs_oracle(&sol.travel_time, &oracle, &env.grid).unwrap_err();
        assert!(err.to_string().contains("empty mask"));
    }
}
