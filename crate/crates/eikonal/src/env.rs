//! Environments: configuration spaces, the obstacle clearance function
//! `d_obs`, and the ground-truth speed field `S*`.
//!
//! Two environment families are supported: point robots on 2D/3D occupancy
//! grids, and planar n-link arms over analytic workspace obstacles. Both
//! expose the same surface: clearance, speed, speed gradient, and a seeded
//! free-space sampler.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::grid::OccupancyGrid;
use crate::{Error, Result};

/// Clamp thresholds for the speed field `S* = clip(d_obs/d_max, d_min/d_max, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedParams {
    pub d_min: f64,
    pub d_max: f64,
}

impl SpeedParams {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(0.0 < d_min && d_min < d_max) {
            return Err(Error::Config(format!(
                "speed params require 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    /// Grid default: saturation at five cells of margin, floor at one cell.
    pub fn for_grid(resolution: f64) -> Self {
        let d_max = 5.0 * resolution;
        Self { d_min: 0.2 * d_max, d_max }
    }

    /// Arm default: saturation at a fifth of the total reach.
    pub fn for_arm(total_length: f64) -> Self {
        let d_max = 0.2 * total_length;
        Self { d_min: 0.2 * d_max, d_max }
    }

    /// Lower clamp of the speed field, `d_min / d_max`.
    pub fn floor(&self) -> f64 {
        self.d_min / self.d_max
    }

    /// Map a clearance value to the clipped speed.
    pub fn speed(&self, d_obs: f64) -> f64 {
        (d_obs / self.d_max).clamp(self.floor(), 1.0)
    }

    /// True when the speed is on its linear (unclamped) branch.
    pub fn is_linear(&self, d_obs: f64) -> bool {
        d_obs > self.d_min && d_obs < self.d_max
    }
}

/// Workspace obstacle primitives for arm environments.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkspaceObstacle {
    Disc { center: [f64; 2], radius: f64 },
    Aabb { min: [f64; 2], max: [f64; 2] },
}

/// A planar kinematic chain with per-joint limits.
#[derive(Debug, Clone)]
pub struct PlanarArm {
    pub link_lengths: Vec<f64>,
    pub base_position: [f64; 2],
    pub joint_limits: Vec<[f64; 2]>,
    pub obstacles: Vec<WorkspaceObstacle>,
}

impl PlanarArm {
    pub fn new(
        link_lengths: Vec<f64>,
        base_position: [f64; 2],
        joint_limits: Vec<[f64; 2]>,
        obstacles: Vec<WorkspaceObstacle>,
    ) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(Error::Config("arm needs at least one link".into()));
        }
        if link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("link lengths must be > 0".into()));
        }
        if joint_limits.len() != link_lengths.len() {
            return Err(Error::Config("one joint limit pair per link required".into()));
        }
        if joint_limits.iter().any(|l| l[0] >= l[1]) {
            return Err(Error::Config("joint limits must satisfy lo < hi".into()));
        }
        Ok(Self { link_lengths, base_position, joint_limits, obstacles })
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn total_length(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Forward kinematics: joint positions, base first. Always returns
    /// `link_lengths.len() + 1` points.
    pub fn forward_kinematics(&self, q: &[f64]) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let mut p = self.base_position;
        pts.push(p);
        let mut angle = 0.0;
        for (len, &theta) in self.link_lengths.iter().zip(q.iter()) {
            angle += theta;
            p = [p[0] + len * angle.cos(), p[1] + len * angle.sin()];
            pts.push(p);
        }
        pts
    }

    fn in_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q.iter()
                .zip(self.joint_limits.iter())
                .all(|(&x, lim)| x >= lim[0] && x <= lim[1])
    }

    /// Signed distance between the arm and its obstacle set, floored at 0.
    ///
    /// Reports the minimum over links and obstacles of the link-segment to
    /// obstacle distance; penetration clamps to 0. Ties pick the first
    /// minimizer in (link, obstacle) order.
    pub fn d_obs(&self, q: &[f64]) -> Result<f64> {
        Ok(self.d_obs_with_grad(q)?.0)
    }

    /// Clearance and its gradient w.r.t. joint angles.
    ///
    /// Uses the chain rule through forward kinematics at the minimizing
    /// (link, obstacle) pair; the closest-point parameter is stationary at the
    /// minimum, so holding it fixed gives the exact gradient almost everywhere.
    pub fn d_obs_with_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !self.in_limits(q) {
            return Err(Error::OutOfDomain(q.to_vec()));
        }
        if self.obstacles.is_empty() {
            return Ok((f64::INFINITY, vec![0.0; self.dof()]));
        }
        let joints = self.forward_kinematics(q);
        let mut best: Option<(f64, usize, [f64; 2], [f64; 2], f64)> = None;
        for link in 0..self.dof() {
            let a = joints[link];
            let b = joints[link + 1];
            for obs in &self.obstacles {
                let (dist, on_seg, on_obs, t) = match obs {
                    WorkspaceObstacle::Disc { center, radius } => {
                        let (t, m) = closest_on_segment(a, b, *center);
                        let gap = norm2(sub(*center, m));
                        let dir = if gap > 0.0 {
                            [(center[0] - m[0]) / gap, (center[1] - m[1]) / gap]
                        } else {
                            [0.0, 0.0]
                        };
                        // Closest obstacle point lies on the disc rim toward m.
                        let rim = [center[0] - dir[0] * radius, center[1] - dir[1] * radius];
                        (gap - radius, m, rim, t)
                    }
                    WorkspaceObstacle::Aabb { min, max } => {
                        let (dist, m_seg, m_box, t) = segment_aabb_distance(a, b, *min, *max);
                        (dist, m_seg, m_box, t)
                    }
                };
                // Strict < keeps the first minimizer on ties.
                if best.map_or(true, |(bd, ..)| dist < bd) {
                    best = Some((dist, link, on_seg, on_obs, t));
                }
            }
        }
        let (dist, link, on_seg, on_obs, t) = best.unwrap();
        if dist <= 0.0 {
            return Ok((0.0, vec![0.0; self.dof()]));
        }
        // grad d = ((m_seg - m_obs)/d) . dm_seg/dq, with m_seg = (1-t) a + t b.
        let dir = [(on_seg[0] - on_obs[0]) / dist, (on_seg[1] - on_obs[1]) / dist];
        let mut grad = vec![0.0; self.dof()];
        for (j, g) in grad.iter_mut().enumerate() {
            let da = jacobian_column(&joints, link, j);
            let db = jacobian_column(&joints, link + 1, j);
            let dm = [
                (1.0 - t) * da[0] + t * db[0],
                (1.0 - t) * da[1] + t * db[1],
            ];
            *g = dir[0] * dm[0] + dir[1] * dm[1];
        }
        Ok((dist, grad))
    }
}

/// dp_k/dq_j for a planar chain: rotate (p_k - p_j) by 90 degrees; zero when
/// joint j is at or beyond point k.
fn jacobian_column(joints: &[[f64; 2]], point: usize, j: usize) -> [f64; 2] {
    if j >= point {
        return [0.0, 0.0];
    }
    let v = sub(joints[point], joints[j]);
    [-v[1], v[0]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Closest point on segment [a, b] to p; returns the parameter t and point.
fn closest_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> (f64, [f64; 2]) {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (t, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0]);
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        cross(o, p, q) == 0.0
            && q[0] >= o[0].min(p[0])
            && q[0] <= o[0].max(p[0])
            && q[1] >= o[1].min(p[1])
            && q[1] <= o[1].max(p[1])
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// Distance between two segments with the closest pair of points and the
/// parameter of the closest point on the first segment.
fn segment_segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> (f64, [f64; 2], [f64; 2], f64) {
    if segments_intersect(a, b, c, d) {
        return (0.0, a, a, 0.0);
    }
    let mut best = (f64::INFINITY, a, c, 0.0);
    let (t, m) = closest_on_segment(a, b, c);
    let dist = norm2(sub(c, m));
    if dist < best.0 {
        best = (dist, m, c, t);
    }
    let (t, m) = closest_on_segment(a, b, d);
    let dist = norm2(sub(d, m));
    if dist < best.0 {
        best = (dist, m, d, t);
    }
    let (_, m) = closest_on_segment(c, d, a);
    let dist = norm2(sub(a, m));
    if dist < best.0 {
        best = (dist, a, m, 0.0);
    }
    let (_, m) = closest_on_segment(c, d, b);
    let dist = norm2(sub(b, m));
    if dist < best.0 {
        best = (dist, b, m, 1.0);
    }
    best
}

fn point_in_aabb(p: [f64; 2], min: [f64; 2], max: [f64; 2]) -> bool {
    p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1]
}

/// Distance from a segment to a solid axis-aligned box (0 when intersecting),
/// with the closest pair and the segment parameter.
fn segment_aabb_distance(a: [f64; 2], b: [f64; 2], min: [f64; 2], max: [f64; 2]) -> (f64, [f64; 2], [f64; 2], f64) {
    if point_in_aabb(a, min, max) || point_in_aabb(b, min, max) {
        return (0.0, a, a, 0.0);
    }
    let corners = [
        [min[0], min[1]],
        [max[0], min[1]],
        [max[0], max[1]],
        [min[0], max[1]],
    ];
    let mut best = (f64::INFINITY, a, corners[0], 0.0);
    for e in 0..4 {
        let c = corners[e];
        let d = corners[(e + 1) % 4];
        let (dist, on_seg, on_edge, t) = segment_segment_distance(a, b, c, d);
        if dist < best.0 {
            best = (dist, on_seg, on_edge, t);
        }
        if dist == 0.0 {
            return best;
        }
    }
    best
}

/// Grid environment: a point robot on an occupancy grid.
#[derive(Debug, Clone)]
pub struct GridEnv {
    pub grid: OccupancyGrid,
    pub speed: SpeedParams,
}

impl GridEnv {
    pub fn new(grid: OccupancyGrid, speed: Option<SpeedParams>) -> Self {
        let speed = speed.unwrap_or_else(|| SpeedParams::for_grid(grid.resolution()));
        Self { grid, speed }
    }
}

/// Arm environment: a planar chain among workspace obstacles.
#[derive(Debug, Clone)]
pub struct ArmEnv {
    pub arm: PlanarArm,
    pub speed: SpeedParams,
}

impl ArmEnv {
    pub fn new(arm: PlanarArm, speed: Option<SpeedParams>) -> Self {
        let speed = speed.unwrap_or_else(|| SpeedParams::for_arm(arm.total_length()));
        Self { arm, speed }
    }
}

/// Obstacle geometry plus speed field over a configuration space.
#[derive(Debug, Clone)]
pub enum EnvironmentModel {
    Grid(GridEnv),
    Arm(ArmEnv),
}

impl EnvironmentModel {
    pub fn dof(&self) -> usize {
        match self {
            Self::Grid(g) => g.grid.dims(),
            Self::Arm(a) => a.arm.dof(),
        }
    }

    pub fn speed_params(&self) -> SpeedParams {
        match self {
            Self::Grid(g) => g.speed,
            Self::Arm(a) => a.speed,
        }
    }

    /// Configuration-space bounding box (lower, upper).
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Grid(g) => g.grid.bounds(),
            Self::Arm(a) => {
                let lo = a.arm.joint_limits.iter().map(|l| l[0]).collect();
                let hi = a.arm.joint_limits.iter().map(|l| l[1]).collect();
                (lo, hi)
            }
        }
    }

    /// Diagonal length of the configuration bounding box.
    pub fn domain_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        lo.iter()
            .zip(hi.iter())
            .map(|(&l, &u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// Clamp a configuration to the bounding box.
    pub fn clamp_to_bounds(&self, q: &mut [f64]) {
        let (lo, hi) = self.bounds();
        for (x, (&l, &u)) in q.iter_mut().zip(lo.iter().zip(hi.iter())) {
            *x = x.clamp(l, u);
        }
    }

    /// Obstacle clearance at a configuration.
    pub fn d_obs(&self, q: &[f64]) -> Result<f64> {
        match self {
            Self::Grid(g) => g.grid.clearance_at(q),
            Self::Arm(a) => a.arm.d_obs(q),
        }
    }

    /// Clearance and its configuration-space gradient.
    pub fn d_obs_with_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Self::Grid(g) => g.grid.clearance_with_grad(q),
            Self::Arm(a) => a.arm.d_obs_with_grad(q),
        }
    }

    /// Ground-truth speed `S*(q) = clip(d_obs/d_max, d_min/d_max, 1)`.
    pub fn speed_star(&self, q: &[f64]) -> Result<f64> {
        Ok(self.speed_params().speed(self.d_obs(q)?))
    }

    /// Exact gradient of `speed_star`; zero in the clamped regions.
    pub fn speed_star_grad(&self, q: &[f64]) -> Result<Vec<f64>> {
        let p = self.speed_params();
        let (d, grad) = self.d_obs_with_grad(q)?;
        if p.is_linear(d) {
            Ok(grad.iter().map(|g| g / p.d_max).collect())
        } else {
            Ok(vec![0.0; self.dof()])
        }
    }

    /// Speed and gradient in one evaluation.
    pub fn speed_star_with_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.speed_params();
        let (d, grad) = self.d_obs_with_grad(q)?;
        let s = p.speed(d);
        let g = if p.is_linear(d) {
            grad.iter().map(|g| g / p.d_max).collect()
        } else {
            vec![0.0; self.dof()]
        };
        Ok((s, g))
    }

    /// Draw `n` configurations uniformly from the bounding box, rejecting any
    /// with `d_obs <= 0`. Deterministic for a fixed seed.
    ///
    /// Fails with "free space too small" when the acceptance rate stays below
    /// 0.1% after a million trials.
    pub fn sample_free(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_free_with(n, &mut rng)
    }

    /// Same as [`sample_free`](Self::sample_free) over a caller-owned stream.
    pub fn sample_free_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        const MAX_TRIALS: usize = 1_000_000;
        const MIN_RATE: f64 = 1e-3;
        let (lo, hi) = self.bounds();
        let mut out = Vec::with_capacity(n);
        let mut trials = 0usize;
        while out.len() < n {
            let q: Vec<f64> = lo
                .iter()
                .zip(hi.iter())
                .map(|(&l, &u)| rng.gen_range(l..=u))
                .collect();
            trials += 1;
            if self.d_obs(&q).map(|d| d > 0.0).unwrap_or(false) {
                out.push(q);
            }
            if trials >= MAX_TRIALS {
                let rate = out.len() as f64 / trials as f64;
                if rate < MIN_RATE {
                    return Err(Error::FreeSpaceTooSmall { rate, trials });
                }
            }
        }
        Ok(out)
    }

    /// Load an environment description. `.toml` files describe arm scenes;
    /// anything else is read as a grid map (`.pgm` or plain text).
    pub fn load(path: &Path, resolution: Option<f64>) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                let text = fs::read_to_string(path)?;
                let cfg: ArmSceneConfig =
                    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
                cfg.build()
            }
            Some("pgm") => Ok(Self::Grid(GridEnv::new(OccupancyGrid::from_pgm_file(path, resolution)?, None))),
            _ => Ok(Self::Grid(GridEnv::new(
                OccupancyGrid::from_text_map_file(path, resolution)?,
                None,
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ArmSceneConfig {
    link_lengths: Vec<f64>,
    #[serde(default)]
    base: [f64; 2],
    joint_limits: Vec<[f64; 2]>,
    d_min: Option<f64>,
    d_max: Option<f64>,
    #[serde(default)]
    obstacle: Vec<ObstacleConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ObstacleConfig {
    Disc { center: [f64; 2], radius: f64 },
    Box { min: [f64; 2], max: [f64; 2] },
}

impl ArmSceneConfig {
    fn build(self) -> Result<EnvironmentModel> {
        let obstacles = self
            .obstacle
            .into_iter()
            .map(|o| match o {
                ObstacleConfig::Disc { center, radius } => WorkspaceObstacle::Disc { center, radius },
                ObstacleConfig::Box { min, max } => WorkspaceObstacle::Aabb { min, max },
            })
            .collect();
        let arm = PlanarArm::new(self.link_lengths, self.base, self.joint_limits, obstacles)?;
        let speed = match (self.d_min, self.d_max) {
            (Some(lo), Some(hi)) => Some(SpeedParams::new(lo, hi)?),
            (None, None) => None,
            _ => return Err(Error::Config("d_min and d_max must be given together".into())),
        };
        Ok(EnvironmentModel::Arm(ArmEnv::new(arm, speed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_env_with_center_box() -> EnvironmentModel {
        // 21x21, box obstacle in the middle.
        let (nx, ny) = (21, 21);
        let mut occ = vec![false; nx * ny];
        for y in 9..=11 {
            for x in 9..=11 {
                occ[y * nx + x] = true;
            }
        }
        let grid = OccupancyGrid::new(&[nx, ny], 0.05, &[0.0, 0.0], occ).unwrap();
        EnvironmentModel::Grid(GridEnv::new(grid, None))
    }

    fn two_link_env() -> EnvironmentModel {
        let arm = PlanarArm::new(
            vec![0.5, 0.4],
            [0.0, 0.0],
            vec![[-std::f64::consts::PI, std::f64::consts::PI]; 2],
            vec![WorkspaceObstacle::Disc { center: [0.7, 0.4], radius: 0.15 }],
        )
        .unwrap();
        EnvironmentModel::Arm(ArmEnv::new(arm, None))
    }

    #[test]
    fn speed_clamps_and_linear_region() {
        let p = SpeedParams::new(0.1, 1.0).unwrap();
        assert_relative_eq!(p.speed(0.0), 0.1);
        assert_relative_eq!(p.speed(5.0), 1.0);
        assert_relative_eq!(p.speed(0.5), 0.5);
    }

    #[test]
    fn d_obs_at_node_matches_lattice() {
        let env = grid_env_with_center_box();
        let EnvironmentModel::Grid(g) = &env else { unreachable!() };
        let q = g.grid.cell_center(3, 7, 0);
        let d = env.d_obs(&q).unwrap();
        assert_relative_eq!(d, g.grid.clearance()[g.grid.index(3, 7, 0)], max_relative = 1e-12);
    }

    #[test]
    fn arm_inside_disc_reports_zero() {
        let arm = PlanarArm::new(
            vec![0.2, 0.2],
            [0.0, 0.0],
            vec![[-3.2, 3.2]; 2],
            vec![WorkspaceObstacle::Disc { center: [0.2, 0.0], radius: 0.6 }],
        )
        .unwrap();
        // Whole arm well inside the disc.
        assert_eq!(arm.d_obs(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn arm_disc_distance_matches_dense_sampling() {
        let env = two_link_env();
        let EnvironmentModel::Arm(a) = &env else { unreachable!() };
        let q = [0.3, -0.4];
        let d = env.d_obs(&q).unwrap();
        // Oracle: densely sample each link, min point distance minus radius.
        let joints = a.arm.forward_kinematics(&q);
        let mut best = f64::INFINITY;
        for l in 0..2 {
            let (p0, p1) = (joints[l], joints[l + 1]);
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                let p = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                let dist = ((p[0] - 0.7f64).powi(2) + (p[1] - 0.4f64).powi(2)).sqrt() - 0.15;
                best = best.min(dist);
            }
        }
        assert!((d - best.max(0.0)).abs() < 1e-3, "d={d} oracle={best}");
    }

    #[test]
    fn fk_point_count() {
        let arm = PlanarArm::new(vec![1.0, 1.0, 0.5], [0.1, 0.2], vec![[-3.0, 3.0]; 3], vec![]).unwrap();
        assert_eq!(arm.forward_kinematics(&[0.1, 0.2, 0.3]).len(), 4);
    }

    #[test]
    fn grid_speed_grad_matches_finite_differences() {
        let env = grid_env_with_center_box();
        let h = 0.05;
        let step = h / 100.0;
        // Probe points in the linear region, away from clamp boundaries.
        let probes = [[0.30, 0.55], [0.62, 0.40], [0.42, 0.68]];
        for q in probes {
            let d = env.d_obs(&q).unwrap();
            let p = env.speed_params();
            if !(d > p.d_min + 2.0 * h && d < p.d_max - 2.0 * h) {
                continue;
            }
            let g = env.speed_star_grad(&q).unwrap();
            for a in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[a] += step;
                qm[a] -= step;
                let fd = (env.speed_star(&qp).unwrap() - env.speed_star(&qm).unwrap()) / (2.0 * step);
                assert_relative_eq!(g[a], fd, max_relative = 1e-4, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn arm_speed_grad_matches_finite_differences() {
        let env = two_link_env();
        let step = 1e-6;
        let probes = [[0.3, -0.4], [0.9, 0.5], [-0.5, 1.1], [1.4, -0.8]];
        let p = env.speed_params();
        for q in probes {
            let d = env.d_obs(&q).unwrap();
            if !(d > p.d_min * 1.1 && d < p.d_max * 0.9) {
                continue;
            }
            let g = env.speed_star_grad(&q).unwrap();
            for a in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[a] += step;
                qm[a] -= step;
                let fd = (env.speed_star(&qp).unwrap() - env.speed_star(&qm).unwrap()) / (2.0 * step);
                assert_relative_eq!(g[a], fd, max_relative = 1e-3, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn clamped_region_gradient_is_zero() {
        let env = grid_env_with_center_box();
        // Far corner: d_obs >= d_max.
        let g = env.speed_star_grad(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn speed_range_over_random_samples() {
        let env = grid_env_with_center_box();
        let samples = env.sample_free(10_000, 42).unwrap();
        let p = env.speed_params();
        for q in &samples {
            let s = env.speed_star(q).unwrap();
            assert!(s >= p.floor() - 1e-12 && s <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_in_bounds() {
        let grid = OccupancyGrid::new(&[8, 8], 1.0, &[0.0, 0.0], {
            let mut o = vec![false; 64];
            o[0] = true;
            o
        })
        .unwrap();
        let env = EnvironmentModel::Grid(GridEnv::new(grid, None));
        let a = env.sample_free(4, 9).unwrap();
        let b = env.sample_free(4, 9).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = env.bounds();
        for q in &a {
            for d in 0..2 {
                assert!(q[d] >= lo[d] && q[d] <= hi[d]);
            }
        }
    }

    #[test]
    fn all_occupied_sampler_fails() {
        // Bypass the distance transform by building a grid whose free cells
        // all have zero clearance: a fully occupied occupancy with a manually
        // crafted grid is rejected at construction, so use an arm squeezed
        // inside an obstacle instead.
        let arm = PlanarArm::new(
            vec![0.2],
            [0.0, 0.0],
            vec![[-3.0, 3.0]],
            vec![WorkspaceObstacle::Disc { center: [0.0, 0.0], radius: 1.0 }],
        )
        .unwrap();
        let env = EnvironmentModel::Arm(ArmEnv::new(arm, None));
        let err = env.sample_free(1, 1).unwrap_err();
        assert!(err.to_string().contains("free space too small"));
    }

    #[test]
    fn half_occupied_sampling_stays_free() {
        let (nx, ny) = (16, 16);
        let mut occ = vec![false; nx * ny];
        for y in 0..ny {
            for x in 0..nx / 2 {
                occ[y * nx + x] = true;
            }
        }
        let grid = OccupancyGrid::new(&[nx, ny], 1.0, &[0.0, 0.0], occ).unwrap();
        let env = EnvironmentModel::Grid(GridEnv::new(grid, None));
        let samples = env.sample_free(10_000, 5).unwrap();
        for q in &samples {
            assert!(env.d_obs(q).unwrap() > 0.0);
        }
    }

    #[test]
    fn arm_scene_toml_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arm.toml");
        std::fs::write(
            &path,
            r#"
link_lengths = [0.5, 0.4]
base = [0.0, 0.0]
joint_limits = [[-3.1415, 3.1415], [-3.1415, 3.1415]]

[[obstacle]]
kind = "disc"
center = [0.7, 0.4]
radius = 0.15

[[obstacle]]
kind = "box"
min = [-0.9, -0.9]
max = [-0.5, -0.5]
"#,
        )
        .unwrap();
        let env = EnvironmentModel::load(&path, None).unwrap();
        assert_eq!(env.dof(), 2);
        assert!(env.d_obs(&[0.0, 0.0]).is_ok());
    }
}
