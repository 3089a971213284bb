//! Path inference over a trained travel-time field: sampling-based MPC with
//! softmax-weighted action averaging and receding-horizon rollouts, plus the
//! plain gradient follower, and collision validation.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

use crate::autodiff::GRAD_GUARD;
use crate::env::EnvironmentModel;
use crate::model::TravelTimeField;
use crate::{Error, Result};

/// Sampling-based MPC knobs.
///
/// None of these are prescribed by the training side; the defaults scale the
/// step with the domain diagonal and normalize the softmax sharpness with
/// [`MpcConfig::calibrate_beta`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcConfig {
    pub n_samples: usize,
    pub horizon: usize,
    pub n_rollouts: usize,
    /// Step size in configuration units.
    pub step: f64,
    /// Softmax temperature (1 / time units).
    pub beta: f64,
    pub max_iters: usize,
    pub goal_tolerance: f64,
    /// Standard deviation of action sampling before normalization.
    pub sigma: f64,
    pub seed: u64,
}

impl MpcConfig {
    /// Geometry-scaled defaults for an environment.
    ///
    /// The softmax temperature resolves travel-time differences at the step
    /// scale (`beta = 4 / step`); temperatures tied to the global travel-time
    /// scale leave the per-step softmax nearly uniform and produce visibly
    /// wandering paths.
    pub fn defaults_for(env: &EnvironmentModel) -> Self {
        let step = 0.02 * env.domain_diagonal();
        Self {
            n_samples: 64,
            horizon: 10,
            n_rollouts: 8,
            step,
            beta: 4.0 / step,
            max_iters: 500,
            goal_tolerance: 2.0 * step,
            sigma: step,
            seed: 0,
        }
    }

    /// Set `beta = 10 / mean T` over seeded random free pairs, floored at the
    /// step-scale sharpness `4 / step`.
    pub fn calibrate_beta(
        &mut self,
        field: &dyn TravelTimeField,
        env: &EnvironmentModel,
        seed: u64,
    ) -> Result<()> {
        let pairs = 32;
        let qs = env.sample_free(pairs, seed)?;
        let qg = env.sample_free(pairs, seed.wrapping_add(1))?;
        let mut acc = 0.0;
        let mut n = 0usize;
        for (a, b) in qs.iter().zip(qg.iter()) {
            let t = field.evaluate(a, b)?.t;
            if t.is_finite() && t > 0.0 {
                acc += t;
                n += 1;
            }
        }
        if n > 0 && acc > 0.0 {
            self.beta = (10.0 / (acc / n as f64)).max(4.0 / self.step);
        }
        Ok(())
    }
}

/// Planner output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub waypoints: Vec<Vec<f64>>,
    pub success: bool,
    /// Sum of consecutive configuration-space Euclidean distances.
    pub path_length: f64,
    /// Seconds spent inside the planner call.
    pub wall_time: f64,
    /// Cost-to-go at each committed waypoint.
    pub cost_trace: Vec<f64>,
}

impl PlanResult {
    fn from_waypoints(waypoints: Vec<Vec<f64>>, success: bool, cost_trace: Vec<f64>, started: Instant) -> Self {
        let path_length = waypoints
            .windows(2)
            .map(|w| dist(&w[0], &w[1]))
            .sum();
        Self { waypoints, success, path_length, wall_time: started.elapsed().as_secs_f64(), cost_trace }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One action choice at `q`.
///
/// Samples `n_samples` directions from `N(mu, sigma^2 I)` scaled to length
/// `step`, zero-weights colliding candidates, and softmax-weights the rest by
/// `-beta T`. The greedy mode applies the weighted-average action (falling
/// back to the best free candidate when the average collides); the stochastic
/// mode draws the applied action from the softmax weights, which keeps
/// rollouts diverse enough to escape spurious minima while agreeing with the
/// weighted average in expectation. Returns None when every candidate
/// collides even after widening sigma once.
#[allow(clippy::too_many_arguments)]
fn rollout_action(
    q: &[f64],
    mu: &[f64],
    stochastic: bool,
    field: &dyn TravelTimeField,
    env: &EnvironmentModel,
    qg: &[f64],
    cfg: &MpcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    let dof = q.len();
    for attempt in 0..2 {
        let sigma = cfg.sigma * (1.0 + attempt as f64);
        let mut actions = Array2::zeros((cfg.n_samples, dof));
        let mut candidates = Array2::zeros((cfg.n_samples, dof));
        let mut free = vec![false; cfg.n_samples];
        let mut any_free = false;
        for i in 0..cfg.n_samples {
            let mut norm2 = 0.0;
            for d in 0..dof {
                let z: f64 = sample_normal(rng);
                let u = mu[d] + sigma * z;
                actions[[i, d]] = u;
                norm2 += u * u;
            }
            let norm = norm2.sqrt().max(1e-12);
            for d in 0..dof {
                actions[[i, d]] *= cfg.step / norm;
                candidates[[i, d]] = q[d] + actions[[i, d]];
            }
            let mut row = candidates.row(i).to_vec();
            env.clamp_to_bounds(&mut row);
            for d in 0..dof {
                candidates[[i, d]] = row[d];
                actions[[i, d]] = row[d] - q[d];
            }
            free[i] = env.d_obs(&row).map(|d| d > 0.0).unwrap_or(false);
            any_free |= free[i];
        }
        if !any_free {
            continue;
        }
        let times = field.values_to_goal(&candidates.view(), qg)?;
        let min_t = times
            .iter()
            .zip(free.iter())
            .filter(|(_, &f)| f)
            .map(|(t, _)| *t)
            .fold(f64::INFINITY, f64::min);
        let mut weights = Array1::zeros(cfg.n_samples);
        let mut total = 0.0;
        for i in 0..cfg.n_samples {
            if free[i] {
                let w = (-cfg.beta * (times[i] - min_t)).exp();
                weights[i] = w;
                total += w;
            }
        }
        if total <= 0.0 {
            continue;
        }
        if stochastic {
            // Categorical draw proportional to the softmax weights; colliding
            // candidates have zero weight and are never drawn.
            let u: f64 = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut picked = cfg.n_samples - 1;
            for i in 0..cfg.n_samples {
                acc += weights[i];
                if u < acc {
                    picked = i;
                    break;
                }
            }
            return Ok(Some(actions.row(picked).to_vec()));
        }
        let mut avg = vec![0.0; dof];
        for i in 0..cfg.n_samples {
            if weights[i] > 0.0 {
                for d in 0..dof {
                    avg[d] += weights[i] / total * actions[[i, d]];
                }
            }
        }
        let mut stepped: Vec<f64> = q.iter().zip(&avg).map(|(a, b)| a + b).collect();
        env.clamp_to_bounds(&mut stepped);
        if env.d_obs(&stepped).map(|d| d > 0.0).unwrap_or(false) {
            return Ok(Some(stepped.iter().zip(q.iter()).map(|(a, b)| a - b).collect()));
        }
        // Averaged action collides: fall back to the best free candidate.
        let mut best = None;
        for i in 0..cfg.n_samples {
            if free[i] && best.map_or(true, |(_, w)| weights[i] > w) {
                best = Some((i, weights[i]));
            }
        }
        if let Some((i, _)) = best {
            return Ok(Some(actions.row(i).to_vec()));
        }
    }
    Ok(None)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on the deterministic stream.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sampling-based MPC: receding-horizon rollouts with softmax-weighted action
/// averaging; commits the first action of the lowest-cost rollout each
/// iteration. Deterministic for a fixed seed.
pub fn mpc_plan(
    qs: &[f64],
    qg: &[f64],
    field: &dyn TravelTimeField,
    env: &EnvironmentModel,
    cfg: &MpcConfig,
) -> Result<PlanResult> {
    let started = Instant::now();
    if env.d_obs(qs)? <= 0.0 || env.d_obs(qg)? <= 0.0 {
        return Err(Error::SourceInObstacle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = qs.to_vec();
    let mut waypoints = vec![q.clone()];
    let mut trace = vec![field.evaluate(&q, qg)?.t];
    let mut mu = vec![0.0; q.len()];

    if dist(&q, qg) <= cfg.goal_tolerance {
        return Ok(PlanResult::from_waypoints(waypoints, true, trace, started));
    }

    let mut success = false;
    for _ in 0..cfg.max_iters {
        // Roll out candidates; each rollout keeps its own mean. Rollout 0 is
        // the greedy weighted-average descent; the rest explore by sampling.
        let mut best: Option<(Vec<f64>, f64)> = None;
        for r in 0..cfg.n_rollouts {
            let mut sim_q = q.clone();
            let mut roll_mu = mu.clone();
            let mut first_action: Option<Vec<f64>> = None;
            for h in 0..cfg.horizon {
                match rollout_action(&sim_q, &roll_mu, r > 0, field, env, qg, cfg, &mut rng)? {
                    Some(action) => {
                        for (x, a) in sim_q.iter_mut().zip(action.iter()) {
                            *x += a;
                        }
                        roll_mu = action.clone();
                        if h == 0 {
                            first_action = Some(action);
                        }
                        if dist(&sim_q, qg) <= cfg.goal_tolerance {
                            break;
                        }
                    }
                    None => break,
                }
            }
            if let Some(action) = first_action {
                let cost = field
                    .values_to_goal(&ndarray::ArrayView2::from_shape((1, sim_q.len()), &sim_q).unwrap(), qg)?[0];
                if best.as_ref().map_or(true, |(_, c)| cost < *c) {
                    best = Some((action, cost));
                }
            }
        }
        let Some((action, _)) = best else {
            break; // every rollout failed its first step
        };
        for (x, a) in q.iter_mut().zip(action.iter()) {
            *x += a;
        }
        mu = action;
        let t_here = field.values_to_goal(&ndarray::ArrayView2::from_shape((1, q.len()), &q).unwrap(), qg)?[0];
        trace.push(t_here);
        waypoints.push(q.clone());
        if dist(&q, qg) <= cfg.goal_tolerance {
            success = true;
            break;
        }
    }
    Ok(PlanResult::from_waypoints(waypoints, success, trace, started))
}

/// Gradient follower: `q <- q - step * grad T / ||grad T||` from the start.
/// Stalls (gradient guard, no progress over 50 steps, or a collision) end the
/// run with `success = false`.
pub fn gradient_plan(
    qs: &[f64],
    qg: &[f64],
    field: &dyn TravelTimeField,
    env: &EnvironmentModel,
    step: f64,
    cap: usize,
) -> Result<PlanResult> {
    let started = Instant::now();
    if env.d_obs(qs)? <= 0.0 || env.d_obs(qg)? <= 0.0 {
        return Err(Error::SourceInObstacle);
    }
    let tolerance = 2.0 * step;
    let mut q = qs.to_vec();
    let mut waypoints = vec![q.clone()];
    let mut trace = vec![field.evaluate(&q, qg)?.t];
    let mut success = false;
    let mut recent: Vec<Vec<f64>> = vec![q.clone()];
    for _ in 0..cap {
        if dist(&q, qg) <= tolerance {
            success = true;
            break;
        }
        let eval = field.evaluate(&q, qg)?;
        let g = &eval.grad_qs;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= GRAD_GUARD {
            break; // stalled on a flat spot
        }
        for (x, gi) in q.iter_mut().zip(g.iter()) {
            *x -= step * gi / norm;
        }
        env.clamp_to_bounds(&mut q);
        if env.d_obs(&q)? <= 0.0 {
            waypoints.push(q.clone());
            trace.push(field.evaluate(&q, qg)?.t);
            break; // walked into an obstacle; not a success
        }
        waypoints.push(q.clone());
        trace.push(eval.t);
        recent.push(q.clone());
        if recent.len() > 50 {
            let old = recent.remove(0);
            if dist(&old, &q) < step * 0.5 {
                break; // orbiting a spurious minimum
            }
        }
    }
    if dist(&q, qg) <= tolerance {
        success = true;
    }
    Ok(PlanResult::from_waypoints(waypoints, success, trace, started))
}

/// Where a path first leaves free space.
#[derive(Debug, Clone, PartialEq)]
pub struct PathViolation {
    /// Index of the segment (or waypoint) where the violation occurs.
    pub segment: usize,
    /// Interpolation parameter along the segment.
    pub t: f64,
    pub point: Vec<f64>,
}

/// Check `d_obs > 0` at every waypoint and at interpolated points every
/// `sub_step` along each segment. Returns the first violation, if any.
pub fn validate_path(
    waypoints: &[Vec<f64>],
    env: &EnvironmentModel,
    sub_step: f64,
) -> Result<(bool, Option<PathViolation>)> {
    if waypoints.is_empty() {
        return Err(Error::Config("validate_path needs at least one waypoint".into()));
    }
    for (i, w) in waypoints.iter().enumerate() {
        if env.d_obs(w).map(|d| d <= 0.0).unwrap_or(true) {
            return Ok((false, Some(PathViolation { segment: i, t: 0.0, point: w.clone() })));
        }
    }
    for (i, pair) in waypoints.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let len = dist(a, b);
        if len == 0.0 {
            continue;
        }
        let steps = (len / sub_step).ceil() as usize;
        for s in 1..steps {
            let t = s as f64 / steps as f64;
            let p: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + t * (y - x)).collect();
            if env.d_obs(&p).map(|d| d <= 0.0).unwrap_or(true) {
                return Ok((false, Some(PathViolation { segment: i, t, point: p })));
            }
        }
    }
    Ok((true, None))
}
