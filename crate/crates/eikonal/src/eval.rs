//! Benchmark harness shared by the CLI: experiment configs, the grid MAE
//! protocol, planner benchmarks, field dumps, and post-hoc field checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::Deserialize;

use crate::env::{EnvironmentModel, GridEnv, SpeedParams};
use crate::fmm::{fmm_solve, FmmSolution};
use crate::grid::{GridField, OccupancyGrid};
use crate::model::{metric_distance_flat, HeadKind, Model};
use crate::plan::{gradient_plan, mpc_plan, validate_path, MpcConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Experiment description loaded from a TOML config file: environment plus
/// training hyperparameters. Paths are resolved relative to the config file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env_path: PathBuf,
    pub resolution: Option<f64>,
    pub speed: Option<SpeedParams>,
    pub train: TrainConfig,
    /// Hash of the raw config text, for provenance headers.
    pub config_hash: String,
}

#[derive(Debug, Deserialize)]
struct ExperimentFile {
    env: EnvSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Deserialize)]
struct EnvSection {
    map: PathBuf,
    resolution: Option<f64>,
    d_min: Option<f64>,
    d_max: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    lambda_e: Option<f64>,
    lambda_td: Option<f64>,
    lambda_n: Option<f64>,
    lambda_c: Option<f64>,
    dt: Option<f64>,
    #[serde(default)]
    model: ModelSection,
}

#[derive(Debug, Deserialize, Default)]
struct ModelSection {
    fourier_features: Option<usize>,
    sigma: Option<f64>,
    width: Option<usize>,
    depth: Option<usize>,
    activation: Option<String>,
    head_a: Option<usize>,
    head_b: Option<usize>,
    head_kind: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ExperimentFile =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut train = TrainConfig::default();
        let t = &file.train;
        if let Some(v) = t.epochs {
            train.epochs = v;
        }
        if let Some(v) = t.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = t.seed {
            train.seed = v;
        }
        if let Some(v) = t.lr {
            train.lr = v;
        }
        if let Some(v) = t.lambda_e {
            train.weights.lambda_e = v;
        }
        if let Some(v) = t.lambda_td {
            train.weights.lambda_td = v;
        }
        if let Some(v) = t.lambda_n {
            train.weights.lambda_n = v;
        }
        if let Some(v) = t.lambda_c {
            train.weights.lambda_c = v;
        }
        if let Some(v) = t.dt {
            train.weights.dt = v;
        }
        let m = &t.model;
        if let Some(v) = m.fourier_features {
            train.model.fourier_features = v;
        }
        if let Some(v) = m.sigma {
            train.model.sigma = v;
        }
        if let Some(v) = m.width {
            train.model.width = v;
        }
        if let Some(v) = m.depth {
            train.model.depth = v;
        }
        if let Some(v) = &m.activation {
            train.model.activation = v.parse()?;
        }
        if let Some(v) = m.head_a {
            train.model.head.a = v;
        }
        if let Some(v) = m.head_b {
            train.model.head.b = v;
        }
        if let Some(v) = &m.head_kind {
            train.model.head.kind = match v.as_str() {
                "metric" => HeadKind::Metric,
                "factorized-baseline" => HeadKind::FactorizedBaseline,
                "euclidean-baseline" => HeadKind::EuclideanBaseline,
                other => return Err(Error::Config(format!("unknown head kind '{other}'"))),
            };
        }
        let speed = match (file.env.d_min, file.env.d_max) {
            (Some(lo), Some(hi)) => Some(SpeedParams::new(lo, hi)?),
            (None, None) => None,
            _ => return Err(Error::Config("d_min and d_max must be given together".into())),
        };
        Ok(Self {
            env_path: base.join(&file.env.map),
            resolution: file.env.resolution,
            speed,
            train,
            config_hash: content_hash(&text),
        })
    }

    pub fn build_env(&self) -> Result<EnvironmentModel> {
        let mut env = EnvironmentModel::load(&self.env_path, self.resolution)?;
        if let Some(speed) = self.speed {
            match &mut env {
                EnvironmentModel::Grid(g) => g.speed = speed,
                EnvironmentModel::Arm(a) => a.speed = speed,
            }
        }
        Ok(env)
    }
}

/// Short content hash for provenance headers.
pub fn content_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    hex_prefix(&digest, 8)
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// `# key=value` provenance lines prepended to CSV outputs.
pub fn provenance_header(config_hash: &str, seed: u64) -> String {
    format!(
        "# config_hash={} seed={} version={}\n",
        config_hash,
        seed,
        env!("CARGO_PKG_VERSION")
    )
}

/// Deterministic oracle source: the free cell nearest the domain center.
pub fn default_oracle_source(env: &GridEnv) -> Vec<f64> {
    let grid = &env.grid;
    let [nx, ny, nz] = grid.shape();
    let center = [(nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, (nz - 1) as f64 / 2.0];
    let mut best: Option<(f64, [usize; 3])> = None;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                if grid.occupied(grid.index(ix, iy, iz)) {
                    continue;
                }
                let d = (ix as f64 - center[0]).powi(2)
                    + (iy as f64 - center[1]).powi(2)
                    + (iz as f64 - center[2]).powi(2);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, [ix, iy, iz]));
                }
            }
        }
    }
    let (_, c) = best.expect("grid has free cells");
    grid.cell_center(c[0], c[1], c[2])
}

/// Evaluate `T(q, qg)` at every cell center of the grid.
pub fn model_time_field(model: &Model, grid: &OccupancyGrid, qg: &[f64]) -> Result<GridField> {
    let goal = model.goal_eval(qg)?;
    let [nx, ny, nz] = grid.shape();
    let dims = grid.dims();
    let mut field = GridField {
        dims,
        shape: grid.shape(),
        resolution: grid.resolution(),
        origin: grid.origin(),
        data: vec![0.0; grid.len()],
    };
    let chunk = 4096;
    let mut cells = Vec::with_capacity(chunk);
    let mut starts = Vec::with_capacity(chunk * dims);
    let flush = |cells: &mut Vec<usize>, starts: &mut Vec<f64>, field: &mut GridField| -> Result<()> {
        if cells.is_empty() {
            return Ok(());
        }
        let batch = Array2::from_shape_vec((cells.len(), dims), std::mem::take(starts))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let values = goal.values(&batch.view())?;
        for (i, &idx) in cells.iter().enumerate() {
            field.data[idx] = values[i];
        }
        cells.clear();
        Ok(())
    };
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let idx = grid.index(ix, iy, iz);
                cells.push(idx);
                starts.extend_from_slice(&grid.cell_center(ix, iy, iz));
                if cells.len() == chunk {
                    flush(&mut cells, &mut starts, &mut field)?;
                }
            }
        }
    }
    flush(&mut cells, &mut starts, &mut field)?;
    Ok(field)
}

/// Appendix-B-style error: fix the goal at the oracle source, evaluate the
/// model on all cells, and take the mean absolute difference on free cells.
pub fn model_mae(model: &Model, env: &GridEnv, oracle: &FmmSolution) -> Result<f64> {
    let field = model_time_field(model, &env.grid, &oracle.source)?;
    crate::fmm::mae_vs_oracle(&field, oracle, &env.grid)
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub queries: usize,
    pub time_mean: f64,
    pub time_std: f64,
    pub length_mean: f64,
    pub length_std: f64,
    /// Percent of queries solved.
    pub success_rate: f64,
    pub mae: Option<f64>,
}

/// Per-method benchmark table.
#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub rows: Vec<MethodRow>,
    /// Goal tolerance used for the success criterion; recorded in the header.
    pub goal_tolerance: f64,
}

impl MetricsTable {
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = String::new();
        out.push_str(provenance);
        let _ = writeln!(out, "# goal_tolerance={}", self.goal_tolerance);
        out.push_str("method,queries,time_mean_s,time_std_s,length_mean,length_std,sr_percent,mae\n");
        for r in &self.rows {
            let mae = r.mae.map(|m| format!("{m}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.2},{}",
                r.method, r.queries, r.time_mean, r.time_std, r.length_mean, r.length_std, r.success_rate, mae
            );
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Outcome of one planner over a set of queries.
pub struct PlannerStats {
    pub row: MethodRow,
    /// Success flags per query, aligned with the query order.
    pub successes: Vec<bool>,
}

/// Run a planner callback over seeded random free pairs and aggregate.
/// Success additionally requires the path to validate at the given sub-step.
pub fn benchmark_planner(
    label: &str,
    env: &EnvironmentModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
    sub_step: f64,
    mut plan: impl FnMut(&[f64], &[f64]) -> Result<crate::plan::PlanResult>,
) -> Result<PlannerStats> {
    let mut times = Vec::new();
    let mut lengths = Vec::new();
    let mut successes = Vec::new();
    let mut n_success = 0usize;
    for (qs, qg) in pairs {
        let started = Instant::now();
        let res = plan(qs, qg)?;
        let elapsed = started.elapsed().as_secs_f64();
        times.push(elapsed);
        let valid = if res.success {
            validate_path(&res.waypoints, env, sub_step)?.0
        } else {
            false
        };
        if valid {
            n_success += 1;
            lengths.push(res.path_length);
        }
        successes.push(valid);
    }
    let (time_mean, time_std) = mean_std(&times);
    let (length_mean, length_std) = mean_std(&lengths);
    Ok(PlannerStats {
        row: MethodRow {
            method: label.to_string(),
            queries: pairs.len(),
            time_mean,
            time_std,
            length_mean,
            length_std,
            success_rate: 100.0 * n_success as f64 / pairs.len().max(1) as f64,
            mae: None,
        },
        successes,
    })
}

/// Draw seeded random free query pairs.
pub fn query_pairs(env: &EnvironmentModel, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let starts = env.sample_free(n, seed)?;
    let goals = env.sample_free(n, seed.wrapping_add(0x9e37_79b9))?;
    Ok(starts.into_iter().zip(goals).collect())
}

/// Full evaluation: MAE (grid envs) plus MPC and gradient planner rows.
pub struct EvalOutput {
    pub table: MetricsTable,
    pub mae: Option<f64>,
    pub mpc_sr: f64,
    pub gradient_sr: f64,
    pub mean_mpc_time: f64,
}

pub fn evaluate_checkpoint(
    model: &Model,
    env: &EnvironmentModel,
    n_pairs: usize,
    seed: u64,
    mpc_cfg: &MpcConfig,
) -> Result<EvalOutput> {
    let mae = match env {
        EnvironmentModel::Grid(g) => {
            let source = default_oracle_source(g);
            let oracle = fmm_solve(g, &source)?;
            Some(model_mae(model, g, &oracle)?)
        }
        EnvironmentModel::Arm(_) => None,
    };
    let pairs = query_pairs(env, n_pairs, seed)?;
    let sub_step = match env {
        EnvironmentModel::Grid(g) => g.grid.resolution() / 2.0,
        EnvironmentModel::Arm(_) => mpc_cfg.step / 2.0,
    };
    let mut mpc_stats = benchmark_planner("mpc", env, &pairs, sub_step, |qs, qg| {
        let mut cfg = mpc_cfg.clone();
        cfg.seed = seed;
        mpc_plan(qs, qg, model, env, &cfg)
    })?;
    let grad_stats = benchmark_planner("gradient", env, &pairs, sub_step, |qs, qg| {
        gradient_plan(qs, qg, model, env, mpc_cfg.step, mpc_cfg.max_iters)
    })?;
    mpc_stats.row.mae = mae;
    let mpc_sr = mpc_stats.row.success_rate;
    let gradient_sr = grad_stats.row.success_rate;
    let mean_mpc_time = mpc_stats.row.time_mean;
    let table = MetricsTable {
        rows: vec![mpc_stats.row, grad_stats.row],
        goal_tolerance: mpc_cfg.goal_tolerance,
    };
    Ok(EvalOutput { table, mae, mpc_sr, gradient_sr, mean_mpc_time })
}

/// Count interior local minima deeper than `depth` (cells whose 3x3
/// neighborhood minimum exceeds them by more than `depth`), excluding the
/// goal cell. A clean travel-time field has none.
pub fn spurious_minima(field: &GridField, grid: &OccupancyGrid, goal: &[f64], depth: f64) -> usize {
    let [nx, ny, _] = grid.shape();
    let goal_cell = grid.nearest_cell(goal);
    let mut count = 0usize;
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            if grid.occupied(grid.index(ix, iy, 0)) {
                continue;
            }
            if let Some(gc) = goal_cell {
                if (gc[0] as isize - ix as isize).abs() <= 1 && (gc[1] as isize - iy as isize).abs() <= 1 {
                    continue;
                }
            }
            let here = field.data[field.index(ix, iy, 0)];
            if !here.is_finite() {
                continue;
            }
            let mut best_neighbor = f64::INFINITY;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ax, ay) = ((ix as isize + dx) as usize, (iy as isize + dy) as usize);
                    if grid.occupied(grid.index(ax, ay, 0)) {
                        continue;
                    }
                    best_neighbor = best_neighbor.min(field.data[field.index(ax, ay, 0)]);
                }
            }
            if best_neighbor.is_finite() && best_neighbor - here > depth {
                count += 1;
            }
        }
    }
    count
}

/// Count triangle-inequality violations `T(a,c) > T(a,b) + T(b,c) + tol` over
/// seeded random free triples.
pub fn triangle_violations(model: &Model, env: &EnvironmentModel, triples: usize, seed: u64) -> Result<usize> {
    let a = env.sample_free(triples, seed)?;
    let b = env.sample_free(triples, seed.wrapping_add(1))?;
    let c = env.sample_free(triples, seed.wrapping_add(2))?;
    let mut count = 0usize;
    for i in 0..triples {
        let t_ac = model.evaluate(&a[i], &c[i])?.t;
        let t_ab = model.evaluate(&a[i], &b[i])?.t;
        let t_bc = model.evaluate(&b[i], &c[i])?.t;
        if t_ac > t_ab + t_bc + 1e-9 {
            count += 1;
        }
    }
    Ok(count)
}

/// Exact latent-level triangle check used by the acceptance suite.
pub fn metric_head_axioms_hold(a: usize, b: usize, triples: usize, seed: u64) -> bool {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..triples {
        let mut rand_flat = || -> Vec<f64> { (0..a * b).map(|_| rng.gen_range(-10.0..10.0)).collect() };
        let x = rand_flat();
        let y = rand_flat();
        let z = rand_flat();
        let d = |p: &[f64], q: &[f64]| {
            metric_distance_flat(
                &ndarray::ArrayView1::from(p),
                &ndarray::ArrayView1::from(q),
                a,
                b,
            )
        };
        let dxy = d(&x, &y);
        let dyx = d(&y, &x);
        let dxz = d(&x, &z);
        let dyz = d(&y, &z);
        let dxx = d(&x, &x);
        if dxy < 0.0 || (dxy - dyx).abs() > 1e-12 || dxx != 0.0 || dxz > dxy + dyz + 1e-12 {
            return false;
        }
        // Identity of indiscernibles: distance zero forces equal latents here
        // because every |x - y| contributes through some row max.
        if dxy == 0.0 && x != y {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetricHeadConfig, ModelConfig};

    fn tiny_grid_env() -> GridEnv {
        let n = 16;
        let mut occ = vec![false; n * n];
        for y in 6..10 {
            occ[y * n + 8] = true;
        }
        let h = 1.0 / (n - 1) as f64;
        GridEnv::new(OccupancyGrid::new(&[n, n], h, &[0.0, 0.0], occ).unwrap(), None)
    }

    #[test]
    fn model_field_matches_pointwise_eval() {
        let env = tiny_grid_env();
        let model = Model::init(
            ModelConfig {
                dof: 2,
                fourier_features: 4,
                width: 8,
                depth: 1,
                head: MetricHeadConfig { a: 2, b: 2, kind: HeadKind::Metric },
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap();
        let qg = [0.5, 0.5];
        let field = model_time_field(&model, &env.grid, &qg).unwrap();
        let probe = env.grid.cell_center(3, 7, 0);
        let direct = model.evaluate(&probe, &qg).unwrap().t;
        let idx = env.grid.index(3, 7, 0);
        assert!((field.data[idx] - direct).abs() < 1e-12);
    }

    #[test]
    fn oracle_source_is_free_and_central() {
        let env = tiny_grid_env();
        let src = default_oracle_source(&env);
        assert!(env.grid.clearance_at(&src).unwrap() > 0.0);
    }

    #[test]
    fn metric_axioms_sampled() {
        assert!(metric_head_axioms_hold(4, 3, 5000, 99));
    }

    #[test]
    fn spurious_minima_flat_field_is_clean() {
        let env = tiny_grid_env();
        let sol = fmm_solve(&env, &[0.2, 0.2]).unwrap();
        // The FMM field itself has no spurious minima.
        assert_eq!(spurious_minima(&sol.travel_time, &env.grid, &sol.source.clone(), 1e-3), 0);
    }

    #[test]
    fn experiment_config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = dir.path().join("m.map");
        std::fs::write(&map, "....\n.##.\n....\n").unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(
            &cfg_path,
            r#"
[env]
map = "m.map"
d_min = 0.05
d_max = 0.25

[train]
epochs = 7
batch_size = 64
seed = 3
lambda_e = 0.5
dt = 0.01

[train.model]
width = 32
depth = 2
head_a = 4
head_b = 2
head_kind = "metric"
activation = "tanh"
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.weights.lambda_e, 0.5);
        assert_eq!(cfg.train.model.width, 32);
        assert_eq!(cfg.train.model.head.a, 4);
        let env = cfg.build_env().unwrap();
        assert_eq!(env.dof(), 2);
        assert_eq!(env.speed_params().d_max, 0.25);
        assert_eq!(cfg.config_hash.len(), 16);
    }
}
