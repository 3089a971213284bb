//! Training: the combined objective (Eikonal + temporal-difference + normal
//! alignment, causality weighted), batch construction, the epoch loop, and
//! the ablation suite.
//!
//! TD uses the semi-gradient convention: the optimal action and the stepped
//! evaluation point are constants during differentiation; only the travel-time
//! evaluations carry parameter gradients. The causality weight is likewise a
//! detached multiplier.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, LossInputs, LossTerms, Tape, GRAD_GUARD};
use crate::env::EnvironmentModel;
use crate::model::{HeadKind, Model, ModelConfig};
use crate::{Error, Result};

/// Loss weighting and TD step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_td: f64,
    pub lambda_n: f64,
    pub lambda_c: f64,
    pub dt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_e: 1e-2, lambda_td: 1e-3, lambda_n: 1e-3, lambda_c: 0.5, dt: 0.02 }
    }
}

impl LossWeights {
    /// Narrow-passage preset: smaller TD step, weaker alignment.
    pub fn narrow_passage() -> Self {
        Self { dt: 0.005, lambda_n: 2e-4, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda_e < 0.0 || self.lambda_td < 0.0 || self.lambda_n < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config("TD step dt must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample causality weight `exp(-lambda_c * T)`; detached.
pub fn causality_weight(lambda_c: f64, t: f64) -> f64 {
    (-lambda_c * t).exp()
}

/// Scalar per-sample loss terms, shared with the tape implementation and
/// usable against analytic fields.
pub mod terms {
    use crate::autodiff::GRAD_GUARD;

    /// One endpoint of the Eikonal loss: `(sqrt(S* max(||g||, guard)) - 1)^2`.
    pub fn eikonal_residual(s_star: f64, grad_norm: f64) -> f64 {
        ((s_star * grad_norm.max(GRAD_GUARD)).sqrt() - 1.0).powi(2)
    }

    /// One-step Bellman residual `T - dt/S* - T_stepped`.
    pub fn td_residual(t: f64, s_star: f64, t_stepped: f64, dt: f64) -> f64 {
        t - dt / s_star - t_stepped
    }

    /// One endpoint of the alignment loss;
    /// `nhat` must already be normalized.
    pub fn normal_alignment(s_star: f64, grad: &[f64], nhat: &[f64]) -> f64 {
        let sq: f64 = grad
            .iter()
            .zip(nhat.iter())
            .map(|(g, n)| {
                let v = s_star * g + n;
                v * v
            })
            .sum();
        (1.0 - s_star) * sq
    }
}

/// One sampled batch of endpoint pairs with precomputed speed data.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub qs: Array2<f64>,
    pub qg: Array2<f64>,
    pub s_star_s: Array1<f64>,
    pub s_star_g: Array1<f64>,
    /// Normalized speed gradients; zero rows where the gradient is flat.
    pub nhat_s: Array2<f64>,
    pub nhat_g: Array2<f64>,
    pub valid_s: Vec<bool>,
    pub valid_g: Vec<bool>,
}

impl TrainBatch {
    /// Draw endpoints independently from the free-space sampler and
    /// precompute speed values and alignment normals.
    pub fn sample(env: &EnvironmentModel, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dof = env.dof();
        let starts = env.sample_free_with(n, rng)?;
        let goals = env.sample_free_with(n, rng)?;
        let mut qs = Array2::zeros((n, dof));
        let mut qg = Array2::zeros((n, dof));
        let mut s_star_s = Array1::zeros(n);
        let mut s_star_g = Array1::zeros(n);
        let mut nhat_s = Array2::zeros((n, dof));
        let mut nhat_g = Array2::zeros((n, dof));
        let mut valid_s = vec![false; n];
        let mut valid_g = vec![false; n];
        for i in 0..n {
            for d in 0..dof {
                qs[[i, d]] = starts[i][d];
                qg[[i, d]] = goals[i][d];
            }
            let (ss, gs) = env.speed_star_with_grad(&starts[i])?;
            let (sg, gg) = env.speed_star_with_grad(&goals[i])?;
            s_star_s[i] = ss;
            s_star_g[i] = sg;
            let ns = gs.iter().map(|x| x * x).sum::<f64>().sqrt();
            if ns >= 1e-9 {
                valid_s[i] = true;
                for d in 0..dof {
                    nhat_s[[i, d]] = gs[d] / ns;
                }
            }
            let ng = gg.iter().map(|x| x * x).sum::<f64>().sqrt();
            if ng >= 1e-9 {
                valid_g[i] = true;
                for d in 0..dof {
                    nhat_g[[i, d]] = gg[d] / ng;
                }
            }
        }
        Ok(Self { qs, qg, s_star_s, s_star_g, nhat_s, nhat_g, valid_s, valid_g })
    }

    pub fn len(&self) -> usize {
        self.qs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.nrows() == 0
    }
}

/// Detached quantities of the semi-gradient objective: the TD stepped points
/// and the causality weights, both computed from the current parameters and
/// held constant during differentiation.
#[derive(Debug, Clone)]
pub struct DetachedContext {
    pub qs_step: Option<Array2<f64>>,
    pub qg_step: Option<Array2<f64>>,
    pub causality: Array1<f64>,
}

/// Evaluate the detached context at the current parameters. TD terms require
/// a well-defined optimal action at both endpoints, otherwise this fails with
/// "degenerate gradient".
pub fn detached_context(
    model: &Model,
    env: &EnvironmentModel,
    batch: &TrainBatch,
    w: &LossWeights,
) -> Result<DetachedContext> {
    w.validate()?;
    let mut tape = Tape::new(&model.params);
    let h0 = model.pair_on_tape(&mut tape, batch.qs.view(), batch.qg.view(), (true, true))?;
    let head = tape.head(h0);

    let (qs_step, qg_step) = if w.lambda_td > 0.0 {
        let n = batch.len();
        let dof = batch.qs.ncols();
        let mut qs_step = batch.qs.clone();
        let mut qg_step = batch.qg.clone();
        for i in 0..n {
            let gs = head.grad_s.row(i);
            let gg = head.grad_g.row(i);
            let ns = gs.dot(&gs).sqrt();
            let ng = gg.dot(&gg).sqrt();
            if ns <= GRAD_GUARD || ng <= GRAD_GUARD {
                return Err(Error::DegenerateGradient(ns.min(ng)));
            }
            for d in 0..dof {
                qs_step[[i, d]] -= w.dt * gs[d] / ns;
                qg_step[[i, d]] -= w.dt * gg[d] / ng;
            }
        }
        // Stepped points are detached constants, clamped to the domain box.
        for row in qs_step.rows_mut() {
            env.clamp_to_bounds(row.into_slice().unwrap());
        }
        for row in qg_step.rows_mut() {
            env.clamp_to_bounds(row.into_slice().unwrap());
        }
        (Some(qs_step), Some(qg_step))
    } else {
        (None, None)
    };

    let causality = if w.lambda_c > 0.0 {
        head.t.mapv(|t| causality_weight(w.lambda_c, t))
    } else {
        Array1::ones(batch.len())
    };

    Ok(DetachedContext { qs_step, qg_step, causality })
}

/// Record the full objective on `tape` given a detached context.
pub fn build_loss_with_context(
    model: &Model,
    tape: &mut Tape<'_>,
    batch: &TrainBatch,
    w: &LossWeights,
    ctx: &DetachedContext,
) -> Result<(crate::autodiff::Var, LossTerms)> {
    let xs = model.trunk_on_tape(tape, batch.qs.view(), true)?;
    let xg = model.trunk_on_tape(tape, batch.qg.view(), true)?;
    let h0 = model.head_on_tape(tape, xs, xg, batch.qs.view(), batch.qg.view())?;

    let (h1, h2) = if w.lambda_td > 0.0 {
        let qs_step = ctx
            .qs_step
            .as_ref()
            .ok_or_else(|| Error::Config("TD loss requires stepped points in the context".into()))?;
        let qg_step = ctx
            .qg_step
            .as_ref()
            .ok_or_else(|| Error::Config("TD loss requires stepped points in the context".into()))?;
        let xs_step = model.trunk_on_tape(tape, qs_step.view(), false)?;
        let xg_step = model.trunk_on_tape(tape, qg_step.view(), false)?;
        let h1 = model.head_on_tape(tape, xs_step, xg, qs_step.view(), batch.qg.view())?;
        let h2 = model.head_on_tape(tape, xs, xg_step, batch.qs.view(), qg_step.view())?;
        (Some(h1), Some(h2))
    } else {
        (None, None)
    };

    tape.combined_loss(LossInputs {
        h0,
        h1,
        h2,
        s_star_s: batch.s_star_s.clone(),
        s_star_g: batch.s_star_g.clone(),
        nhat_s: batch.nhat_s.clone(),
        nhat_g: batch.nhat_g.clone(),
        valid_s: batch.valid_s.clone(),
        valid_g: batch.valid_g.clone(),
        causality: ctx.causality.clone(),
        lambda_e: w.lambda_e,
        lambda_td: w.lambda_td,
        lambda_n: w.lambda_n,
        dt: w.dt,
    })
}

/// Record the full objective for one batch on `tape`, evaluating the
/// detached context inline so the tangent passes run once.
///
/// Produces the same loss node as [`detached_context`] followed by
/// [`build_loss_with_context`].
pub fn build_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    env: &EnvironmentModel,
    batch: &TrainBatch,
    w: &LossWeights,
) -> Result<(crate::autodiff::Var, LossTerms)> {
    w.validate()?;
    let xs = model.trunk_on_tape(tape, batch.qs.view(), true)?;
    let xg = model.trunk_on_tape(tape, batch.qg.view(), true)?;
    let h0 = model.head_on_tape(tape, xs, xg, batch.qs.view(), batch.qg.view())?;

    let (h1, h2) = if w.lambda_td > 0.0 {
        let head = tape.head(h0);
        let n = batch.len();
        let dof = batch.qs.ncols();
        let mut qs_step = batch.qs.clone();
        let mut qg_step = batch.qg.clone();
        for i in 0..n {
            let gs = head.grad_s.row(i);
            let gg = head.grad_g.row(i);
            let ns = gs.dot(&gs).sqrt();
            let ng = gg.dot(&gg).sqrt();
            if ns <= GRAD_GUARD || ng <= GRAD_GUARD {
                return Err(Error::DegenerateGradient(ns.min(ng)));
            }
            for d in 0..dof {
                qs_step[[i, d]] -= w.dt * gs[d] / ns;
                qg_step[[i, d]] -= w.dt * gg[d] / ng;
            }
        }
        for row in qs_step.rows_mut() {
            env.clamp_to_bounds(row.into_slice().unwrap());
        }
        for row in qg_step.rows_mut() {
            env.clamp_to_bounds(row.into_slice().unwrap());
        }
        let xs_step = model.trunk_on_tape(tape, qs_step.view(), false)?;
        let xg_step = model.trunk_on_tape(tape, qg_step.view(), false)?;
        let h1 = model.head_on_tape(tape, xs_step, xg, qs_step.view(), batch.qg.view())?;
        let h2 = model.head_on_tape(tape, xs, xg_step, batch.qs.view(), qg_step.view())?;
        (Some(h1), Some(h2))
    } else {
        (None, None)
    };

    let causality = if w.lambda_c > 0.0 {
        tape.head(h0).t.mapv(|t| causality_weight(w.lambda_c, t))
    } else {
        Array1::ones(batch.len())
    };

    tape.combined_loss(LossInputs {
        h0,
        h1,
        h2,
        s_star_s: batch.s_star_s.clone(),
        s_star_g: batch.s_star_g.clone(),
        nhat_s: batch.nhat_s.clone(),
        nhat_g: batch.nhat_g.clone(),
        valid_s: batch.valid_s.clone(),
        valid_g: batch.valid_g.clone(),
        causality,
        lambda_e: w.lambda_e,
        lambda_td: w.lambda_td,
        lambda_n: w.lambda_n,
        dt: w.dt,
    })
}

/// Loss terms without a parameter sweep (evaluation only).
pub fn evaluate_loss(model: &Model, env: &EnvironmentModel, batch: &TrainBatch, w: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::new(&model.params);
    let (_, terms) = build_loss(model, &mut tape, env, batch, w)?;
    Ok(terms)
}

/// Mean Eikonal loss of a batch (both endpoints summed, batch averaged).
pub fn loss_eikonal(batch: &TrainBatch, model: &Model, env: &EnvironmentModel) -> Result<f64> {
    let w = LossWeights { lambda_e: 1.0, lambda_td: 0.0, lambda_n: 0.0, lambda_c: 0.0, dt: 0.02 };
    Ok(evaluate_loss(model, env, batch, &w)?.eikonal)
}

/// Mean TD loss of a batch.
pub fn loss_td(batch: &TrainBatch, model: &Model, env: &EnvironmentModel, dt: f64) -> Result<f64> {
    let w = LossWeights { lambda_e: 0.0, lambda_td: 1.0, lambda_n: 0.0, lambda_c: 0.0, dt };
    Ok(evaluate_loss(model, env, batch, &w)?.td)
}

/// Mean normal-alignment loss of a batch.
pub fn loss_normal(batch: &TrainBatch, model: &Model, env: &EnvironmentModel) -> Result<f64> {
    let w = LossWeights { lambda_e: 0.0, lambda_td: 0.0, lambda_n: 1.0, lambda_c: 0.0, dt: 0.02 };
    Ok(evaluate_loss(model, env, batch, &w)?.normal)
}

/// Per-epoch record of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub eikonal: f64,
    pub td: f64,
    pub normal: f64,
    pub weighted_total: f64,
    pub normal_skipped: usize,
    pub wall_time: f64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            epochs: 500,
            batch_size: 2048,
            seed: 0,
            lr: 1e-3,
        }
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub reports: Vec<LossReport>,
}

/// Epoch loop: resample a batch, record the loss, reverse sweep, optimizer
/// step. Deterministic for a fixed seed. On a loss or gradient blowup the
/// last good parameters are written to `checkpoint` (when given) and the
/// error is returned.
pub fn train(
    env: &EnvironmentModel,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&LossReport),
) -> Result<TrainOutput> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.dof = env.dof();
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.params.clone();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batch = TrainBatch::sample(env, cfg.batch_size, &mut rng)?;
        let step = (|| -> Result<LossTerms> {
            let mut tape = Tape::new(&model.params);
            let (loss, terms) = build_loss(&model, &mut tape, env, &batch, &cfg.weights)?;
            tape.seal();
            let grads = tape.reverse(loss)?;
            drop(tape);
            adam_step(&mut model.params, &grads, &mut adam, cfg.lr, (0.9, 0.999), 1e-8)?;
            Ok(terms)
        })();
        let terms = match step {
            Ok(t) => t,
            Err(e) => {
                model.params = last_good;
                if let Some(path) = checkpoint {
                    model.save(path, serde_json::json!({"epoch": epoch, "aborted": true}))?;
                }
                return Err(e);
            }
        };
        last_good = model.params.clone();
        let report = LossReport {
            epoch,
            eikonal: terms.eikonal,
            td: terms.td,
            normal: terms.normal,
            weighted_total: terms.weighted_total,
            normal_skipped: terms.normal_skipped,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }

    if let Some(path) = checkpoint {
        model.save(path, serde_json::json!({"epoch": cfg.epochs, "aborted": false}))?;
    }
    Ok(TrainOutput { model, reports })
}

/// Loss CSV: header plus one row per epoch.
pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out = String::from("epoch,loss_e,loss_td,loss_n,weighted_total,wall_time\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.epoch, r.eikonal, r.td, r.normal, r.weighted_total, r.wall_time
        );
    }
    out
}

/// Ablation variants of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoEikonal,
    NoTd,
    NoNormal,
    NoCausality,
    FactorizedHead,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::Full,
        Self::NoEikonal,
        Self::NoTd,
        Self::NoNormal,
        Self::NoCausality,
        Self::FactorizedHead,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoEikonal => "-L_E",
            Self::NoTd => "-L_TD",
            Self::NoNormal => "-L_N",
            Self::NoCausality => "-L_C",
            Self::FactorizedHead => "factorized-head",
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Self::Full => {}
            Self::NoEikonal => cfg.weights.lambda_e = 0.0,
            Self::NoTd => cfg.weights.lambda_td = 0.0,
            Self::NoNormal => cfg.weights.lambda_n = 0.0,
            Self::NoCausality => cfg.weights.lambda_c = 0.0,
            Self::FactorizedHead => cfg.model.head.kind = HeadKind::FactorizedBaseline,
        }
        cfg
    }
}

/// Result of one ablation variant over shared seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// MAE per seed; None for failed runs.
    pub maes: Vec<Option<f64>>,
    pub median_mae: Option<f64>,
    pub status: String,
    /// Trained models per seed (for post-hoc checks and field dumps).
    pub models: Vec<Option<Model>>,
}

/// Train every variant with shared seeds and report the median MAE against
/// the FMM oracle. Per-variant failures are recorded without aborting.
pub fn ablation_suite(
    env: &EnvironmentModel,
    base: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(AblationVariant, u64, Option<f64>),
) -> Result<Vec<AblationRow>> {
    let EnvironmentModel::Grid(grid_env) = env else {
        return Err(Error::Config("ablation needs a grid environment with an FMM oracle".into()));
    };
    let source = crate::eval::default_oracle_source(grid_env);
    let oracle = crate::fmm::fmm_solve(grid_env, &source)?;

    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let cfg = variant.apply(base);
        let mut maes = Vec::new();
        let mut models = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            match train(env, &run_cfg, None, |_| {}) {
                Ok(out) => {
                    let mae = crate::eval::model_mae(&out.model, grid_env, &oracle)?;
                    progress(variant, seed, Some(mae));
                    maes.push(Some(mae));
                    models.push(Some(out.model));
                }
                Err(e) => {
                    progress(variant, seed, None);
                    failures.push(format!("seed {seed}: {e}"));
                    maes.push(None);
                    models.push(None);
                }
            }
        }
        let mut ok: Vec<f64> = maes.iter().flatten().copied().collect();
        ok.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_mae = if ok.is_empty() { None } else { Some(ok[ok.len() / 2]) };
        let status = if failures.is_empty() { "ok".to_string() } else { failures.join("; ") };
        rows.push(AblationRow { variant, maes, median_mae, status, models });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::env::{GridEnv, SpeedParams};
    use crate::grid::OccupancyGrid;
    use crate::model::{HeadKind, MetricHeadConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_env() -> EnvironmentModel {
        let (nx, ny) = (24, 24);
        let mut occ = vec![false; nx * ny];
        for y in 10..14 {
            for x in 10..14 {
                occ[y * nx + x] = true;
            }
        }
        let h = 1.0 / (nx - 1) as f64;
        let grid = OccupancyGrid::new(&[nx, ny], h, &[0.0, 0.0], occ).unwrap();
        EnvironmentModel::Grid(GridEnv::new(grid, Some(SpeedParams::new(0.02, 0.2).unwrap())))
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                dof: 2,
                fourier_features: 8,
                sigma: 1.0,
                width: 16,
                depth: 2,
                activation: Activation::Softplus,
                head: MetricHeadConfig { a: 4, b: 4, kind: HeadKind::Metric },
            },
            weights: LossWeights::default(),
            epochs: 3,
            batch_size: 32,
            seed: 11,
            lr: 1e-3,
        }
    }

    #[test]
    fn causality_weight_examples() {
        assert_eq!(causality_weight(0.5, 0.0), 1.0);
        assert_relative_eq!(causality_weight(0.5, 2.0), (-1.0f64).exp(), max_relative = 1e-12);
        assert_eq!(causality_weight(0.0, 123.4), 1.0);
    }

    #[test]
    fn causality_weights_are_monotone_in_t() {
        let ts = [0.0, 0.3, 0.5, 1.2, 2.0, 7.5];
        let ws: Vec<f64> = ts.iter().map(|&t| causality_weight(0.7, t)).collect();
        assert!(ws.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eikonal_term_arithmetic() {
        // S* = 1, S_pred = 4 means ||grad|| = 1/4: (sqrt(1/4) - 1)^2 = 0.25.
        assert_relative_eq!(terms::eikonal_residual(1.0, 0.25), 0.25, max_relative = 1e-12);
        // Perfect prediction.
        assert_relative_eq!(terms::eikonal_residual(0.5, 2.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn normal_alignment_arithmetic() {
        // Perfect alignment: S* grad = -nhat.
        let t = terms::normal_alignment(0.5, &[-2.0, 0.0], &[1.0, 0.0]);
        assert_relative_eq!(t, 0.0, epsilon = 1e-15);
        // Perpendicular with ||S* grad|| = 1: 0.5 * ||perp + n||^2 = 1.0.
        let t = terms::normal_alignment(0.5, &[0.0, 2.0], &[1.0, 0.0]);
        assert_relative_eq!(t, 1.0, max_relative = 1e-12);
        // S* = 1 kills the weight.
        let t = terms::normal_alignment(1.0, &[3.0, -1.0], &[0.6, 0.8]);
        assert_eq!(t, 0.0);
    }

    /// Analytic radial field: T = ||qs - qg||.
    fn radial_eval(qs: &[f64], qg: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = qs.iter().zip(qg).map(|(a, b)| a - b).collect();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g = d.iter().map(|x| x / n).collect();
        (n, g)
    }

    #[test]
    fn radial_field_has_zero_eikonal_loss_and_exact_td() {
        // Empty environment: S* = 1 everywhere.
        for dt in [0.04, 0.02, 0.005] {
            let pairs = [([0.1, 0.2], [0.8, 0.9]), ([0.5, 0.1], [0.2, 0.7]), ([0.9, 0.9], [0.1, 0.2])];
            for (qs, qg) in pairs {
                let (t, g) = radial_eval(&qs, &qg);
                let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(terms::eikonal_residual(1.0, gn) < 1e-28);
                // Step qs along -grad: the radial field drops by exactly dt.
                let stepped: Vec<f64> = qs.iter().zip(&g).map(|(q, gi)| q - dt * gi).collect();
                let (t_stepped, _) = radial_eval(&stepped, &qg);
                let r = terms::td_residual(t, 1.0, t_stepped, dt);
                assert!(r.abs() <= 1e-12, "dt={dt}: residual {r}");
            }
        }
    }

    #[test]
    fn td_loss_scales_quadratically_in_dt() {
        let env = small_env();
        let m = Model::init(tiny_cfg().model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = TrainBatch::sample(&env, 64, &mut rng).unwrap();
        let l4 = loss_td(&batch, &m, &env, 0.04).unwrap();
        let l2 = loss_td(&batch, &m, &env, 0.02).unwrap();
        let l1 = loss_td(&batch, &m, &env, 0.01).unwrap();
        let r42 = l4 / l2;
        let r21 = l2 / l1;
        assert!((3.5..=4.5).contains(&r42), "ratio 0.04/0.02 = {r42}");
        assert!((3.5..=4.5).contains(&r21), "ratio 0.02/0.01 = {r21}");
    }

    #[test]
    fn zero_gradient_model_trips_the_guard() {
        let env = small_env();
        let mut m = Model::init(tiny_cfg().model, 3).unwrap();
        for v in m.params.data_mut() {
            *v = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = TrainBatch::sample(&env, 8, &mut rng).unwrap();
        let err = loss_td(&batch, &m, &env, 0.02).unwrap_err();
        assert!(err.to_string().contains("degenerate gradient"));
    }

    #[test]
    fn lambda_zero_reduces_to_plain_eikonal_bitwise() {
        let env = small_env();
        let m = Model::init(tiny_cfg().model, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = TrainBatch::sample(&env, 32, &mut rng).unwrap();
        let w = LossWeights { lambda_e: 1.0, lambda_td: 0.0, lambda_n: 0.0, lambda_c: 0.0, dt: 0.02 };
        let combined = evaluate_loss(&m, &env, &batch, &w).unwrap();
        let plain = loss_eikonal(&batch, &m, &env).unwrap();
        assert_eq!(combined.weighted_total.to_bits(), plain.to_bits());
    }

    #[test]
    fn training_is_deterministic() {
        let env = small_env();
        let cfg = tiny_cfg();
        let out1 = train(&env, &cfg, None, |_| {}).unwrap();
        let out2 = train(&env, &cfg, None, |_| {}).unwrap();
        assert_eq!(out1.model.params.data(), out2.model.params.data());
        for (a, b) in out1.reports.iter().zip(out2.reports.iter()) {
            assert_eq!(a.weighted_total.to_bits(), b.weighted_total.to_bits());
            assert_eq!(a.eikonal.to_bits(), b.eikonal.to_bits());
        }
    }

    #[test]
    fn epochs_zero_returns_initialization() {
        let env = small_env();
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let out = train(&env, &cfg, None, |_| {}).unwrap();
        let mut fresh_cfg = cfg.model.clone();
        fresh_cfg.dof = 2;
        let fresh = Model::init(fresh_cfg, cfg.seed).unwrap();
        assert_eq!(out.model.params.data(), fresh.params.data());
        assert!(out.reports.is_empty());
        assert_eq!(loss_csv(&out.reports), "epoch,loss_e,loss_td,loss_n,weighted_total,wall_time\n");
    }
}
