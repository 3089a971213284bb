//! The travel-time model: a residual MLP encoder over a fixed random
//! positional encoding, composed with a metric head.
//!
//! The default head embeds configurations into an `a x b` latent and returns
//! `D(x, y) = sum_i max_j |x_ij - y_ij|` -- a norm-induced metric, so the
//! induced travel time is symmetric, non-negative, zero exactly at identical
//! inputs, and satisfies the triangle inequality by construction. The
//! factorized baseline (`||q_s - q_g|| / tau`) and a plain Euclidean latent
//! head are included for ablations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{
    Activation, DualBatch, ParamId, ParamStore, ParamStoreBuilder, Tape, Var, GRAD_GUARD,
};
use crate::{Error, Result};

/// Travel-time head family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Sum over rows of max over columns of absolute latent differences.
    Metric,
    /// `||q_s - q_g|| / tau(q_s, q_g)` with `tau = exp(g(q_s) + g(q_g))`.
    FactorizedBaseline,
    /// Euclidean distance between flat latents.
    EuclideanBaseline,
}

/// Latent layout of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricHeadConfig {
    /// Sum dimension.
    pub a: usize,
    /// Max dimension.
    pub b: usize,
    pub kind: HeadKind,
}

impl Default for MetricHeadConfig {
    fn default() -> Self {
        Self { a: 16, b: 8, kind: HeadKind::Metric }
    }
}

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dof: usize,
    /// Number of random Fourier features; the encoding width is twice this.
    pub fourier_features: usize,
    /// Standard deviation of the frozen encoding matrix.
    pub sigma: f64,
    pub width: usize,
    /// Number of residual blocks.
    pub depth: usize,
    pub activation: Activation,
    pub head: MetricHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dof: 2,
            fourier_features: 64,
            sigma: 1.0,
            width: 128,
            depth: 4,
            activation: Activation::Softplus,
            head: MetricHeadConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Output width of the trunk for this head.
    pub fn latent_width(&self) -> usize {
        match self.head.kind {
            HeadKind::Metric | HeadKind::EuclideanBaseline => self.head.a * self.head.b,
            HeadKind::FactorizedBaseline => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dof == 0 || self.width == 0 || self.fourier_features == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.head.a == 0 || self.head.b == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("encoding sigma must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluation of the field at a configuration pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEvaluation {
    pub t: f64,
    pub grad_qs: Vec<f64>,
    pub grad_qg: Vec<f64>,
    /// Predicted speeds `1 / max(||grad||, guard)`.
    pub s_pred_qs: f64,
    pub s_pred_qg: f64,
}

/// Negative normalized gradient at one endpoint of an evaluation.
pub fn optimal_action(eval: &FieldEvaluation, at: crate::autodiff::Endpoint) -> Result<Vec<f64>> {
    let g = match at {
        crate::autodiff::Endpoint::Start => &eval.grad_qs,
        crate::autodiff::Endpoint::Goal => &eval.grad_qg,
    };
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= GRAD_GUARD {
        return Err(Error::DegenerateGradient(norm));
    }
    Ok(g.iter().map(|x| -x / norm).collect())
}

/// Sum over rows of the max over columns of absolute differences between two
/// `a x b` latents (the metric used by the default head).
pub fn metric_distance(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> f64 {
    debug_assert_eq!(x.dim(), y.dim());
    let mut acc = 0.0;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        let mut best = 0.0f64;
        for (a, b) in xr.iter().zip(yr.iter()) {
            best = best.max((a - b).abs());
        }
        acc += best;
    }
    acc
}

/// Anything that can serve the planner as a cost-to-go field.
pub trait TravelTimeField {
    fn dof(&self) -> usize;

    fn evaluate(&self, qs: &[f64], qg: &[f64]) -> Result<FieldEvaluation>;

    /// Travel time from each start row to the fixed goal; value-only fast path.
    fn values_to_goal(&self, starts: &ArrayView2<f64>, qg: &[f64]) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(starts.nrows());
        for (i, row) in starts.rows().into_iter().enumerate() {
            out[i] = self.evaluate(row.as_slice().unwrap(), qg)?.t;
        }
        Ok(out)
    }
}

/// Parameter ids of the trunk, resolved once at construction.
#[derive(Debug, Clone)]
struct TrunkIds {
    encoding: ParamId,
    input: (ParamId, ParamId),
    blocks: Vec<(ParamId, ParamId)>,
    output: (ParamId, ParamId),
}

/// Travel-time model: parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: TrunkIds,
}

impl Model {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamStoreBuilder::new(seed);
        let feats = config.fourier_features;
        let enc_width = 2 * feats;
        let encoding = b.frozen_normal("encoding.b", config.dof, feats, config.sigma);
        let w_in = b.normal("trunk.in.w", enc_width, config.width, (1.0 / enc_width as f64).sqrt());
        let b_in = b.zeros("trunk.in.b", 1, config.width);
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            let w = b.normal(&format!("trunk.res{i}.w"), config.width, config.width, (1.0 / config.width as f64).sqrt());
            let bias = b.zeros(&format!("trunk.res{i}.b"), 1, config.width);
            blocks.push((w, bias));
        }
        let out_width = config.latent_width();
        let w_out = b.normal("trunk.out.w", config.width, out_width, (1.0 / config.width as f64).sqrt());
        let b_out = b.zeros("trunk.out.b", 1, out_width);
        let params = b.build();
        let ids = TrunkIds { encoding, input: (w_in, b_in), blocks, output: (w_out, b_out) };
        Ok(Self { config, params, ids })
    }

    /// Rebind parameter ids after loading a checkpoint.
    fn resolve_ids(config: &ModelConfig, params: &ParamStore) -> Result<TrunkIds> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint/model-config mismatch: missing '{name}'")))
        };
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            blocks.push((get(&format!("trunk.res{i}.w"))?, get(&format!("trunk.res{i}.b"))?));
        }
        Ok(TrunkIds {
            encoding: get("encoding.b")?,
            input: (get("trunk.in.w")?, get("trunk.in.b")?),
            blocks,
            output: (get("trunk.out.w")?, get("trunk.out.b")?),
        })
    }

    /// Record the encoder on a tape: positional encoding, input projection,
    /// residual blocks `h + act(h W + b)`, linear output.
    pub fn trunk_on_tape(&self, tape: &mut Tape<'_>, q: ArrayView2<f64>, with_tangents: bool) -> Result<Var> {
        if q.ncols() != self.config.dof {
            return Err(Error::ShapeMismatch(format!(
                "trunk expects {} input columns, got {}",
                self.config.dof,
                q.ncols()
            )));
        }
        let enc = tape.encode(q, self.ids.encoding, with_tangents)?;
        let mut h = tape.dense(enc, self.ids.input.0, self.ids.input.1)?;
        h = tape.activation(h, self.config.activation);
        for &(w, b) in &self.ids.blocks {
            let lin = tape.dense(h, w, b)?;
            let act = tape.activation(lin, self.config.activation);
            h = tape.add(h, act)?;
        }
        tape.dense(h, self.ids.output.0, self.ids.output.1)
    }

    /// Record the head over two trunk outputs.
    pub fn head_on_tape(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        y: Var,
        qs: ArrayView2<f64>,
        qg: ArrayView2<f64>,
    ) -> Result<Var> {
        match self.config.head.kind {
            HeadKind::Metric => tape.metric_head(x, y, self.config.head.a, self.config.head.b),
            HeadKind::FactorizedBaseline => tape.factorized_head(x, y, qs, qg),
            HeadKind::EuclideanBaseline => tape.euclidean_head(x, y),
        }
    }

    /// Record trunk passes for both endpoints plus the head.
    pub fn pair_on_tape(
        &self,
        tape: &mut Tape<'_>,
        qs: ArrayView2<f64>,
        qg: ArrayView2<f64>,
        tangents: (bool, bool),
    ) -> Result<Var> {
        let xs = self.trunk_on_tape(tape, qs, tangents.0)?;
        let xg = self.trunk_on_tape(tape, qg, tangents.1)?;
        self.head_on_tape(tape, xs, xg, qs, qg)
    }

    /// Evaluate the field with exact endpoint gradients.
    pub fn evaluate(&self, qs: &[f64], qg: &[f64]) -> Result<FieldEvaluation> {
        let qs_arr = Array2::from_shape_vec((1, qs.len()), qs.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let qg_arr = Array2::from_shape_vec((1, qg.len()), qg.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut tape = Tape::new(&self.params);
        let head = self.pair_on_tape(&mut tape, qs_arr.view(), qg_arr.view(), (true, true))?;
        let h = tape.head(head);
        let t = h.t[0];
        if !t.is_finite() {
            return Err(Error::ModelDiverged);
        }
        let grad_qs: Vec<f64> = h.grad_s.row(0).to_vec();
        let grad_qg: Vec<f64> = h.grad_g.row(0).to_vec();
        let ns = grad_qs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = grad_qg.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(FieldEvaluation {
            t,
            grad_qs,
            grad_qg,
            s_pred_qs: 1.0 / ns.max(GRAD_GUARD),
            s_pred_qg: 1.0 / ng.max(GRAD_GUARD),
        })
    }

    /// Precompute the goal latent for repeated goal-conditioned queries.
    pub fn goal_eval(&self, qg: &[f64]) -> Result<GoalEval<'_>> {
        let qg_arr = Array2::from_shape_vec((1, qg.len()), qg.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut tape = Tape::new(&self.params);
        let v = self.trunk_on_tape(&mut tape, qg_arr.view(), false)?;
        let latent = tape.dual(v).values.row(0).to_owned();
        Ok(GoalEval { model: self, qg: qg.to_vec(), goal_latent: latent })
    }

    /// Same architecture over replaced parameter values; the layout must
    /// match exactly. Used by optimizers and the finite-difference tests.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        if params.specs() != self.params.specs() {
            return Err(Error::Config("parameter layout differs from the model architecture".into()));
        }
        Ok(Self { config: self.config.clone(), params, ids: self.ids.clone() })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "model_config": serde_json::to_value(&self.config).map_err(|e| Error::Config(e.to_string()))?,
            "user": extra,
        });
        self.params.save(path, &meta)
    }

    /// Load a checkpoint; the stored model config must reproduce the layout.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, extra) = ParamStore::load(path)?;
        let config: ModelConfig = serde_json::from_value(extra["model_config"].clone())
            .map_err(|e| Error::Config(format!("checkpoint/model-config mismatch: {e}")))?;
        let expected = Model::init(config.clone(), params.seed)?;
        if expected.params.specs() != params.specs() {
            return Err(Error::Config(
                "checkpoint/model-config mismatch: layout table differs".into(),
            ));
        }
        let ids = Self::resolve_ids(&config, &params)?;
        Ok((Self { config, params, ids }, extra["user"].clone()))
    }

    /// Conservative Lipschitz bound of the trunk from weight norms.
    pub fn lipschitz_bound(&self) -> f64 {
        let fro = |id: ParamId| -> f64 {
            self.params
                .matrix(id)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let two_pi = 2.0 * std::f64::consts::PI;
        // All supported activations have |act'| <= 1.
        let mut c = two_pi * fro(self.ids.encoding);
        c *= fro(self.ids.input.0);
        for &(w, _) in &self.ids.blocks {
            c *= 1.0 + fro(w);
        }
        c * fro(self.ids.output.0)
    }
}

impl TravelTimeField for Model {
    fn dof(&self) -> usize {
        self.config.dof
    }

    fn evaluate(&self, qs: &[f64], qg: &[f64]) -> Result<FieldEvaluation> {
        Model::evaluate(self, qs, qg)
    }

    fn values_to_goal(&self, starts: &ArrayView2<f64>, qg: &[f64]) -> Result<Array1<f64>> {
        self.goal_eval(qg)?.values(starts)
    }
}

/// Goal-conditioned value-only evaluator with a cached goal latent.
pub struct GoalEval<'m> {
    model: &'m Model,
    qg: Vec<f64>,
    goal_latent: Array1<f64>,
}

impl GoalEval<'_> {
    pub fn goal(&self) -> &[f64] {
        &self.qg
    }

    /// Travel time from each start row to the cached goal.
    pub fn values(&self, starts: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let batch = starts.nrows();
        let mut tape = Tape::new(&self.model.params);
        let xs = self.model.trunk_on_tape(&mut tape, *starts, false)?;
        let rep = Array2::from_shape_fn((batch, self.goal_latent.len()), |(_, j)| self.goal_latent[j]);
        let yg = tape.input(DualBatch::from_values(rep));
        let qg_rep = Array2::from_shape_fn((batch, self.qg.len()), |(_, j)| self.qg[j]);
        let head = self.model.head_on_tape(&mut tape, xs, yg, *starts, qg_rep.view())?;
        let t = tape.head(head).t.clone();
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelDiverged);
        }
        Ok(t)
    }
}

/// Convenience: metric distance on owned latents, reshaped from flat rows.
pub fn metric_distance_flat(x: &ArrayView1<f64>, y: &ArrayView1<f64>, a: usize, b: usize) -> f64 {
    let xm = x.to_shape((a, b)).unwrap();
    let ym = y.to_shape((a, b)).unwrap();
    metric_distance(&xm.view(), &ym.view())
}
