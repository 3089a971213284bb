//! Recorded computation over [`DualBatch`] intermediates with one reverse
//! sweep producing parameter gradients.
//!
//! Nodes cover the fixed model topology: positional encoding, dense layers,
//! activations, residual adds, the travel-time heads, and the loss assembly.
//! Head nodes expose per-sample travel time plus the exact input gradients at
//! both endpoints (from the forward tangents); the reverse sweep propagates
//! adjoints of values *and* tangents, so losses built from input gradients
//! differentiate correctly with respect to the parameters.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::dual::DualBatch;
use super::ops::{activation_forward, add_forward, dense_forward, encode_forward, Activation};
use super::params::{ParamId, ParamStore};
use super::GRAD_GUARD;
use crate::{Error, Result};

/// Handle to one recorded intermediate.
pub type Var = usize;

/// Which endpoint of a travel-time head a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Start,
    Goal,
}

/// Output of a travel-time head: per-sample value and the exact input
/// gradients at the start and goal (columns follow the input coordinates;
/// empty when the corresponding pass carried no tangents).
#[derive(Debug, Clone)]
pub struct HeadOut {
    pub t: Array1<f64>,
    pub grad_s: Array2<f64>,
    pub grad_g: Array2<f64>,
}

#[derive(Debug)]
enum Slot {
    Dual(DualBatch),
    Head(HeadOut),
    Scalar(f64),
}

#[derive(Debug)]
enum AdjSlot {
    Dual { values: Array2<f64>, tangents: Vec<Array2<f64>> },
    Head { t: Array1<f64>, grad_s: Array2<f64>, grad_g: Array2<f64> },
    Scalar(f64),
}

/// Inputs of the combined training loss for one batch.
///
/// `h0` is the head at the sampled pair; `h1`/`h2` are the value-only heads at
/// the stepped start/goal used by the TD residuals. Speed values, alignment
/// normals and causality weights are constants with respect to the parameters.
pub struct LossInputs {
    pub h0: Var,
    /// T(q_s + u_s dt, q_g); required when `lambda_td > 0`.
    pub h1: Option<Var>,
    /// T(q_s, q_g + u_g dt); required when `lambda_td > 0`.
    pub h2: Option<Var>,
    pub s_star_s: Array1<f64>,
    pub s_star_g: Array1<f64>,
    /// Normalized speed gradient (obstacle normal) rows; zero rows where invalid.
    pub nhat_s: Array2<f64>,
    pub nhat_g: Array2<f64>,
    pub valid_s: Vec<bool>,
    pub valid_g: Vec<bool>,
    /// Detached causality weights, one per sample.
    pub causality: Array1<f64>,
    pub lambda_e: f64,
    pub lambda_td: f64,
    pub lambda_n: f64,
    pub dt: f64,
}

/// Per-term batch means of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub eikonal: f64,
    pub td: f64,
    pub normal: f64,
    /// Mean of the causality-weighted per-sample combined loss.
    pub weighted_total: f64,
    /// Alignment terms skipped because the speed gradient was flat.
    pub normal_skipped: usize,
}

struct LossCtx {
    inputs: LossInputs,
    // Cached forward quantities for the backward pass.
    n_s: Array1<f64>,
    n_g: Array1<f64>,
    r_s: Array1<f64>,
    r_g: Array1<f64>,
}

enum Node {
    Input,
    Encode,
    Dense { x: Var, w: ParamId, b: ParamId, out: Var },
    Activation { x: Var, kind: Activation, out: Var },
    Add { x: Var, y: Var, out: Var },
    MetricHead { x: Var, y: Var, rows: usize, cols: usize, pick: Vec<u32>, sign: Vec<f64>, out: Var },
    FactorizedHead { x: Var, y: Var, norm: Array1<f64>, out: Var },
    EuclideanHead { x: Var, y: Var, out: Var },
    CombinedLoss { ctx: Box<LossCtx>, out: Var },
    GradNormLoss { head: Var, endpoint: Endpoint, out: Var },
    ParamSquaredNorm { coeff: f64, out: Var },
    Constant,
}

/// One recorded training-step graph over a parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    slots: Vec<Slot>,
    sealed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), slots: Vec::new(), sealed: false }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, slot: Slot) -> Var {
        self.slots.push(slot);
        self.slots.len() - 1
    }

    pub fn dual(&self, v: Var) -> &DualBatch {
        match &self.slots[v] {
            Slot::Dual(d) => d,
            _ => panic!("var {v} is not a dual batch"),
        }
    }

    pub fn head(&self, v: Var) -> &HeadOut {
        match &self.slots[v] {
            Slot::Head(h) => h,
            _ => panic!("var {v} is not a head output"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        match &self.slots[v] {
            Slot::Scalar(s) => *s,
            _ => panic!("var {v} is not a scalar"),
        }
    }

    /// Constant leaf batch (no parameter dependence).
    pub fn input(&mut self, data: DualBatch) -> Var {
        let out = self.push(Slot::Dual(data));
        self.nodes.push(Node::Input);
        out
    }

    /// Positional encoding of raw coordinates. The matrix must be frozen.
    pub fn encode(&mut self, q: ArrayView2<f64>, bmat: ParamId, with_tangents: bool) -> Result<Var> {
        if !self.params.spec(bmat).frozen {
            return Err(Error::Config("positional encoding matrix must be a frozen buffer".into()));
        }
        let enc = encode_forward(&q, &self.params.matrix(bmat), with_tangents)?;
        let out = self.push(Slot::Dual(enc));
        self.nodes.push(Node::Encode);
        Ok(out)
    }

    pub fn dense(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        if self.params.spec(w).frozen || self.params.spec(b).frozen {
            return Err(Error::Config("dense weights must be trainable".into()));
        }
        let y = dense_forward(self.dual(x), &self.params.matrix(w), &self.params.vector(b))?;
        let out = self.push(Slot::Dual(y));
        self.nodes.push(Node::Dense { x, w, b, out });
        Ok(out)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = activation_forward(self.dual(x), kind);
        let out = self.push(Slot::Dual(y));
        self.nodes.push(Node::Activation { x, kind, out });
        out
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let z = add_forward(self.dual(x), self.dual(y))?;
        let out = self.push(Slot::Dual(z));
        self.nodes.push(Node::Add { x, y, out });
        Ok(out)
    }

    /// Sum over rows of the max over columns of absolute latent differences.
    /// Max ties pick the lowest column; the sign at the picked entry is the
    /// subgradient (zero on exact equality).
    pub fn metric_head(&mut self, x: Var, y: Var, rows: usize, cols: usize) -> Result<Var> {
        let (xd, yd) = (self.dual(x), self.dual(y));
        let batch = xd.batch();
        if xd.width() != rows * cols || yd.width() != rows * cols || yd.batch() != batch {
            return Err(Error::ShapeMismatch(format!(
                "metric head expects {}x{} latents, got widths {} and {}",
                rows,
                cols,
                xd.width(),
                yd.width()
            )));
        }
        let mut t = Array1::zeros(batch);
        let mut grad_s = Array2::zeros((batch, xd.dof()));
        let mut grad_g = Array2::zeros((batch, yd.dof()));
        let mut pick = vec![0u32; batch * rows];
        let mut sign = vec![0.0f64; batch * rows];
        for i in 0..batch {
            let mut acc = 0.0;
            for r in 0..rows {
                let base = r * cols;
                let mut best_j = 0usize;
                let mut best_abs = -1.0;
                for j in 0..cols {
                    let d = xd.values[[i, base + j]] - yd.values[[i, base + j]];
                    if d.abs() > best_abs {
                        best_abs = d.abs();
                        best_j = j;
                    }
                }
                let d = xd.values[[i, base + best_j]] - yd.values[[i, base + best_j]];
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                acc += s * d;
                pick[i * rows + r] = best_j as u32;
                sign[i * rows + r] = s;
                for k in 0..xd.dof() {
                    grad_s[[i, k]] += s * xd.tangents[k][[i, base + best_j]];
                }
                for k in 0..yd.dof() {
                    grad_g[[i, k]] -= s * yd.tangents[k][[i, base + best_j]];
                }
            }
            t[i] = acc;
        }
        let out = self.push(Slot::Head(HeadOut { t, grad_s, grad_g }));
        self.nodes.push(Node::MetricHead { x, y, rows, cols, pick, sign, out });
        Ok(out)
    }

    /// Factorized baseline: `T = ||q_s - q_g|| * exp(-(g(q_s) + g(q_g)))`
    /// with scalar network outputs, i.e. the distance-distortion form
    /// `||q_s - q_g|| / tau` with a symmetric positive `tau`.
    pub fn factorized_head(&mut self, x: Var, y: Var, qs: ArrayView2<f64>, qg: ArrayView2<f64>) -> Result<Var> {
        let (xd, yd) = (self.dual(x), self.dual(y));
        let batch = xd.batch();
        if xd.width() != 1 || yd.width() != 1 || qs.nrows() != batch || qg.nrows() != batch {
            return Err(Error::ShapeMismatch("factorized head expects scalar latents".into()));
        }
        let dof_in = qs.ncols();
        let diff = &qs.to_owned() - &qg.to_owned();
        let norm: Array1<f64> = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut t = Array1::zeros(batch);
        let mut grad_s = Array2::zeros((batch, if xd.dof() > 0 { dof_in } else { 0 }));
        let mut grad_g = Array2::zeros((batch, if yd.dof() > 0 { dof_in } else { 0 }));
        for i in 0..batch {
            let e = (-(xd.values[[i, 0]] + yd.values[[i, 0]])).exp();
            let n = norm[i];
            t[i] = n * e;
            if n > 0.0 {
                for k in 0..xd.dof() {
                    grad_s[[i, k]] = e * (diff[[i, k]] / n - n * xd.tangents[k][[i, 0]]);
                }
                for k in 0..yd.dof() {
                    grad_g[[i, k]] = e * (-diff[[i, k]] / n - n * yd.tangents[k][[i, 0]]);
                }
            }
        }
        let out = self.push(Slot::Head(HeadOut { t, grad_s, grad_g }));
        self.nodes.push(Node::FactorizedHead { x, y, norm, out });
        Ok(out)
    }

    /// Euclidean baseline: `T = ||f(q_s) - f(q_g)||_2` over the flat latent.
    pub fn euclidean_head(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xd, yd) = (self.dual(x), self.dual(y));
        let batch = xd.batch();
        if xd.width() != yd.width() || yd.batch() != batch {
            return Err(Error::ShapeMismatch("euclidean head on mismatched latents".into()));
        }
        let mut t = Array1::zeros(batch);
        let mut grad_s = Array2::zeros((batch, xd.dof()));
        let mut grad_g = Array2::zeros((batch, yd.dof()));
        for i in 0..batch {
            let mut sq = 0.0;
            for j in 0..xd.width() {
                let d = xd.values[[i, j]] - yd.values[[i, j]];
                sq += d * d;
            }
            let norm = sq.sqrt();
            t[i] = norm;
            if norm > GRAD_GUARD {
                for k in 0..xd.dof() {
                    let mut p = 0.0;
                    for j in 0..xd.width() {
                        p += (xd.values[[i, j]] - yd.values[[i, j]]) * xd.tangents[k][[i, j]];
                    }
                    grad_s[[i, k]] = p / norm;
                }
                for k in 0..yd.dof() {
                    let mut r = 0.0;
                    for j in 0..yd.width() {
                        r += (xd.values[[i, j]] - yd.values[[i, j]]) * yd.tangents[k][[i, j]];
                    }
                    grad_g[[i, k]] = -r / norm;
                }
            }
        }
        let out = self.push(Slot::Head(HeadOut { t, grad_s, grad_g }));
        self.nodes.push(Node::EuclideanHead { x, y, out });
        Ok(out)
    }

    /// Combined objective: per-sample
    /// `(lambda_E L_E + lambda_TD L_TD + lambda_N L_N) * w` averaged over the
    /// batch, with `w` the detached causality weight.
    pub fn combined_loss(&mut self, inputs: LossInputs) -> Result<(Var, LossTerms)> {
        let h0 = self.head(inputs.h0);
        let batch = h0.t.len();
        let dof = h0.grad_s.ncols();
        if dof == 0 || h0.grad_g.ncols() == 0 {
            return Err(Error::ShapeMismatch("combined loss needs endpoint gradients on h0".into()));
        }
        if inputs.lambda_td > 0.0 && (inputs.h1.is_none() || inputs.h2.is_none()) {
            return Err(Error::Config("TD loss requires stepped head evaluations".into()));
        }
        let t1 = inputs.h1.map(|v| self.head(v).t.clone());
        let t2 = inputs.h2.map(|v| self.head(v).t.clone());
        let h0 = self.head(inputs.h0);

        let mut n_s = Array1::zeros(batch);
        let mut n_g = Array1::zeros(batch);
        let mut r_s = Array1::zeros(batch);
        let mut r_g = Array1::zeros(batch);
        let mut sum_e = 0.0;
        let mut sum_td = 0.0;
        let mut sum_n = 0.0;
        let mut total = 0.0;
        let mut skipped = 0usize;
        for i in 0..batch {
            let gs = h0.grad_s.row(i);
            let gg = h0.grad_g.row(i);
            n_s[i] = gs.dot(&gs).sqrt();
            n_g[i] = gg.dot(&gg).sqrt();

            let mut e_i = 0.0;
            if inputs.lambda_e > 0.0 {
                let ns = n_s[i].max(GRAD_GUARD);
                let ng = n_g[i].max(GRAD_GUARD);
                let es = ((inputs.s_star_s[i] * ns).sqrt() - 1.0).powi(2);
                let eg = ((inputs.s_star_g[i] * ng).sqrt() - 1.0).powi(2);
                e_i = es + eg;
            }

            let mut td_i = 0.0;
            if inputs.lambda_td > 0.0 {
                let (t1, t2) = (t1.as_ref().unwrap(), t2.as_ref().unwrap());
                r_s[i] = h0.t[i] - inputs.dt / inputs.s_star_s[i] - t1[i];
                r_g[i] = h0.t[i] - inputs.dt / inputs.s_star_g[i] - t2[i];
                td_i = r_s[i] * r_s[i] + r_g[i] * r_g[i];
            }

            let mut nl_i = 0.0;
            if inputs.lambda_n > 0.0 {
                if inputs.valid_s[i] {
                    let mut sq = 0.0;
                    for k in 0..dof {
                        let v = inputs.s_star_s[i] * gs[k] + inputs.nhat_s[[i, k]];
                        sq += v * v;
                    }
                    nl_i += (1.0 - inputs.s_star_s[i]) * sq;
                } else {
                    skipped += 1;
                }
                if inputs.valid_g[i] {
                    let mut sq = 0.0;
                    for k in 0..dof {
                        let v = inputs.s_star_g[i] * gg[k] + inputs.nhat_g[[i, k]];
                        sq += v * v;
                    }
                    nl_i += (1.0 - inputs.s_star_g[i]) * sq;
                } else {
                    skipped += 1;
                }
            }

            let combined = inputs.lambda_e * e_i + inputs.lambda_td * td_i + inputs.lambda_n * nl_i;
            let weighted = combined * inputs.causality[i];
            if !weighted.is_finite() {
                return Err(Error::LossBlowup(i));
            }
            sum_e += e_i;
            sum_td += td_i;
            sum_n += nl_i;
            total += weighted;
        }
        let nb = batch as f64;
        let terms = LossTerms {
            eikonal: sum_e / nb,
            td: sum_td / nb,
            normal: sum_n / nb,
            weighted_total: total / nb,
            normal_skipped: skipped,
        };
        let out = self.push(Slot::Scalar(terms.weighted_total));
        self.nodes.push(Node::CombinedLoss {
            ctx: Box::new(LossCtx { inputs, n_s, n_g, r_s, r_g }),
            out,
        });
        Ok((out, terms))
    }

    /// Mean over the batch of the gradient norm at one endpoint; exercises
    /// the nested-derivative path in isolation.
    pub fn grad_norm_loss(&mut self, head: Var, endpoint: Endpoint) -> Result<Var> {
        let h = self.head(head);
        let g = match endpoint {
            Endpoint::Start => &h.grad_s,
            Endpoint::Goal => &h.grad_g,
        };
        if g.ncols() == 0 {
            return Err(Error::ShapeMismatch("head carries no tangents at this endpoint".into()));
        }
        let mean = g.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / g.nrows() as f64;
        let out = self.push(Slot::Scalar(mean));
        self.nodes.push(Node::GradNormLoss { head, endpoint, out });
        Ok(out)
    }

    /// `coeff * sum(theta^2)` over trainable parameters.
    pub fn param_squared_norm(&mut self, coeff: f64) -> Var {
        let mut acc = 0.0;
        for spec in self.params.specs() {
            if spec.frozen {
                continue;
            }
            for i in spec.offset..spec.offset + spec.len() {
                let v = self.params.data()[i];
                acc += v * v;
            }
        }
        let out = self.push(Slot::Scalar(coeff * acc));
        self.nodes.push(Node::ParamSquaredNorm { coeff, out });
        out
    }

    pub fn constant(&mut self, v: f64) -> Var {
        let out = self.push(Slot::Scalar(v));
        self.nodes.push(Node::Constant);
        out
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Reverse sweep from a scalar loss node: exact `dLoss/dtheta`, including
    /// all paths through tangent computations.
    pub fn reverse(&self, loss: Var) -> Result<Vec<f64>> {
        if !self.sealed {
            return Err(Error::UnsealedTape);
        }
        match self.slots.get(loss) {
            Some(Slot::Scalar(_)) => {}
            _ => return Err(Error::NonScalarLoss),
        }
        let mut grads = vec![0.0f64; self.params.len()];
        let mut adjs: Vec<Option<AdjSlot>> = (0..self.slots.len()).map(|_| None).collect();
        adjs[loss] = Some(AdjSlot::Scalar(1.0));

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut adjs, &mut grads)?;
        }

        debug_assert!(self
            .params
            .specs()
            .iter()
            .filter(|s| s.frozen)
            .all(|s| grads[s.offset..s.offset + s.len()].iter().all(|&g| g == 0.0)));
        Ok(grads)
    }

    fn ensure_dual_adj<'a>(
        &self,
        adjs: &'a mut [Option<AdjSlot>],
        var: Var,
    ) -> (&'a mut Array2<f64>, &'a mut Vec<Array2<f64>>) {
        if adjs[var].is_none() {
            let d = self.dual(var);
            adjs[var] = Some(AdjSlot::Dual {
                values: Array2::zeros(d.values.dim()),
                tangents: d.tangents.iter().map(|t| Array2::zeros(t.dim())).collect(),
            });
        }
        match adjs[var].as_mut().unwrap() {
            AdjSlot::Dual { values, tangents } => (values, tangents),
            _ => unreachable!(),
        }
    }

    fn ensure_head_adj<'a>(
        &self,
        adjs: &'a mut [Option<AdjSlot>],
        var: Var,
    ) -> (&'a mut Array1<f64>, &'a mut Array2<f64>, &'a mut Array2<f64>) {
        if adjs[var].is_none() {
            let h = self.head(var);
            adjs[var] = Some(AdjSlot::Head {
                t: Array1::zeros(h.t.len()),
                grad_s: Array2::zeros(h.grad_s.dim()),
                grad_g: Array2::zeros(h.grad_g.dim()),
            });
        }
        match adjs[var].as_mut().unwrap() {
            AdjSlot::Head { t, grad_s, grad_g } => (t, grad_s, grad_g),
            _ => unreachable!(),
        }
    }

    fn backward_node(&self, node: &Node, adjs: &mut [Option<AdjSlot>], grads: &mut [f64]) -> Result<()> {
        match node {
            Node::Input | Node::Encode | Node::Constant => {}

            Node::Dense { x, w, b, out } => {
                let Some(AdjSlot::Dual { values: a, tangents: bt }) = adjs[*out].take() else {
                    return Ok(());
                };
                let wv = self.params.matrix(*w).to_owned();
                let xd = self.dual(*x);
                // Parameter gradients: value path plus every tangent path.
                let mut gw = xd.values.t().dot(&a);
                for (xt, btk) in xd.tangents.iter().zip(bt.iter()) {
                    gw += &xt.t().dot(btk);
                }
                add_to_param(grads, self.params, *w, &gw);
                let gb = a.sum_axis(Axis(0));
                add_vec_to_param(grads, self.params, *b, gb.as_slice().unwrap());
                // Input adjoints.
                let (xa, xat) = self.ensure_dual_adj(adjs, *x);
                *xa += &a.dot(&wv.t());
                for (k, btk) in bt.iter().enumerate() {
                    xat[k] += &btk.dot(&wv.t());
                }
            }

            Node::Activation { x, kind, out } => {
                let Some(AdjSlot::Dual { values: a, tangents: bt }) = adjs[*out].take() else {
                    return Ok(());
                };
                let xd = self.dual(*x);
                let d1 = xd.values.mapv(|v| kind.d1(v));
                // Value adjoint: act'(x) * a + sum_k act''(x) * xdot_k * b_k.
                let mut xv_add = &d1 * &a;
                if !bt.is_empty() {
                    let d2 = xd.values.mapv(|v| kind.d2(v));
                    for (xt, btk) in xd.tangents.iter().zip(bt.iter()) {
                        xv_add += &(&d2 * xt * btk);
                    }
                }
                let (xa, xat) = self.ensure_dual_adj(adjs, *x);
                *xa += &xv_add;
                for (k, btk) in bt.iter().enumerate() {
                    xat[k] += &(&d1 * btk);
                }
            }

            Node::Add { x, y, out } => {
                let Some(AdjSlot::Dual { values: a, tangents: bt }) = adjs[*out].take() else {
                    return Ok(());
                };
                for var in [x, y] {
                    let (va, vat) = self.ensure_dual_adj(adjs, *var);
                    *va += &a;
                    for (k, btk) in bt.iter().enumerate() {
                        vat[k] += btk;
                    }
                }
            }

            Node::MetricHead { x, y, rows, cols, pick, sign, out } => {
                let Some(AdjSlot::Head { t: ta, grad_s: ga, grad_g: gga }) = adjs[*out].take() else {
                    return Ok(());
                };
                let batch = ta.len();
                {
                    let (xa, xat) = self.ensure_dual_adj(adjs, *x);
                    for i in 0..batch {
                        for r in 0..*rows {
                            let s = sign[i * rows + r];
                            if s == 0.0 {
                                continue;
                            }
                            let col = r * cols + pick[i * rows + r] as usize;
                            xa[[i, col]] += ta[i] * s;
                            for (k, xt) in xat.iter_mut().enumerate() {
                                xt[[i, col]] += ga[[i, k]] * s;
                            }
                        }
                    }
                }
                let (ya, yat) = self.ensure_dual_adj(adjs, *y);
                for i in 0..batch {
                    for r in 0..*rows {
                        let s = sign[i * rows + r];
                        if s == 0.0 {
                            continue;
                        }
                        let col = r * cols + pick[i * rows + r] as usize;
                        ya[[i, col]] -= ta[i] * s;
                        for (k, yt) in yat.iter_mut().enumerate() {
                            yt[[i, col]] -= gga[[i, k]] * s;
                        }
                    }
                }
            }

            Node::FactorizedHead { x, y, norm, out } => {
                let Some(AdjSlot::Head { t: ta, grad_s: ga, grad_g: gga }) = adjs[*out].take() else {
                    return Ok(());
                };
                let (xd, yd) = (self.dual(*x), self.dual(*y));
                let h = self.head(*out);
                let batch = ta.len();
                // Shared scalar adjoint through the exponent: everything is
                // proportional to exp(-(gx+gy)), so d/dgx = d/dgy = -(that
                // quantity).
                let mut val_adj = Array1::zeros(batch);
                for i in 0..batch {
                    let mut acc = -ta[i] * h.t[i];
                    for k in 0..ga.ncols() {
                        acc -= ga[[i, k]] * h.grad_s[[i, k]];
                    }
                    for k in 0..gga.ncols() {
                        acc -= gga[[i, k]] * h.grad_g[[i, k]];
                    }
                    val_adj[i] = acc;
                }
                let e: Vec<f64> = (0..batch)
                    .map(|i| (-(xd.values[[i, 0]] + yd.values[[i, 0]])).exp())
                    .collect();
                {
                    let (xa, xat) = self.ensure_dual_adj(adjs, *x);
                    for i in 0..batch {
                        xa[[i, 0]] += val_adj[i];
                        for (k, xt) in xat.iter_mut().enumerate() {
                            xt[[i, 0]] += ga[[i, k]] * (-norm[i] * e[i]);
                        }
                    }
                }
                let (ya, yat) = self.ensure_dual_adj(adjs, *y);
                for i in 0..batch {
                    ya[[i, 0]] += val_adj[i];
                    for (k, yt) in yat.iter_mut().enumerate() {
                        yt[[i, 0]] += gga[[i, k]] * (-norm[i] * e[i]);
                    }
                }
            }

            Node::EuclideanHead { x, y, out } => {
                let Some(AdjSlot::Head { t: ta, grad_s: ga, grad_g: gga }) = adjs[*out].take() else {
                    return Ok(());
                };
                let (xd, yd) = (self.dual(*x), self.dual(*y));
                let h = self.head(*out);
                let batch = ta.len();
                let width = xd.width();
                let mut xa_val = Array2::zeros((batch, width));
                let mut ya_val = Array2::zeros((batch, width));
                let mut xa_tan = vec![Array2::zeros((batch, width)); xd.dof()];
                let mut ya_tan = vec![Array2::zeros((batch, width)); yd.dof()];
                for i in 0..batch {
                    let t = h.t[i];
                    if t <= GRAD_GUARD {
                        continue;
                    }
                    let t3 = t * t * t;
                    for j in 0..width {
                        let d = xd.values[[i, j]] - yd.values[[i, j]];
                        xa_val[[i, j]] += ta[i] * d / t;
                        ya_val[[i, j]] -= ta[i] * d / t;
                    }
                    for k in 0..ga.ncols() {
                        let adj = ga[[i, k]];
                        if adj == 0.0 {
                            continue;
                        }
                        let p = h.grad_s[[i, k]] * t; // p_k = grad_s * t
                        for j in 0..width {
                            let d = xd.values[[i, j]] - yd.values[[i, j]];
                            let xt = xd.tangents[k][[i, j]];
                            xa_val[[i, j]] += adj * (xt / t - p * d / t3);
                            ya_val[[i, j]] += adj * (-xt / t + p * d / t3);
                            xa_tan[k][[i, j]] += adj * d / t;
                        }
                    }
                    for k in 0..gga.ncols() {
                        let adj = gga[[i, k]];
                        if adj == 0.0 {
                            continue;
                        }
                        let r = -h.grad_g[[i, k]] * t; // r_k = -grad_g * t
                        for j in 0..width {
                            let d = xd.values[[i, j]] - yd.values[[i, j]];
                            let yt = yd.tangents[k][[i, j]];
                            xa_val[[i, j]] += adj * (-yt / t + r * d / t3);
                            ya_val[[i, j]] += adj * (yt / t - r * d / t3);
                            ya_tan[k][[i, j]] -= adj * d / t;
                        }
                    }
                }
                {
                    let (xa, xat) = self.ensure_dual_adj(adjs, *x);
                    *xa += &xa_val;
                    for (k, t) in xa_tan.iter().enumerate() {
                        xat[k] += t;
                    }
                }
                let (ya, yat) = self.ensure_dual_adj(adjs, *y);
                *ya += &ya_val;
                for (k, t) in ya_tan.iter().enumerate() {
                    yat[k] += t;
                }
            }

            Node::CombinedLoss { ctx, out } => {
                let Some(AdjSlot::Scalar(top)) = adjs[*out].take() else {
                    return Ok(());
                };
                let inp = &ctx.inputs;
                let h0 = self.head(inp.h0);
                let batch = h0.t.len();
                let dof = h0.grad_s.ncols();
                let nb = batch as f64;

                let mut t0_adj = Array1::zeros(batch);
                let mut gs_adj = Array2::zeros((batch, dof));
                let mut gg_adj = Array2::zeros((batch, h0.grad_g.ncols()));
                let mut t1_adj = Array1::zeros(batch);
                let mut t2_adj = Array1::zeros(batch);

                for i in 0..batch {
                    let c = top * inp.causality[i] / nb;
                    if inp.lambda_e > 0.0 {
                        for (n, s_star, grad, adj) in [
                            (ctx.n_s[i], inp.s_star_s[i], h0.grad_s.row(i), &mut gs_adj),
                            (ctx.n_g[i], inp.s_star_g[i], h0.grad_g.row(i), &mut gg_adj),
                        ] {
                            if n > GRAD_GUARD {
                                // d/dn of (sqrt(s n) - 1)^2 = (sqrt(s n) - 1) sqrt(s/n).
                                let de_dn = ((s_star * n).sqrt() - 1.0) * (s_star / n).sqrt();
                                let scale = c * inp.lambda_e * de_dn / n;
                                for k in 0..grad.len() {
                                    adj[[i, k]] += scale * grad[k];
                                }
                            }
                        }
                    }
                    if inp.lambda_td > 0.0 {
                        t0_adj[i] += c * inp.lambda_td * 2.0 * (ctx.r_s[i] + ctx.r_g[i]);
                        t1_adj[i] -= c * inp.lambda_td * 2.0 * ctx.r_s[i];
                        t2_adj[i] -= c * inp.lambda_td * 2.0 * ctx.r_g[i];
                    }
                    if inp.lambda_n > 0.0 {
                        if inp.valid_s[i] {
                            let w = 1.0 - inp.s_star_s[i];
                            for k in 0..dof {
                                let v = inp.s_star_s[i] * h0.grad_s[[i, k]] + inp.nhat_s[[i, k]];
                                gs_adj[[i, k]] += c * inp.lambda_n * w * 2.0 * inp.s_star_s[i] * v;
                            }
                        }
                        if inp.valid_g[i] {
                            let w = 1.0 - inp.s_star_g[i];
                            for k in 0..dof {
                                let v = inp.s_star_g[i] * h0.grad_g[[i, k]] + inp.nhat_g[[i, k]];
                                gg_adj[[i, k]] += c * inp.lambda_n * w * 2.0 * inp.s_star_g[i] * v;
                            }
                        }
                    }
                }

                {
                    let (t, gs, gg) = self.ensure_head_adj(adjs, inp.h0);
                    *t += &t0_adj;
                    *gs += &gs_adj;
                    *gg += &gg_adj;
                }
                if let Some(h1) = inp.h1 {
                    let (t, _, _) = self.ensure_head_adj(adjs, h1);
                    *t += &t1_adj;
                }
                if let Some(h2) = inp.h2 {
                    let (t, _, _) = self.ensure_head_adj(adjs, h2);
                    *t += &t2_adj;
                }
            }

            Node::GradNormLoss { head, endpoint, out } => {
                let Some(AdjSlot::Scalar(top)) = adjs[*out].take() else {
                    return Ok(());
                };
                let h = self.head(*head);
                let g = match endpoint {
                    Endpoint::Start => &h.grad_s,
                    Endpoint::Goal => &h.grad_g,
                };
                let nb = g.nrows() as f64;
                let mut add = Array2::zeros(g.dim());
                for i in 0..g.nrows() {
                    let r = g.row(i);
                    let n = r.dot(&r).sqrt();
                    if n > GRAD_GUARD {
                        for k in 0..g.ncols() {
                            add[[i, k]] = top * g[[i, k]] / (n * nb);
                        }
                    }
                }
                let (_, gs, gg) = self.ensure_head_adj(adjs, *head);
                match endpoint {
                    Endpoint::Start => *gs += &add,
                    Endpoint::Goal => *gg += &add,
                }
            }

            Node::ParamSquaredNorm { coeff, out } => {
                let Some(AdjSlot::Scalar(top)) = adjs[*out].take() else {
                    return Ok(());
                };
                for spec in self.params.specs() {
                    if spec.frozen {
                        continue;
                    }
                    for i in spec.offset..spec.offset + spec.len() {
                        grads[i] += top * coeff * 2.0 * self.params.data()[i];
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_to_param(grads: &mut [f64], params: &ParamStore, id: ParamId, delta: &Array2<f64>) {
    let s = params.spec(id);
    let mut view = ArrayViewMut2::from_shape((s.rows, s.cols), &mut grads[s.offset..s.offset + s.len()]).unwrap();
    view += delta;
}

fn add_vec_to_param(grads: &mut [f64], params: &ParamStore, id: ParamId, delta: &[f64]) {
    let s = params.spec(id);
    for (g, d) in grads[s.offset..s.offset + s.len()].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}
