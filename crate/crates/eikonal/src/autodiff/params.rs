//! Flat parameter storage with a stable layout table, checkpoint
//! serialization, and the adaptive-moment optimizer step.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Magic prefix of checkpoint files.
const CHECKPOINT_MAGIC: &[u8; 8] = b"EIKC0001";

/// Index of one named parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One entry of the layout table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Frozen buffers (the positional-encoding matrix) never receive gradients.
    pub frozen: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All model parameters in one flat array plus the layout table.
#[derive(Debug, Clone)]
pub struct ParamStore {
    data: Vec<f64>,
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, usize>,
    /// Seed used at initialization; recorded in checkpoints.
    pub seed: u64,
}

/// Deterministic builder: blocks are laid out in insertion order and drawn
/// from a seeded stream, so the layout and values are reproducible.
pub struct ParamStoreBuilder {
    data: Vec<f64>,
    specs: Vec<ParamSpec>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStoreBuilder {
    pub fn new(seed: u64) -> Self {
        Self { data: Vec::new(), specs: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, frozen: bool, mut gen: impl FnMut(&mut ChaCha8Rng) -> f64) -> ParamId {
        let offset = self.data.len();
        for _ in 0..rows * cols {
            let v = gen(&mut self.rng);
            self.data.push(v);
        }
        self.specs.push(ParamSpec { name: name.to_string(), offset, rows, cols, frozen });
        ParamId(self.specs.len() - 1)
    }

    /// Gaussian block with the given standard deviation.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        self.push(name, rows, cols, false, |rng| sample_standard_normal(rng) * std)
    }

    /// Frozen Gaussian block (excluded from gradients).
    pub fn frozen_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        self.push(name, rows, cols, true, |rng| sample_standard_normal(rng) * std)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.push(name, rows, cols, false, |_| 0.0)
    }

    pub fn build(self) -> ParamStore {
        let by_name = self.specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ParamStore { data: self.data, specs: self.specs, by_name, seed: self.seed }
    }
}

/// Box-Muller, fed from the builder's deterministic stream.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let s = &self.specs[id.0];
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.len()]).unwrap()
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let s = self.specs[id.0].clone();
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.offset..s.offset + s.len()]).unwrap()
    }

    /// Row vector view (for biases).
    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let s = &self.specs[id.0];
        ArrayView1::from_shape(s.len(), &self.data[s.offset..s.offset + s.len()]).unwrap()
    }

    /// Name of the parameter block containing a flat index.
    pub fn name_at(&self, index: usize) -> &str {
        self.specs
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len())
            .map(|s| s.name.as_str())
            .unwrap_or("<unknown>")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serialize: magic, little-endian u64 header length, JSON header
    /// (layout table, seed, extra metadata), then all values as little-endian
    /// f64. Written atomically via a temp file.
    pub fn save(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "layout": self.specs,
            "seed": self.seed,
            "total_len": self.data.len(),
            "extra": extra,
        });
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + header_bytes.len() + self.data.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(Error::Parse("truncated checkpoint header".into()));
        }
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| Error::Parse(e.to_string()))?;
        let specs: Vec<ParamSpec> = serde_json::from_value(header["layout"].clone())
            .map_err(|e| Error::Parse(format!("bad layout table: {e}")))?;
        let seed = header["seed"].as_u64().unwrap_or(0);
        let total: usize = header["total_len"].as_u64().unwrap_or(0) as usize;
        let body = &bytes[16 + header_len..];
        if body.len() != total * 8 {
            return Err(Error::Parse(format!(
                "checkpoint body is {} bytes, header implies {}",
                body.len(),
                total * 8
            )));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("checkpoint contains non-finite values".into()));
        }
        let by_name = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok((Self { data, specs, by_name, seed }, header["extra"].clone()))
    }
}

/// First/second-moment state for [`adam_step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One adaptive-moment update. Frozen blocks are left untouched. Fails with
/// the offending parameter name on a non-finite gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient length {} vs parameter length {}",
            grads.len(),
            params.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::GradientBlowup(params.name_at(bad).to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - betas.0.powi(t);
    let bc2 = 1.0 - betas.1.powi(t);
    let frozen: Vec<(usize, usize)> = params
        .specs
        .iter()
        .filter(|s| s.frozen)
        .map(|s| (s.offset, s.offset + s.len()))
        .collect();
    let is_frozen = |i: usize| frozen.iter().any(|&(a, b)| i >= a && i < b);
    for i in 0..params.data.len() {
        let g = grads[i];
        state.m[i] = betas.0 * state.m[i] + (1.0 - betas.0) * g;
        state.v[i] = betas.1 * state.v[i] + (1.0 - betas.1) * g * g;
        if is_frozen(i) {
            continue;
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store(seed: u64) -> ParamStore {
        let mut b = ParamStoreBuilder::new(seed);
        b.normal("w", 2, 3, 0.5);
        b.zeros("b", 1, 3);
        b.frozen_normal("enc", 2, 4, 1.0);
        b.build()
    }

    #[test]
    fn layout_is_stable_and_named() {
        let s = tiny_store(7);
        assert_eq!(s.len(), 6 + 3 + 8);
        assert_eq!(s.spec(s.id("b").unwrap()).offset, 6);
        assert!(s.spec(s.id("enc").unwrap()).frozen);
        assert_eq!(s.name_at(7), "b");
        assert_eq!(s.name_at(10), "enc");
        // Same seed, same values.
        let s2 = tiny_store(7);
        assert_eq!(s.data(), s2.data());
        let s3 = tiny_store(8);
        assert_ne!(s.data(), s3.data());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = tiny_store(3);
        s.save(&path, &serde_json::json!({"note": "x"})).unwrap();
        let (loaded, extra) = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.data(), s.data());
        assert_eq!(loaded.specs(), s.specs());
        assert_eq!(loaded.seed, 3);
        assert_eq!(extra["note"], "x");
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = tiny_store(1);
        let before = s.data().to_vec();
        let mut st = AdamState::new(s.len());
        let g = vec![0.0; s.len()];
        adam_step(&mut s, &g, &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(s.data(), &before[..]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        let mut b = ParamStoreBuilder::new(0);
        b.zeros("w", 1, 4);
        let mut s = b.build();
        let mut st = AdamState::new(s.len());
        let g = vec![0.3, -2.0, 5.0, 0.01];
        adam_step(&mut s, &g, &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        for (i, v) in s.data().iter().enumerate() {
            // Bias-corrected first step: lr * g/(|g| + eps) = lr * sign(g).
            assert!((v.abs() - 1e-3).abs() < 1e-6, "param {i} moved by {v}");
            assert_eq!(v.signum(), -g[i].signum());
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut b = ParamStoreBuilder::new(5);
        b.normal("w", 1, 8, 2.0);
        let mut s = b.build();
        let target: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut st = AdamState::new(s.len());
        let mut steps = 0;
        for _ in 0..5000 {
            let g: Vec<f64> = s.data().iter().zip(target.iter()).map(|(p, t)| 2.0 * (p - t)).collect();
            adam_step(&mut s, &g, &mut st, 0.05, (0.9, 0.999), 1e-8).unwrap();
            steps += 1;
            let err: f64 = s
                .data()
                .iter()
                .zip(target.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                .sqrt();
            if err < 1e-6 {
                break;
            }
        }
        let err: f64 = s
            .data()
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-6, "after {steps} steps error is {err}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = tiny_store(2);
        let mut st = AdamState::new(s.len());
        let mut g = vec![0.0; s.len()];
        g[7] = f64::NAN;
        let err = adam_step(&mut s, &g, &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gradient blowup") && msg.contains("'b'"), "{msg}");
    }
}
