//! Parameter storage and the small layer vocabulary the model is built from.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Writes `count: u64` then, per parameter, `name_len: u64`, UTF-8 name
    /// and the tensor blob.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    /// Overwrites values from a blob written by [`ParamStore::write_to`].
    /// Every stored parameter must exist here with the same shape.
    pub fn load_from<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let count = u64::from_le_bytes(b) as usize;
        if count != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: file has {count}, model has {}",
                self.len()
            )));
        }
        for _ in 0..count {
            r.read_exact(&mut b)?;
            let len = u64::from_le_bytes(b) as usize;
            if len > 4096 {
                return Err(Error::Checkpoint("parameter name too long".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let t = Tensor::read_from(r)?;
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            *self.get_mut(id) = t;
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `fan_in x fan_out` matrix scaled by `gain`.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn([fan_in, fan_out], |_| self.rng.gen_range(-limit..limit))
    }

    pub fn normal(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            // Box-Muller
            let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
        })
    }
}

/// Recorded attention weights, one per head, for inspection in tests.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    pub label: String,
    pub weights: Tensor,
}

/// One forward (and optionally backward) pass: a tape plus the lazily bound
/// parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Option<Vec<bool>>,
    probes: Option<Vec<AttentionProbe>>,
}

impl<'p> Session<'p> {
    /// Inference session: parameters are constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, Some(vec![false; params.len()]))
    }

    /// Training session where every parameter receives a gradient.
    pub fn training(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, None)
    }

    /// Training session with a per-parameter trainable mask (`None` = all).
    pub fn with_trainable(params: &'p ParamStore, trainable: Option<Vec<bool>>) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
            probes: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn record_attention(&mut self) {
        self.probes = Some(Vec::new());
    }

    pub fn take_probes(&mut self) -> Vec<AttentionProbe> {
        self.probes.take().unwrap_or_default()
    }

    pub(crate) fn probe(&mut self, label: impl FnOnce() -> String, weights: Var) {
        if let Some(p) = self.probes.as_mut() {
            p.push(AttentionProbe {
                label: label(),
                weights: self.tape.value(weights).clone(),
            });
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.trainable.as_ref().map_or(true, |t| t[id.0]);
        let v = self.tape.leaf(self.params.get(id).clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_gain(store, init, name, fan_in, fan_out, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), init.glorot(fan_in, fan_out, gain)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([fan_out])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Stack of linear layers with ReLU between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i + 1 < self.layers.len() {
                x = s.tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "{dim} not divisible into {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention of `queries` over `keys`. `mask` is an
    /// additive `nq x nk` tensor (`0` or `-inf`).
    pub fn forward(
        &self,
        s: &mut Session,
        queries: Var,
        keys: Var,
        mask: Option<&Tensor>,
        label: &str,
    ) -> Result<Var> {
        let q = self.query.forward(s, queries)?;
        let k = self.key.forward(s, keys)?;
        let v = self.value.forward(s, keys)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.tape.slice_cols(q, lo, hi)?,
                    s.tape.slice_cols(k, lo, hi)?,
                    s.tape.slice_cols(v, lo, hi)?,
                )
            };
            let scores = s.tape.matmul_nt(qh, kh)?;
            let scores = s.tape.scale(scores, scale)?;
            let attn = s.tape.softmax(scores, 1, mask)?;
            s.probe(|| format!("{label}/head{h}"), attn);
            outs.push(s.tape.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { s.tape.concat_cols(&outs)? };
        self.out.forward(s, joined)
    }
}

/// Converts a boolean allow-matrix into the additive form used by
/// [`MultiHeadAttention::forward`].
pub fn additive_mask(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn([rows, cols], |i| {
        if allowed(i / cols, i % cols) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Sine/cosine encoding of a normalized 2-D location into `dim` channels
/// (first half encodes `y`, second half `x`).
pub fn sine_position(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for coord in [y, x] {
        for i in 0..half {
            let freq = 10000f64.powf(2.0 * (i / 2) as f64 / half as f64);
            let a = coord * 2.0 * PI / freq;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    out.resize(dim, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_blob_round_trips() {
        let mut init = Init::new(1);
        let mut a = ParamStore::new();
        Linear::new(&mut a, &mut init, "l", 3, 2);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();

        let mut init = Init::new(2);
        let mut b = ParamStore::new();
        Linear::new(&mut b, &mut init, "l", 3, 2);
        b.load_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(a.get(a.id("l.weight").unwrap()), b.get(b.id("l.weight").unwrap()));

        let mut c = ParamStore::new();
        Linear::new(&mut c, &mut init, "l", 3, 3);
        assert!(c.load_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn inference_session_produces_no_grads() {
        let mut init = Init::new(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut init, "l", 2, 2);
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        let l = s.tape.sum(y).unwrap();
        s.tape.backward(l).unwrap();
        assert!(s.param_grads().iter().all(Option::is_none));
    }

    #[test]
    fn attention_mask_zeroes_blocked_pairs() {
        let mut init = Init::new(4);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2);
        let mut s = Session::inference(&store);
        s.record_attention();
        let x = s.constant(init.normal([3, 8], 1.0));
        let mask = additive_mask(3, 3, |i, j| i == j || (i < 2 && j < 2));
        mha.forward(&mut s, x, x, Some(&mask), "t").unwrap();
        for p in s.take_probes() {
            assert_eq!(p.weights.at(2, 0), 0.0);
            assert_eq!(p.weights.at(0, 2), 0.0);
            assert_eq!(p.weights.at(2, 2), 1.0);
        }
    }

    #[test]
    fn sine_position_has_requested_width() {
        assert_eq!(sine_position(0.3, 0.7, 32).len(), 32);
        assert_eq!(sine_position(0.0, 0.0, 8)[0], 0.0);
    }
}
