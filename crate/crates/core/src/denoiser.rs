//! The denoising network: a small pre-LN bidirectional transformer over the
//! concatenated `[source ; noised target]` latent sequence.
//!
//! Input latents (`d` wide) are projected to the hidden width `h`, summed
//! with a learned positional table and an MLP of the sinusoidal embedding of
//! the rescaled time input, passed through `layers` blocks of full
//! self-attention and a `4h` GELU feed-forward, and projected back to `d`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{slice_axis, Graph, Real, Tensor, Var};
use crate::textspace::EmbeddingTable;

/// What the network's target rows mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredTarget {
    /// Clean latent `z0`.
    #[default]
    Z0,
    /// Straight-path velocity `eps - z0`.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding width `d`.
    pub dim: usize,
    /// Transformer width `h`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest `[source ; target]` sequence the positional table covers.
    pub max_len: usize,
    /// Source slots, including the trailing SEP.
    pub src_len: usize,
    /// Target slots, including EOS and padding.
    pub tgt_len: usize,
    pub rescale_max: f32,
    pub emb_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 36,
            dim: 32,
            hidden: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            src_len: 13,
            tgt_len: 13,
            rescale_max: 1000.0,
            emb_std: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(invalid("model dims must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(invalid("hidden must be even for the sinusoidal time embedding"));
        }
        if self.src_len == 0 || self.tgt_len == 0 || self.src_len + self.tgt_len > self.max_len {
            return Err(invalid(format!(
                "src_len {} + tgt_len {} must be positive and fit max_len {}",
                self.src_len, self.tgt_len, self.max_len
            )));
        }
        if self.vocab_size <= crate::textspace::SPECIALS.len() {
            return Err(invalid("vocab must contain more than the reserved tokens"));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.src_len + self.tgt_len
    }
}

const PER_BLOCK: usize = 12;
const HEAD: usize = 7;
const LN_EPS: f64 = 1e-5;

/// Parameter names and shapes in storage order.
pub fn denoiser_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (cfg.dim, cfg.hidden);
    let mut out = vec![
        ("in.w".to_owned(), vec![d, h]),
        ("in.b".to_owned(), vec![h]),
        ("pos".to_owned(), vec![cfg.max_len, h]),
        ("time.w1".to_owned(), vec![h, h]),
        ("time.b1".to_owned(), vec![h]),
        ("time.w2".to_owned(), vec![h, h]),
        ("time.b2".to_owned(), vec![h]),
    ];
    for l in 0..cfg.layers {
        let shapes: [(&str, Vec<usize>); PER_BLOCK] = [
            ("ln1.g", vec![h]),
            ("ln1.b", vec![h]),
            ("qkv.w", vec![h, 3 * h]),
            ("qkv.b", vec![3 * h]),
            ("o.w", vec![h, h]),
            ("o.b", vec![h]),
            ("ln2.g", vec![h]),
            ("ln2.b", vec![h]),
            ("ff1.w", vec![h, 4 * h]),
            ("ff1.b", vec![4 * h]),
            ("ff2.w", vec![4 * h, h]),
            ("ff2.b", vec![h]),
        ];
        out.extend(shapes.into_iter().map(|(n, s)| (format!("block{l}.{n}"), s)));
    }
    out.push(("ln_f.g".to_owned(), vec![h]));
    out.push(("ln_f.b".to_owned(), vec![h]));
    out.push(("out.w".to_owned(), vec![h, d]));
    out.push(("out.b".to_owned(), vec![d]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub tensors: Vec<Tensor>,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.hidden as f32;
        let depth = (2.0 * cfg.layers as f32).sqrt();
        let tensors = denoiser_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let field = name.rsplit('.').next().unwrap_or("");
                let std = match name.as_str() {
                    "pos" => 0.1,
                    _ if name.ends_with("o.w") || name.ends_with("ff2.w") => {
                        1.0 / (shape[0] as f32).sqrt() / depth
                    }
                    _ if field == "w" || field.starts_with('w') => 1.0 / (shape[0] as f32).sqrt(),
                    _ => 0.0,
                };
                if field == "g" {
                    Tensor::full(&shape, 1.0)
                } else if std == 0.0 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, std, rng)
                }
            })
            .collect();
        let _ = h;
        Self { tensors }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = denoiser_layout(cfg);
        if layout.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} denoiser tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors })
    }

    /// Inserts all parameters as leaves of `g`.
    pub fn leaves<T: Real>(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| Ok(g.leaf(t.cast(), requires_grad)?))
            .collect()
    }
}

/// Inverted dropout on residual branches.
pub struct Dropout {
    pub rate: f32,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f32, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep as f64);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if self.rng.random::<f32>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let m = g.constant(mask)?;
        Ok(g.mul(x, m)?)
    }
}

/// `[cos(t f_i), sin(t f_i)]` with `f_i = 10000^(-i/half)`.
pub fn time_embedding<T: Real>(t_input: &[f32], width: usize) -> Tensor<T> {
    let half = width / 2;
    Tensor::from_fn(&[t_input.len(), width], |idx| {
        let (b, j) = (idx / width, idx % width);
        let i = j % half;
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t_input[b] as f64 * freq;
        T::lit(if j < half { arg.cos() } else { arg.sin() })
    })
}

/// Records the network on `g`. `z_in` is `[B, L, d]`, one time input per
/// batch item; returns `[B, L, d]`.
pub fn forward_graph<T: Real>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &[Var],
    z_in: Var,
    t_input: &[f32],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let shape = g.shape(z_in).to_vec();
    if shape.len() != 3 || shape[2] != cfg.dim || shape[0] != t_input.len() {
        return Err(invalid(format!(
            "denoiser input must be [B, L, {}] with B = {} time inputs, got {shape:?}",
            cfg.dim,
            t_input.len()
        )));
    }
    let (b, l, h) = (shape[0], shape[1], cfg.hidden);
    if l > cfg.max_len {
        return Err(invalid(format!(
            "sequence length {l} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if t_input.iter().any(|&t| !(0.0..=cfg.rescale_max).contains(&t)) {
        return Err(invalid(format!("time input outside [0, {}]", cfg.rescale_max)));
    }
    let nh = cfg.heads;
    let dh = h / nh;

    let mut x = g.matmul(z_in, p[0])?;
    x = g.add(x, p[1])?;
    let pos = g.slice(p[2], 0, 0, l)?;
    x = g.add(x, pos)?;

    let temb = g.constant(time_embedding::<T>(t_input, h))?;
    let mut te = g.matmul(temb, p[3])?;
    te = g.add(te, p[4])?;
    te = g.gelu(te)?;
    te = g.matmul(te, p[5])?;
    te = g.add(te, p[6])?;
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, l)).collect();
    let te = g.gather(te, &rows)?;
    let te = g.reshape(te, &[b, l, h])?;
    x = g.add(x, te)?;
    if let Some(d) = dropout.as_deref_mut() {
        x = d.apply(g, x)?;
    }

    let att_scale = T::lit(1.0 / (dh as f64).sqrt());
    for layer in 0..cfg.layers {
        let w = &p[HEAD + layer * PER_BLOCK..HEAD + (layer + 1) * PER_BLOCK];
        let eps = T::lit(LN_EPS);

        let n1 = g.layer_norm(x, w[0], w[1], eps)?;
        let mut qkv = g.matmul(n1, w[2])?;
        qkv = g.add(qkv, w[3])?;
        let split = |g: &mut Graph<T>, k: usize, perm: &[usize], last: [usize; 2]| -> Result<Var> {
            let part = g.slice(qkv, 2, k * h, (k + 1) * h)?;
            let part = g.reshape(part, &[b, l, nh, dh])?;
            let part = g.permute(part, perm)?;
            Ok(g.reshape(part, &[b * nh, last[0], last[1]])?)
        };
        let q = split(g, 0, &[0, 2, 1, 3], [l, dh])?;
        let kt = split(g, 1, &[0, 2, 3, 1], [dh, l])?;
        let v = split(g, 2, &[0, 2, 1, 3], [l, dh])?;
        let mut scores = g.matmul(q, kt)?;
        scores = g.scale(scores, att_scale)?;
        let att = g.softmax(scores)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[b, nh, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, h])?;
        let mut o = g.matmul(ctx, w[4])?;
        o = g.add(o, w[5])?;
        if let Some(d) = dropout.as_deref_mut() {
            o = d.apply(g, o)?;
        }
        x = g.add(x, o)?;

        let n2 = g.layer_norm(x, w[6], w[7], eps)?;
        let mut f = g.matmul(n2, w[8])?;
        f = g.add(f, w[9])?;
        f = g.gelu(f)?;
        f = g.matmul(f, w[10])?;
        f = g.add(f, w[11])?;
        if let Some(d) = dropout.as_deref_mut() {
            f = d.apply(g, f)?;
        }
        x = g.add(x, f)?;
    }
    let k = HEAD + cfg.layers * PER_BLOCK;
    let xf = g.layer_norm(x, p[k], p[k + 1], T::lit(LN_EPS))?;
    let mut out = g.matmul(xf, p[k + 2])?;
    out = g.add(out, p[k + 3])?;
    Ok(out)
}

/// Target rows `[src_len, L)` of a `[L, d]` or `[B, L, d]` prediction.
pub fn extract_target(full: &Tensor, src_len: usize) -> Result<Tensor> {
    let axis = match full.shape().len() {
        2 => 0,
        3 => 1,
        r => return Err(invalid(format!("extract_target expects rank 2 or 3, got {r}"))),
    };
    let l = full.shape()[axis];
    if src_len == 0 || src_len >= l {
        return Err(invalid(format!("src_len {src_len} outside (0, {l})")));
    }
    Ok(slice_axis(full, axis, src_len, l)?)
}

/// Anything that maps a batch of `[source ; target]` latents and a time input
/// to predictions of the same shape.
pub trait Denoiser: Sync {
    fn pred_target(&self) -> PredTarget;

    /// `z_in` is `[B, L, d]`; returns `[B, L, d]`.
    fn predict(&self, z_in: &Tensor, t_input: f32) -> Result<Tensor>;
}

/// A trained (or initialized) model: tied embedding table plus denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub pred_target: PredTarget,
    pub table: EmbeddingTable,
    pub denoiser: DenoiserParams,
}

impl Model {
    pub fn init(config: ModelConfig, pred_target: PredTarget, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::random(config.vocab_size, config.dim, config.emb_std, &mut rng);
        let denoiser = DenoiserParams::init(&config, &mut rng);
        Ok(Self {
            config,
            pred_target,
            table,
            denoiser,
        })
    }

    /// `emb` followed by the denoiser layout.
    pub fn param_names(&self) -> Vec<String> {
        std::iter::once("emb".to_owned())
            .chain(denoiser_layout(&self.config).into_iter().map(|(n, _)| n))
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.table.weight)
            .chain(self.denoiser.tensors.iter())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.table.weight)
            .chain(self.denoiser.tensors.iter_mut())
            .collect()
    }

    pub fn from_tensors(config: ModelConfig, pred_target: PredTarget, mut tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.is_empty() {
            return Err(invalid("no tensors"));
        }
        let rest = tensors.split_off(1);
        let emb = tensors.pop().unwrap();
        if emb.shape() != [config.vocab_size, config.dim] {
            return Err(invalid(format!("emb: unexpected shape {:?}", emb.shape())));
        }
        let denoiser = DenoiserParams::from_tensors(&config, rest)?;
        Ok(Self {
            config,
            pred_target,
            table: EmbeddingTable::new(emb)?,
            denoiser,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Network forward without recording gradients.
    pub fn forward(&self, z_in: &Tensor, t_input: &[f32]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.denoiser.leaves(&mut g, false)?;
        let z = g.constant(z_in.clone())?;
        let out = forward_graph(&self.config, &mut g, &p, z, t_input, None)?;
        Ok(g.value(out).clone())
    }
}

impl Denoiser for Model {
    fn pred_target(&self) -> PredTarget {
        self.pred_target
    }

    fn predict(&self, z_in: &Tensor, t_input: f32) -> Result<Tensor> {
        let b = z_in.shape().first().copied().unwrap_or(0);
        self.forward(z_in, &vec![t_input; b])
    }
}

/// Wraps a denoiser and counts per-item network evaluations.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
    items: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            items: AtomicUsize::new(0),
        }
    }

    /// Number of batched `predict` calls.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Number of single-sequence forwards (calls times batch size).
    pub fn item_forwards(&self) -> usize {
        self.items.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn pred_target(&self) -> PredTarget {
        self.inner.pred_target()
    }

    fn predict(&self, z_in: &Tensor, t_input: f32) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.items.fetch_add(z_in.shape()[0], Ordering::Relaxed);
        self.inner.predict(z_in, t_input)
    }
}
