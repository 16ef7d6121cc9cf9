//! Diffusion pretraining, straight-path flow fine-tuning, time-step
//! samplers, Adam with global-norm clipping, EMA, and the per-quartile loss
//! probe.
//!
//! A step draws all of its randomness (time steps, Gaussian noise, dropout
//! seed) sequentially from the trainer's stream before any work is split
//! into fixed-size chunks, and chunk results are summed in chunk order, so a
//! run is bit-reproducible from its seed regardless of thread count.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::denoiser::{extract_target, forward_graph, Denoiser, Dropout, Model, PredTarget};
use crate::error::{invalid, Error, Result};
use crate::numcore::{concat_axis, Graph, Tensor};
use crate::schedule::{FlowTimeGrid, NoiseSchedule};
use crate::textspace::{ce_anchor_loss, EmbeddingTable};

/// Items per autodiff graph; fixed so results do not depend on threading.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Plain squared error.
    #[default]
    XLoss,
    /// Squared error weighted by `1/t²`.
    VWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeStrategy {
    #[default]
    Uniform,
    LogitNormal {
        mu: f64,
        sigma: f64,
    },
    LossAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub warmup_steps: u64,
    pub dropout: f32,
    pub ema_decay: f32,
    /// Flow grid size `T`.
    pub flow_steps: usize,
    /// Diffusion chain length.
    pub diffusion_steps: usize,
    pub reg_rate: f32,
    pub loss_mode: LossMode,
    pub pred_target: PredTarget,
    pub time_strategy: TimeStrategy,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 80,
            max_steps: None,
            warmup_steps: 200,
            dropout: 0.0,
            ema_decay: 0.999,
            flow_steps: 20,
            diffusion_steps: 200,
            reg_rate: 0.0,
            loss_mode: LossMode::XLoss,
            pred_target: PredTarget::Z0,
            time_strategy: TimeStrategy::Uniform,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.reg_rate >= 0.0) {
            return bad("reg_rate must be non-negative");
        }
        if self.flow_steps == 0 || self.diffusion_steps == 0 {
            return bad("step counts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if let TimeStrategy::LogitNormal { sigma, .. } = self.time_strategy {
            if !(sigma > 0.0) {
                return bad("logit-normal sigma must be positive");
            }
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n` examples.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * n.div_ceil(self.batch_size)) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub recon: f32,
    pub ce: f32,
    pub reg: f32,
    pub total: f32,
    /// Mean flow time (or `t_step / T_diff`) over the batch.
    pub t_used: f32,
}

impl LossBreakdown {
    fn check(&self, step: u64) -> Result<()> {
        for (term, v) in [
            ("recon", self.recon),
            ("ce", self.ce),
            ("reg", self.reg),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step });
            }
        }
        Ok(())
    }
}

/// Per-bin ring buffers of recent losses for loss-aware time sampling.
#[derive(Debug, Clone)]
pub struct LossHistory {
    bins: Vec<VecDeque<f64>>,
    cap: usize,
}

impl LossHistory {
    pub const MIN_OBS: usize = 10;

    pub fn new(steps: usize) -> Self {
        Self {
            bins: vec![VecDeque::with_capacity(Self::MIN_OBS); steps],
            cap: Self::MIN_OBS,
        }
    }

    pub fn record(&mut self, t_step: usize, loss: f64) {
        if let Some(b) = self.bins.get_mut(t_step.wrapping_sub(1)) {
            if b.len() == self.cap {
                b.pop_front();
            }
            b.push_back(loss);
        }
    }

    pub fn warmed_up(&self) -> bool {
        self.bins.iter().all(|b| b.len() >= Self::MIN_OBS)
    }

    /// Mean squared loss per bin.
    pub fn weights(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|b| b.iter().map(|l| l * l).sum::<f64>() / b.len().max(1) as f64)
            .collect()
    }
}

/// Draws a grid step in `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(
    strategy: TimeStrategy,
    steps: usize,
    history: Option<&LossHistory>,
    rng: &mut R,
) -> usize {
    match strategy {
        TimeStrategy::Uniform => rng.random_range(1..=steps),
        TimeStrategy::LogitNormal { mu, sigma } => {
            let n: f64 = StandardNormal.sample(rng);
            let u = 1.0 - 1.0 / (1.0 + (-(mu + sigma * n)).exp());
            ((u * steps as f64).ceil() as usize).clamp(1, steps)
        }
        TimeStrategy::LossAware => match history {
            Some(h) if h.bins.len() == steps && h.warmed_up() => {
                let w = h.weights();
                let total: f64 = w.iter().sum();
                if !(total > 0.0) || !total.is_finite() {
                    return rng.random_range(1..=steps);
                }
                let mut x = rng.random::<f64>() * total;
                for (i, wi) in w.iter().enumerate() {
                    if x < *wi {
                        return i + 1;
                    }
                    x -= wi;
                }
                steps
            }
            _ => rng.random_range(1..=steps),
        },
    }
}

/// `ema ← decay·ema + (1−decay)·params`.
pub fn ema_update(ema: &mut [&mut Tensor], params: &[&Tensor], decay: f32) -> Result<()> {
    if ema.len() != params.len() {
        return Err(invalid("ema_update: parameter count mismatch"));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        if e.shape() != p.shape() {
            return Err(crate::numcore::TensorError::ShapeMismatch {
                op: "ema_update",
                left: e.shape().to_vec(),
                right: p.shape().to_vec(),
            }
            .into());
        }
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Linear warmup from 0, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f32 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f32 / cfg.warmup_steps as f32
    }
}

/// Adam moments for every model tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self {
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with gradients pre-multiplied by `grad_scale`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32, grad_scale: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr * grad_scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Which forward process a step trains (or a probe evaluates) under.
#[derive(Debug, Clone, Copy)]
pub enum Process<'a> {
    Diffusion(&'a NoiseSchedule),
    Flow(&'a FlowTimeGrid),
}

impl Process<'_> {
    pub fn steps(&self) -> usize {
        match self {
            Process::Diffusion(s) => s.steps(),
            Process::Flow(g) => g.steps,
        }
    }

    /// `(signal coeff, noise coeff, model time input, flow t or t/T)`.
    fn coeffs(&self, t_step: usize, rescale_max: f32) -> Result<(f32, f32, f32, f32)> {
        match self {
            Process::Diffusion(s) => {
                let (a, b) = s.forward_coeffs(t_step)?;
                let t_in = s.time_input(t_step, rescale_max);
                Ok((a as f32, b as f32, t_in, t_step as f32 / s.steps() as f32))
            }
            Process::Flow(g) => {
                let t_in = g.rescale(t_step)?;
                let t = g.t(t_step);
                Ok((1.0 - t, t, t_in, t))
            }
        }
    }
}

/// Randomness consumed by one step.
#[derive(Debug, Clone)]
pub struct Draws {
    pub t_steps: Vec<usize>,
    /// `[B, tgt_len, d]` standard normal.
    pub eps: Tensor,
    pub dropout_seed: u64,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        strategy: TimeStrategy,
        history: Option<&LossHistory>,
        steps: usize,
        shape: [usize; 3],
    ) -> Self {
        let t_steps = (0..shape[0])
            .map(|_| sample_timestep(strategy, steps, history, rng))
            .collect();
        let eps = Tensor::randn(&shape, 1.0, rng);
        Self {
            t_steps,
            eps,
            dropout_seed: rng.random(),
        }
    }

    pub fn fixed(t_step: usize, eps: Tensor) -> Self {
        Self {
            t_steps: vec![t_step; eps.shape()[0]],
            eps,
            dropout_seed: 0,
        }
    }
}

/// Everything about a loss evaluation besides the model and the batch.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub process: Process<'a>,
    pub loss_mode: LossMode,
    pub reg_rate: f32,
    pub teacher: Option<&'a Model>,
    pub dropout: f32,
}

struct ChunkOut {
    loss: LossBreakdown,
    per_item: Vec<f64>,
    grads: Option<Vec<Tensor>>,
}

fn expand(per_item: &[f32], row: usize) -> Tensor {
    Tensor::from_fn(&[per_item.len() * row], |i| per_item[i / row])
}

fn chunk_loss(
    model: &Model,
    obj: &Objective,
    batch: &[Example],
    t_steps: &[usize],
    eps: &Tensor,
    b_total: usize,
    dropout_seed: u64,
    want_grads: bool,
) -> Result<ChunkOut> {
    let cfg = &model.config;
    let (c, s, ty, d) = (batch.len(), cfg.src_len, cfg.tgt_len, cfg.dim);
    let mut sig = Vec::with_capacity(c);
    let mut noi = Vec::with_capacity(c);
    let mut t_in = Vec::with_capacity(c);
    let mut t_flow = Vec::with_capacity(c);
    for &k in t_steps {
        let (a, b, ti, t) = obj.process.coeffs(k, cfg.rescale_max)?;
        sig.push(a);
        noi.push(b);
        t_in.push(ti);
        t_flow.push(t);
    }
    for ex in batch {
        if ex.src.len() != s || ex.tgt.len() != ty {
            return Err(invalid(format!(
                "example geometry {}+{} does not match model {s}+{ty}",
                ex.src.len(),
                ex.tgt.len()
            )));
        }
    }
    let row = ty * d;
    let norm = (b_total * row) as f32;
    let recon_w: Vec<f32> = t_flow
        .iter()
        .map(|&t| match obj.loss_mode {
            LossMode::XLoss => 1.0,
            LossMode::VWeighted => 1.0 / (t * t),
        })
        .collect();

    let mut g = Graph::<f32>::new();
    let e = g.leaf(model.table.weight.clone(), want_grads)?;
    let p = model.denoiser.leaves(&mut g, want_grads)?;
    let src_ids: Vec<usize> = batch.iter().flat_map(|x| x.src.iter().copied()).collect();
    let tgt_ids: Vec<usize> = batch.iter().flat_map(|x| x.tgt.iter().copied()).collect();
    let xs = g.gather(e, &src_ids)?;
    let xs = g.reshape(xs, &[c, s, d])?;
    let z0 = g.gather(e, &tgt_ids)?;
    let z0 = g.reshape(z0, &[c, ty, d])?;
    let eps_v = g.constant(eps.clone())?;
    let a = g.constant(expand(&sig, row).reshape(&[c, ty, d])?)?;
    let bn = g.constant(Tensor::from_fn(&[c, ty, d], |i| noi[i / row] * eps.data()[i]))?;
    let zt = g.mul(z0, a)?;
    let zt = g.add(zt, bn)?;
    let zin = g.concat(&[xs, zt], 1)?;
    let mut drop = (obj.dropout > 0.0).then(|| Dropout::new(obj.dropout, dropout_seed));
    let out = forward_graph(cfg, &mut g, &p, zin, &t_in, drop.as_mut())?;
    let pred = g.slice(out, 1, s, s + ty)?;

    let target = match model.pred_target {
        PredTarget::Z0 => z0,
        PredTarget::Velocity => g.sub(eps_v, z0)?,
    };
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let per_item: Vec<f64> = g
        .value(sq)
        .data()
        .chunks(row)
        .zip(&recon_w)
        .map(|(r, &w)| w as f64 * r.iter().map(|&v| v as f64).sum::<f64>() / row as f64)
        .collect();
    let w = g.constant(Tensor::from_fn(&[c, ty, d], |i| recon_w[i / row] / norm))?;
    let weighted = g.mul(sq, w)?;
    let recon = g.sum(weighted)?;

    let ce = ce_anchor_loss(&mut g, z0, e, &tgt_ids)?;
    let ce = g.scale(ce, c as f32 / b_total as f32)?;
    let mut total = g.add(recon, ce)?;

    let mut reg_val = 0.0;
    if let (Some(teacher), true) = (obj.teacher, obj.reg_rate > 0.0) {
        if teacher.pred_target != PredTarget::Z0 {
            return Err(Error::PredTargetMismatch {
                expected: PredTarget::Z0,
                found: teacher.pred_target,
            });
        }
        let zin_val = g.value(zin).clone();
        let ref_full = teacher.forward(&zin_val, &t_in)?;
        let ref_z0 = g.constant(extract_target(&ref_full, s)?)?;
        let student_z0 = match model.pred_target {
            PredTarget::Z0 => pred,
            PredTarget::Velocity => {
                let tc = g.constant(expand(&t_flow, row).reshape(&[c, ty, d])?)?;
                let tv = g.mul(pred, tc)?;
                g.sub(zt, tv)?
            }
        };
        let dr = g.sub(student_z0, ref_z0)?;
        let sq2 = g.mul(dr, dr)?;
        let w2 = g.constant(Tensor::from_fn(&[c, ty, d], |i| {
            let t = t_flow[i / row];
            obj.reg_rate / (t * t) / norm
        }))?;
        let weighted = g.mul(sq2, w2)?;
        let reg = g.sum(weighted)?;
        reg_val = g.value(reg).item()?;
        total = g.add(total, reg)?;
    }

    let loss = LossBreakdown {
        recon: g.value(recon).item()?,
        ce: g.value(ce).item()?,
        reg: reg_val,
        total: g.value(total).item()?,
        t_used: t_flow.iter().sum::<f32>() / b_total as f32,
    };
    let grads = if want_grads && loss.total.is_finite() {
        let mut gr = g.backward(total)?;
        let mut out = Vec::with_capacity(p.len() + 1);
        out.push(gr.take(e).expect("embedding gradient"));
        for v in &p {
            out.push(gr.take(*v).expect("parameter gradient"));
        }
        Some(out)
    } else {
        None
    };
    Ok(ChunkOut {
        loss,
        per_item,
        grads,
    })
}

/// Batch loss (and optionally gradients in model tensor order) for fixed
/// draws. Chunks are evaluated in parallel and summed in order.
pub fn evaluate_batch(
    model: &Model,
    obj: &Objective,
    batch: &[Example],
    draws: &Draws,
    want_grads: bool,
) -> Result<(LossBreakdown, Vec<f64>, Option<Vec<Tensor>>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if draws.t_steps.len() != batch.len() || draws.eps.shape()[0] != batch.len() {
        return Err(invalid("draws do not match batch size"));
    }
    if draws.t_steps.iter().any(|&k| k == 0 || k > obj.process.steps()) {
        return Err(invalid(format!(
            "time step outside 1..={}",
            obj.process.steps()
        )));
    }
    let b = batch.len();
    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let outs: Vec<Result<ChunkOut>> = starts
        .par_iter()
        .enumerate()
        .map(|(ci, &st)| {
            let en = (st + CHUNK).min(b);
            let eps = crate::numcore::slice_axis(&draws.eps, 0, st, en)?;
            chunk_loss(
                model,
                obj,
                &batch[st..en],
                &draws.t_steps[st..en],
                &eps,
                b,
                draws.dropout_seed.wrapping_add(ci as u64 * 0x9e37_79b9),
                want_grads,
            )
        })
        .collect();
    let mut loss = LossBreakdown::default();
    let mut per_item = Vec::with_capacity(b);
    let mut grads: Option<Vec<Tensor>> = None;
    for o in outs {
        let o = o?;
        loss.recon += o.loss.recon;
        loss.ce += o.loss.ce;
        loss.reg += o.loss.reg;
        loss.total += o.loss.total;
        loss.t_used += o.loss.t_used;
        per_item.extend(o.per_item);
        if let Some(gs) = o.grads {
            match grads.as_mut() {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(gs) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    Ok((loss, per_item, grads))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f32,
    pub lr: f32,
}

impl StepReport {
    pub const HEADER: &'static str = "step\ttotal\trecon\tce\treg\tt_used\tgrad_norm\tlr";

    /// Tab-separated training-log line.
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\t{:.6e}\t{:.6e}",
            self.step, l.total, l.recon, l.ce, l.reg, l.t_used, self.grad_norm, self.lr
        )
    }
}

/// Single writer of a model and its EMA.
pub struct Trainer {
    pub model: Model,
    pub ema: Model,
    pub cfg: TrainConfig,
    pub step: u64,
    /// Pins every sampled time step (test hook).
    pub force_t_step: Option<usize>,
    adam: Adam,
    history: LossHistory,
    rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&model.tensors());
        let ema = model.clone();
        Ok(Self {
            history: LossHistory::new(1),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            model,
            ema,
            cfg,
            step: 0,
            force_t_step: None,
            adam,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next minibatch from an epoch-wise reshuffled ordering.
    pub fn next_batch(&mut self, data: &[Example]) -> Vec<Example> {
        let b = self.cfg.batch_size.min(data.len());
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() || self.order.len() != data.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(data[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }

    fn draws(&mut self, process: Process, b: usize) -> Draws {
        let steps = process.steps();
        if self.history.bins.len() != steps {
            self.history = LossHistory::new(steps);
        }
        let cfg = &self.model.config;
        let mut d = Draws::sample(
            &mut self.rng,
            self.cfg.time_strategy,
            Some(&self.history),
            steps,
            [b, cfg.tgt_len, cfg.dim],
        );
        if let Some(k) = self.force_t_step {
            d.t_steps.fill(k);
        }
        d
    }

    fn apply(&mut self, obj: Objective, batch: &[Example]) -> Result<StepReport> {
        let draws = self.draws(obj.process, batch.len());
        let (loss, per_item, grads) = evaluate_batch(&self.model, &obj, batch, &draws, true)?;
        loss.check(self.step + 1)?;
        let grads = grads.expect("gradients requested");
        for (&k, &l) in draws.t_steps.iter().zip(&per_item) {
            self.history.record(k, l);
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "grad_norm",
                step: self.step + 1,
            });
        }
        let scale = if norm > self.cfg.grad_clip as f64 {
            (self.cfg.grad_clip as f64 / norm) as f32
        } else {
            1.0
        };
        self.step += 1;
        let lr = lr_at(self.step, &self.cfg);
        self.adam.step(&mut self.model.tensors_mut(), &grads, lr, scale);
        ema_update(&mut self.ema.tensors_mut(), &self.model.tensors(), self.cfg.ema_decay)?;
        Ok(StepReport {
            step: self.step,
            loss,
            grad_norm: norm as f32,
            lr,
        })
    }

    /// One diffusion pretraining step: noise the target rows under the
    /// variance-preserving chain and regress `z0`, plus the anchor CE.
    pub fn pretrain_diffusion_step(&mut self, batch: &[Example], sched: &NoiseSchedule) -> Result<StepReport> {
        if self.model.pred_target != PredTarget::Z0 {
            return Err(Error::PredTargetMismatch {
                expected: PredTarget::Z0,
                found: self.model.pred_target,
            });
        }
        let obj = Objective {
            process: Process::Diffusion(sched),
            loss_mode: LossMode::XLoss,
            reg_rate: 0.0,
            teacher: None,
            dropout: self.cfg.dropout,
        };
        self.apply(obj, batch)
    }

    /// One straight-path fine-tuning step against a frozen teacher.
    pub fn flow_finetune_step(
        &mut self,
        batch: &[Example],
        teacher: &Model,
        grid: &FlowTimeGrid,
    ) -> Result<StepReport> {
        if let Some(0) = self.force_t_step {
            return Err(invalid("t_step must be at least 1"));
        }
        let obj = Objective {
            process: Process::Flow(grid),
            loss_mode: self.cfg.loss_mode,
            reg_rate: self.cfg.reg_rate,
            teacher: Some(teacher),
            dropout: self.cfg.dropout,
        };
        self.apply(obj, batch)
    }
}

/// Student for fine-tuning: a copy of the teacher's weights with the
/// requested prediction target.
pub fn student_from_teacher(teacher: &Model, pred_target: PredTarget) -> Model {
    let mut m = teacher.clone();
    m.pred_target = pred_target;
    m
}

/// Runs `steps` updates, writing a TSV log line per step.
pub fn run_steps<F>(
    trainer: &mut Trainer,
    data: &[Example],
    steps: u64,
    log: &mut dyn Write,
    mut step_fn: F,
) -> Result<Vec<StepReport>>
where
    F: FnMut(&mut Trainer, &[Example]) -> Result<StepReport>,
{
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    writeln!(log, "{}", StepReport::HEADER)?;
    let mut reports = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = trainer.next_batch(data);
        let r = step_fn(trainer, &batch)?;
        writeln!(log, "{}", r.log_line())?;
        reports.push(r);
    }
    Ok(reports)
}

/// Fixed examples and noise seed for paired quartile comparisons.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub examples: Vec<Example>,
    pub seed: u64,
    /// Grid steps evaluated per quarter (evenly spaced when a quarter holds more).
    pub steps_per_quarter: usize,
}

impl ProbeSet {
    pub fn new(examples: Vec<Example>, seed: u64) -> Self {
        Self {
            examples,
            seed,
            steps_per_quarter: 5,
        }
    }
}

/// Grid steps probed for quarter `q` of `1..=steps`.
pub fn quarter_steps(steps: usize, q: usize, per_quarter: usize) -> Vec<usize> {
    let lo = q * steps / 4 + 1;
    let hi = (q + 1) * steps / 4;
    if hi < lo {
        return Vec::new();
    }
    let n = hi - lo + 1;
    if n <= per_quarter {
        return (lo..=hi).collect();
    }
    let mut v: Vec<usize> = (0..per_quarter)
        .map(|i| lo + (i * (n - 1) + (per_quarter - 1) / 2) / (per_quarter - 1).max(1))
        .collect();
    v.dedup();
    v
}

/// Mean X-loss `z0` reconstruction per time quarter (q0 nearest clean data),
/// without gradients. Velocity predictions are mapped to `z0 = z_t − t·v`.
pub fn loss_quartile_probe<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    process: Process,
    probe: &ProbeSet,
    rescale_max: f32,
) -> Result<[f64; 4]> {
    if probe.examples.is_empty() {
        return Err(invalid("empty probe set"));
    }
    let steps = process.steps();
    let mut out = [0.0; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let ks = quarter_steps(steps, q, probe.steps_per_quarter);
        if ks.is_empty() {
            *slot = f64::NAN;
            continue;
        }
        let mut acc = 0.0;
        for &k in &ks {
            let mut rng = ChaCha8Rng::seed_from_u64(probe.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            let (a, b, t_in, t) = process.coeffs(k, rescale_max)?;
            let mut sum = 0.0;
            for batch in probe.examples.chunks(64) {
                let n = batch.len();
                let src_len = batch[0].src.len();
                let ty = batch[0].tgt.len();
                let src: Vec<usize> = batch.iter().flat_map(|e| e.src.iter().copied()).collect();
                let tgt: Vec<usize> = batch.iter().flat_map(|e| e.tgt.iter().copied()).collect();
                let d = table.dim();
                let xs = table.embed(&src)?.reshape(&[n, src_len, d])?;
                let z0 = table.embed(&tgt)?.reshape(&[n, ty, d])?;
                let eps = Tensor::randn(&[n, ty, d], 1.0, &mut rng);
                let zt = z0.zip_map(&eps, |x, e| a * x + b * e)?;
                let zin = concat_axis(&[&xs, &zt], 1)?;
                let pred = extract_target(&den.predict(&zin, t_in)?, src_len)?;
                let z0_hat = match den.pred_target() {
                    PredTarget::Z0 => pred,
                    PredTarget::Velocity => zt.zip_map(&pred, |z, v| z - t * v)?,
                };
                sum += z0_hat
                    .data()
                    .iter()
                    .zip(z0.data())
                    .map(|(p, q)| ((p - q) as f64).powi(2))
                    .sum::<f64>();
            }
            let denom = (probe.examples.len() * probe.examples[0].tgt.len() * table.dim()) as f64;
            acc += sum / denom;
        }
        *slot = acc / ks.len() as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::textspace::{EOS, PAD, SEP};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            dim: 8,
            hidden: 16,
            layers: 1,
            heads: 2,
            max_len: 16,
            src_len: 4,
            tgt_len: 4,
            ..ModelConfig::default()
        }
    }

    fn pair(a: usize, b: usize) -> Example {
        Example {
            src: vec![PAD, a, b, SEP],
            tgt: vec![b, a, EOS, PAD],
        }
    }

    fn eps_for(batch: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        Tensor::randn(&[batch, cfg.tgt_len, cfg.dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn flow_obj<'a>(grid: &'a FlowTimeGrid, mode: LossMode, teacher: Option<&'a Model>, reg: f32) -> Objective<'a> {
        Objective {
            process: Process::Flow(grid),
            loss_mode: mode,
            reg_rate: reg,
            teacher,
            dropout: 0.0,
        }
    }

    #[test]
    fn lr_warmup_shape() {
        let cfg = TrainConfig {
            lr: 0.01,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 0.01);
        assert!((lr_at(50, &cfg) - 0.005).abs() < 1e-9);
        assert_eq!(lr_at(5000, &cfg), 0.01);
    }

    #[test]
    fn ema_degenerate_and_geometric() {
        let p = Tensor::full(&[3], 2.0);
        let mut e = Tensor::full(&[3], 10.0);
        ema_update(&mut [&mut e], &[&p], 1.0).unwrap();
        assert_eq!(e.data(), &[10.0; 3]);
        ema_update(&mut [&mut e], &[&p], 0.0).unwrap();
        assert_eq!(e.data(), &[2.0; 3]);
        let mut e = Tensor::full(&[3], 10.0);
        ema_update(&mut [&mut e], &[&p], 0.5).unwrap();
        ema_update(&mut [&mut e], &[&p], 0.5).unwrap();
        assert!((e.data()[0] - (0.25 * 10.0 + 0.75 * 2.0)).abs() < 1e-6);
        let mut bad = Tensor::zeros(&[2]);
        assert!(ema_update(&mut [&mut bad], &[&p], 0.5).is_err());
    }

    fn bin_counts(strategy: TimeStrategy, hist: Option<&LossHistory>) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = vec![0usize; 20];
        for _ in 0..100_000 {
            let k = sample_timestep(strategy, 20, hist, &mut rng);
            counts[k - 1] += 1;
        }
        counts
    }

    #[test]
    fn uniform_bins_are_balanced() {
        for c in bin_counts(TimeStrategy::Uniform, None) {
            let f = c as f64 / 1e5;
            assert!((0.04..=0.06).contains(&f), "{f}");
        }
    }

    #[test]
    fn loss_aware_with_flat_history_is_uniform() {
        let mut h = LossHistory::new(20);
        for k in 1..=20 {
            for _ in 0..10 {
                h.record(k, 0.3);
            }
        }
        assert!(h.warmed_up());
        for c in bin_counts(TimeStrategy::LossAware, Some(&h)) {
            let f = c as f64 / 1e5;
            assert!((0.04..=0.06).contains(&f), "{f}");
        }
    }

    #[test]
    fn loss_aware_prefers_high_loss_bins() {
        let mut h = LossHistory::new(20);
        for k in 1..=20 {
            for _ in 0..12 {
                h.record(k, if k == 7 { 3.0 } else { 1.0 });
            }
        }
        let c = bin_counts(TimeStrategy::LossAware, Some(&h));
        // weight 9 against 19 unit bins
        let f = c[6] as f64 / 1e5;
        assert!((f - 9.0 / 28.0).abs() < 0.01, "{f}");
    }

    #[test]
    fn logit_normal_stays_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(mu, sigma) in &[(0.0, 1.0), (5.0, 3.0), (-5.0, 3.0)] {
            for _ in 0..2000 {
                let k = sample_timestep(TimeStrategy::LogitNormal { mu, sigma }, 20, None, &mut rng);
                assert!((1..=20).contains(&k));
            }
        }
    }

    #[test]
    fn quarter_steps_partition() {
        let all: Vec<usize> = (0..4).flat_map(|q| quarter_steps(20, q, 5)).collect();
        assert_eq!(all, (1..=20).collect::<Vec<_>>());
        let q0 = quarter_steps(200, 0, 5);
        assert_eq!(q0.len(), 5);
        assert_eq!((q0[0], q0[4]), (1, 50));
        assert_eq!(quarter_steps(200, 3, 5)[4], 200);
    }

    #[test]
    fn reg_zero_and_self_reference() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone(), PredTarget::Z0, 1).unwrap();
        let batch = vec![pair(4, 5), pair(6, 7), pair(8, 9)];
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let draws = Draws::fixed(7, eps_for(3, &cfg, 2));
        let (l0, _, _) = evaluate_batch(&m, &flow_obj(&grid, LossMode::XLoss, None, 0.0), &batch, &draws, false).unwrap();
        assert_eq!(l0.reg, 0.0);
        assert!((l0.total - (l0.recon + l0.ce)).abs() <= 1e-6 * l0.total.abs());
        let teacher = m.clone();
        let (l1, _, _) =
            evaluate_batch(&m, &flow_obj(&grid, LossMode::XLoss, Some(&teacher), 2.0), &batch, &draws, false).unwrap();
        assert_eq!(l1.reg, 0.0);
    }

    #[test]
    fn reg_is_symmetric() {
        let cfg = tiny_cfg();
        let a = Model::init(cfg.clone(), PredTarget::Z0, 1).unwrap();
        let mut b = Model::init(cfg.clone(), PredTarget::Z0, 2).unwrap();
        // share the table so both see identical inputs
        b.table = a.table.clone();
        let batch = vec![pair(4, 5), pair(6, 7)];
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let draws = Draws::fixed(13, eps_for(2, &cfg, 5));
        let (ab, _, _) = evaluate_batch(&a, &flow_obj(&grid, LossMode::XLoss, Some(&b), 0.7), &batch, &draws, false).unwrap();
        let (ba, _, _) = evaluate_batch(&b, &flow_obj(&grid, LossMode::XLoss, Some(&a), 0.7), &batch, &draws, false).unwrap();
        assert!(ab.reg > 0.0);
        assert!((ab.reg - ba.reg).abs() <= 1e-5 * ab.reg);
    }

    #[test]
    fn v_weighting_is_inverse_square_time() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone(), PredTarget::Z0, 4).unwrap();
        let batch = vec![pair(4, 5), pair(6, 7)];
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        for k in [5usize, 10, 20] {
            let t = k as f64 / 20.0;
            let draws = Draws::fixed(k, eps_for(2, &cfg, 9));
            let (x, _, _) = evaluate_batch(&m, &flow_obj(&grid, LossMode::XLoss, None, 0.0), &batch, &draws, false).unwrap();
            let (v, _, _) =
                evaluate_batch(&m, &flow_obj(&grid, LossMode::VWeighted, None, 0.0), &batch, &draws, false).unwrap();
            let want = x.recon as f64 / (t * t);
            assert!((v.recon as f64 - want).abs() <= 1e-6 * want, "t={t}: {} vs {want}", v.recon);
        }
    }

    #[test]
    fn recon_at_t_one_is_plain_regression() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone(), PredTarget::Z0, 6).unwrap();
        let batch = vec![pair(4, 5)];
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let eps = eps_for(1, &cfg, 10);
        let draws = Draws::fixed(20, eps.clone());
        let (l, _, _) = evaluate_batch(&m, &flow_obj(&grid, LossMode::XLoss, None, 0.0), &batch, &draws, false).unwrap();
        // at t = 1 the target rows are pure noise
        let xs = m.table.embed(&batch[0].src).unwrap().reshape(&[1, 4, 8]).unwrap();
        let zin = concat_axis(&[&xs, &eps], 1).unwrap();
        let pred = extract_target(&m.forward(&zin, &[1000.0]).unwrap(), 4).unwrap();
        let z0 = m.table.embed(&batch[0].tgt).unwrap();
        let direct: f64 = pred
            .data()
            .iter()
            .zip(z0.data())
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum::<f64>()
            / 32.0;
        assert!((l.recon as f64 - direct).abs() < 1e-6);
    }

    #[test]
    fn evaluation_is_deterministic_and_chunk_order_fixed() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone(), PredTarget::Z0, 8).unwrap();
        let batch: Vec<Example> = (0..19).map(|i| pair(4 + i % 6, 4 + (i * 7) % 6)).collect();
        let sched = NoiseSchedule::sqrt(50).unwrap();
        let obj = Objective {
            process: Process::Diffusion(&sched),
            loss_mode: LossMode::XLoss,
            reg_rate: 0.0,
            teacher: None,
            dropout: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = Draws::sample(&mut rng, TimeStrategy::Uniform, None, 50, [19, 4, 8]);
        let a = evaluate_batch(&m, &obj, &batch, &draws, true).unwrap();
        let b = evaluate_batch(&m, &obj, &batch, &draws, true).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn rejects_empty_batch_and_bad_steps() {
        let cfg = tiny_cfg();
        let m = Model::init(cfg.clone(), PredTarget::Z0, 8).unwrap();
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let obj = flow_obj(&grid, LossMode::XLoss, None, 0.0);
        let d = Draws::fixed(1, eps_for(1, &cfg, 1));
        assert!(evaluate_batch(&m, &obj, &[], &d, false).is_err());
        let d0 = Draws::fixed(0, eps_for(1, &cfg, 1));
        assert!(evaluate_batch(&m, &obj, &[pair(4, 5)], &d0, false).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_recon() {
        // Zero table and zero output head: z0 = 0 and prediction = 0.
        let cfg = tiny_cfg();
        let mut m = Model::init(cfg.clone(), PredTarget::Z0, 8).unwrap();
        m.table.weight.data_mut().fill(0.0);
        let n = m.denoiser.tensors.len();
        m.denoiser.tensors[n - 2].data_mut().fill(0.0);
        m.denoiser.tensors[n - 1].data_mut().fill(0.0);
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let d = Draws::fixed(3, eps_for(1, &cfg, 1));
        let (l, _, _) = evaluate_batch(&m, &flow_obj(&grid, LossMode::XLoss, None, 0.0), &[pair(4, 5)], &d, false).unwrap();
        assert_eq!(l.recon, 0.0);
    }

    #[test]
    fn gradient_descent_memorizes_one_pair() {
        let cfg = tiny_cfg();
        let teacher = Model::init(cfg.clone(), PredTarget::Z0, 9).unwrap();
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            warmup_steps: 20,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(student_from_teacher(&teacher, PredTarget::Z0), tc).unwrap();
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let data = vec![pair(4, 5); 8];
        for _ in 0..500 {
            let batch = tr.next_batch(&data);
            tr.flow_finetune_step(&batch, &teacher, &grid).unwrap();
        }
        let obj = flow_obj(&grid, LossMode::XLoss, None, 0.0);
        let recon: f32 = (1..=20)
            .map(|k| {
                let d = Draws::fixed(k, eps_for(1, &cfg, k as u64));
                evaluate_batch(&tr.model, &obj, &data[..1], &d, false).unwrap().0.recon
            })
            .sum::<f32>()
            / 20.0;
        assert!(recon < 1e-3, "recon over the grid {recon}");
    }

    #[test]
    fn diffusion_pretraining_reduces_loss() {
        use crate::corpus::{build_vocab, encode_pairs, gen_task, TaskKind};
        use crate::textspace::Granularity;
        let recs = gen_task(TaskKind::Copy, 50, (2, 4), 6, 64, 3).unwrap();
        let vocab = build_vocab(&recs, Granularity::Word);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            src_len: 5,
            tgt_len: 5,
            ..tiny_cfg()
        };
        let data = encode_pairs(&recs, &vocab, Granularity::Word, 5, 5).unwrap();
        let tc = TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            warmup_steps: 20,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(Model::init(cfg, PredTarget::Z0, 3).unwrap(), tc).unwrap();
        let sched = NoiseSchedule::sqrt(50).unwrap();
        let mut sink = Vec::new();
        let reps = run_steps(&mut tr, &data, 200, &mut sink, |t, b| t.pretrain_diffusion_step(b, &sched)).unwrap();
        let head: f32 = reps[..10].iter().map(|r| r.loss.total).sum::<f32>() / 10.0;
        let tail: f32 = reps[190..].iter().map(|r| r.loss.total).sum::<f32>() / 10.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        let text = String::from_utf8(sink).unwrap();
        assert_eq!(text.lines().count(), 201);
        assert_eq!(text.lines().nth(1).unwrap().split('\t').count(), 8);
    }

    #[test]
    fn velocity_model_rejected_for_pretraining() {
        let m = Model::init(tiny_cfg(), PredTarget::Velocity, 1).unwrap();
        let mut tr = Trainer::new(m, TrainConfig::default()).unwrap();
        let sched = NoiseSchedule::sqrt(10).unwrap();
        assert!(matches!(
            tr.pretrain_diffusion_step(&[pair(4, 5)], &sched),
            Err(Error::PredTargetMismatch { .. })
        ));
    }

    struct Constant(Tensor);
    impl Denoiser for Constant {
        fn pred_target(&self) -> PredTarget {
            PredTarget::Z0
        }
        fn predict(&self, z: &Tensor, _t: f32) -> Result<Tensor> {
            Ok(Tensor::from_fn(z.shape(), |i| self.0.data()[i % self.0.numel()]))
        }
    }

    /// Returns the true clean target: copies the (clean) source rows.
    struct CopyOracle;
    impl Denoiser for CopyOracle {
        fn pred_target(&self) -> PredTarget {
            PredTarget::Z0
        }
        fn predict(&self, z: &Tensor, _t: f32) -> Result<Tensor> {
            let l = z.shape()[1];
            let half = crate::numcore::slice_axis(z, 1, 0, l / 2)?;
            Ok(concat_axis(&[&half, &half], 1)?)
        }
    }

    #[test]
    fn probe_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(10, 8, 1.0, &mut rng);
        let examples: Vec<Example> = (0..40)
            .map(|i| {
                let ids = vec![4 + i % 6, 4 + (i / 6) % 6, 3];
                Example {
                    src: ids.clone(),
                    tgt: ids,
                }
            })
            .collect();
        let probe = ProbeSet::new(examples, 5);
        let grid = FlowTimeGrid::new(20, 1000.0).unwrap();
        let q = loss_quartile_probe(&CopyOracle, &table, Process::Flow(&grid), &probe, 1000.0).unwrap();
        assert_eq!(q, [0.0; 4]);

        // constant-zero denoiser on unit-variance data: every quarter is E[z0²] = 1
        let unit = EmbeddingTable::random(10, 8, 1.0, &mut rng);
        let many: Vec<Example> = (0..512)
            .map(|i| {
                let ids = vec![i % 10, (i / 10) % 10, (i * 7) % 10];
                Example {
                    src: ids.clone(),
                    tgt: ids,
                }
            })
            .collect();
        let probe = ProbeSet::new(many, 6);
        let zero = Constant(Tensor::zeros(&[1]));
        let q = loss_quartile_probe(&zero, &unit, Process::Flow(&grid), &probe, 1000.0).unwrap();
        let mx = q.iter().cloned().fold(f64::MIN, f64::max);
        let mn = q.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(mx, mn, "the zero denoiser ignores noise: {q:?}");
        assert!(loss_quartile_probe(&zero, &unit, Process::Flow(&grid), &ProbeSet::new(vec![], 0), 1000.0).is_err());
    }

    #[test]
    fn log_line_shape() {
        let r = StepReport {
            step: 3,
            loss: LossBreakdown {
                recon: 1.0,
                ce: 2.0,
                reg: 0.0,
                total: 3.0,
                t_used: 0.5,
            },
            grad_norm: 0.6,
            lr: 1e-3,
        };
        let line = r.log_line();
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 8);
        assert_eq!(f[0], "3");
        assert_eq!(f[6].parse::<f32>().unwrap(), 0.6);
    }
}
