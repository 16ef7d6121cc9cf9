//! Samplers over the target latents: the average-velocity Euler loop, the
//! instantaneous-velocity Euler loop for velocity models, and ancestral
//! diffusion sampling. Source rows are re-set to clean embeddings before
//! every network call.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{extract_target, Denoiser, PredTarget};
use crate::error::{invalid, Error, Result};
use crate::numcore::{concat_axis, slice_axis, Tensor};
use crate::schedule::{ancestral_posterior, NoiseSchedule};
use crate::textspace::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    FlowAvg,
    FlowInstant,
    Diffusion,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::FlowAvg => "flow-avg",
            SamplerKind::FlowInstant => "flow-instant",
            SamplerKind::Diffusion => "diffusion",
        }
    }

    pub fn expects(self) -> PredTarget {
        match self {
            SamplerKind::FlowInstant => PredTarget::Velocity,
            _ => PredTarget::Z0,
        }
    }
}

/// `(z_t − z0_pred) / t`.
pub fn average_velocity(z_t: &Tensor, z0_pred: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(invalid(format!("average velocity needs t > 0, got {t}")));
    }
    Ok(z_t.zip_map(z0_pred, |z, p| (z - p) / t)?)
}

/// `(1 − dt/t)·z_t + (dt/t)·z0_pred`; lands exactly on `z0_pred` when
/// `dt == t`.
pub fn euler_step_avg(z_t: &Tensor, z0_pred: &Tensor, t: f32, dt: f32) -> Result<Tensor> {
    if !(dt > 0.0) || dt > t {
        return Err(invalid(format!("euler step needs 0 < dt <= t, got dt={dt}, t={t}")));
    }
    if dt == t {
        if z_t.shape() != z0_pred.shape() {
            return Err(crate::numcore::TensorError::ShapeMismatch {
                op: "euler_step_avg",
                left: z_t.shape().to_vec(),
                right: z0_pred.shape().to_vec(),
            }
            .into());
        }
        return Ok(z0_pred.clone());
    }
    let r = dt / t;
    Ok(z_t.zip_map(z0_pred, |z, p| (1.0 - r) * z + r * p)?)
}

/// Snapshots of one item's target latents during sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    pub t: Vec<f32>,
    /// `[tgt_len, d]` each.
    pub snapshots: Vec<Tensor>,
}

impl Trajectory {
    /// `k,t,dim0,...` with one row per snapshot for target row `position`.
    pub fn to_csv(&self, position: usize) -> Result<String> {
        let d = self
            .snapshots
            .first()
            .map(|s| s.shape()[1])
            .ok_or_else(|| invalid("empty trajectory"))?;
        let rows = self.snapshots[0].shape()[0];
        if position >= rows {
            return Err(invalid(format!("position {position} outside 0..{rows}")));
        }
        let mut out = String::from("k,t");
        for j in 0..d {
            out.push_str(&format!(",dim{j}"));
        }
        out.push('\n');
        for (k, (t, s)) in self.t.iter().zip(&self.snapshots).enumerate() {
            out.push_str(&format!("{k},{t}"));
            for v in &s.data()[position * d..(position + 1) * d] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn metadata(&self, position: usize) -> serde_json::Value {
        serde_json::json!({
            "sampler": self.sampler.name(),
            "steps": self.steps,
            "seed": self.seed,
            "position": position,
            "snapshots": self.snapshots.len(),
        })
    }
}

/// Endpoint displacement over arc length of the flattened snapshots; a
/// zero-length path counts as straight.
pub fn straightness(traj: &Trajectory) -> Result<f64> {
    straightness_of(&traj.snapshots)
}

pub fn straightness_of(points: &[Tensor]) -> Result<f64> {
    if points.len() < 2 {
        return Err(invalid("straightness needs at least two snapshots"));
    }
    let mut arc = 0.0;
    for w in points.windows(2) {
        arc += w[1].l2_distance(&w[0])?;
    }
    let disp = points[points.len() - 1].l2_distance(&points[0])?;
    if arc == 0.0 {
        return Ok(1.0);
    }
    Ok((disp / arc).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    /// Source ids in model layout (left-padded, ending in SEP).
    pub src: Vec<usize>,
    pub tgt_len: usize,
    pub steps: usize,
    pub kind: SamplerKind,
    pub record_trajectory: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Rounded target ids, `tgt_len` long (not yet cut at EOS).
    pub ids: Vec<usize>,
    pub latent: Tensor,
    pub trajectory: Option<Trajectory>,
}

/// Settings shared by every request in a batch.
#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions<'a> {
    pub rescale_max: f32,
    /// Required for the diffusion sampler.
    pub sched: Option<&'a NoiseSchedule>,
    /// Snap each `z0` prediction onto its nearest embedding rows.
    pub clamp: bool,
}

impl Default for SamplerOptions<'_> {
    fn default() -> Self {
        Self {
            rescale_max: 1000.0,
            sched: None,
            clamp: false,
        }
    }
}

/// The latent update loop for a batch: `xs` is `[B, S, d]` clean source
/// rows, `z` is `[B, Ty, d]` initial noise. `rngs` supply the per-item
/// ancestral noise. Snapshots, when requested, are pushed after the initial
/// state and after every step.
pub fn latent_loop<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    kind: SamplerKind,
    steps: usize,
    opts: &SamplerOptions,
    xs: &Tensor,
    mut z: Tensor,
    rngs: &mut [ChaCha8Rng],
    mut snapshots: Option<&mut Vec<(f32, Tensor)>>,
) -> Result<Tensor> {
    if den.pred_target() != kind.expects() {
        return Err(Error::PredTargetMismatch {
            expected: kind.expects(),
            found: den.pred_target(),
        });
    }
    if steps == 0 {
        return Err(invalid("sampler needs at least one step"));
    }
    let b = z.shape()[0];
    let s = xs.shape()[1];
    if let Some(snaps) = snapshots.as_deref_mut() {
        snaps.push((1.0, z.clone()));
    }
    let predict = |z: &Tensor, t_in: f32| -> Result<Tensor> {
        let zin = concat_axis(&[xs, z], 1)?;
        extract_target(&den.predict(&zin, t_in)?, s)
    };
    match kind {
        SamplerKind::FlowAvg | SamplerKind::FlowInstant => {
            let dt = (1.0 / steps as f64) as f32;
            for k in (1..=steps).rev() {
                let t = (k as f64 / steps as f64) as f32;
                let t_in = (opts.rescale_max as f64 * k as f64 / steps as f64) as f32;
                let pred = predict(&z, t_in)?;
                z = if kind == SamplerKind::FlowAvg {
                    let pred = if opts.clamp { table.clamp(&pred)? } else { pred };
                    euler_step_avg(&z, &pred, t, dt)?
                } else {
                    z.zip_map(&pred, |zv, v| zv - v * dt)?
                };
                if let Some(snaps) = snapshots.as_deref_mut() {
                    snaps.push((((k - 1) as f64 / steps as f64) as f32, z.clone()));
                }
            }
        }
        SamplerKind::Diffusion => {
            let sched = opts
                .sched
                .ok_or_else(|| invalid("diffusion sampler needs a noise schedule"))?;
            if steps != sched.steps() {
                return Err(invalid(format!(
                    "diffusion sampling runs the full {}-step chain, got {steps}",
                    sched.steps()
                )));
            }
            if rngs.len() != b {
                return Err(invalid("one noise stream per batch item required"));
            }
            for k in (1..=steps).rev() {
                let pred = predict(&z, sched.time_input(k, opts.rescale_max))?;
                let pred = if opts.clamp { table.clamp(&pred)? } else { pred };
                let mut items = Vec::with_capacity(b);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let zi = slice_axis(&z, 0, i, i + 1)?;
                    let pi = slice_axis(&pred, 0, i, i + 1)?;
                    items.push(ancestral_posterior(&zi, &pi, k, sched, rng)?);
                }
                z = concat_axis(&items.iter().collect::<Vec<_>>(), 0)?;
                if let Some(snaps) = snapshots.as_deref_mut() {
                    snaps.push((((k - 1) as f64 / steps as f64) as f32, z.clone()));
                }
            }
        }
    }
    Ok(z)
}

/// Samples every request together; they must share kind, step count and
/// geometry. Each item draws from its own seeded stream.
pub fn sample_batch<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    reqs: &[SampleRequest],
) -> Result<Vec<SampleOutput>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    if first.tgt_len == 0 || first.src.is_empty() {
        return Err(invalid("empty source or target length"));
    }
    if reqs.iter().any(|r| {
        r.kind != first.kind || r.steps != first.steps || r.tgt_len != first.tgt_len || r.src.len() != first.src.len()
    }) {
        return Err(invalid("requests in one batch must share sampler, steps and geometry"));
    }
    let (b, s, ty, d) = (reqs.len(), first.src.len(), first.tgt_len, table.dim());
    let src: Vec<usize> = reqs.iter().flat_map(|r| r.src.iter().copied()).collect();
    let xs = table.embed(&src)?.reshape(&[b, s, d])?;
    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let init: Vec<Tensor> = rngs.iter_mut().map(|r| Tensor::randn(&[1, ty, d], 1.0, r)).collect();
    let z = concat_axis(&init.iter().collect::<Vec<_>>(), 0)?;
    let record = reqs.iter().any(|r| r.record_trajectory);
    let mut snaps = Vec::new();
    let z = latent_loop(
        den,
        table,
        first.kind,
        first.steps,
        opts,
        &xs,
        z,
        &mut rngs,
        record.then_some(&mut snaps),
    )?;
    let mut out = Vec::with_capacity(b);
    for (i, r) in reqs.iter().enumerate() {
        let latent = slice_axis(&z, 0, i, i + 1)?.reshape(&[ty, d])?;
        let ids = table.round_tokens(&latent)?;
        let trajectory = if r.record_trajectory {
            let mut t = Vec::with_capacity(snaps.len());
            let mut snapshots = Vec::with_capacity(snaps.len());
            for (tv, zz) in &snaps {
                t.push(*tv);
                snapshots.push(slice_axis(zz, 0, i, i + 1)?.reshape(&[ty, d])?);
            }
            Some(Trajectory {
                sampler: r.kind,
                steps: r.steps,
                seed: r.seed,
                t,
                snapshots,
            })
        } else {
            None
        };
        out.push(SampleOutput {
            ids,
            latent,
            trajectory,
        });
    }
    Ok(out)
}

/// Single-request average-velocity sampling.
pub fn flow_sample<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    req: &SampleRequest,
) -> Result<SampleOutput> {
    if req.kind != SamplerKind::FlowAvg {
        return Err(invalid("flow_sample runs the flow-avg sampler"));
    }
    Ok(sample_batch(den, table, opts, std::slice::from_ref(req))?.remove(0))
}

pub fn instant_velocity_sample<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    req: &SampleRequest,
) -> Result<SampleOutput> {
    if req.kind != SamplerKind::FlowInstant {
        return Err(invalid("instant_velocity_sample runs the flow-instant sampler"));
    }
    Ok(sample_batch(den, table, opts, std::slice::from_ref(req))?.remove(0))
}

pub fn diffusion_sample<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    req: &SampleRequest,
) -> Result<SampleOutput> {
    if req.kind != SamplerKind::Diffusion {
        return Err(invalid("diffusion_sample runs the diffusion sampler"));
    }
    Ok(sample_batch(den, table, opts, std::slice::from_ref(req))?.remove(0))
}
