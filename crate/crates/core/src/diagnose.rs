//! Read-only diagnostics: sampler timing, gradient-norm traces, paired
//! quartile losses and trajectory straightness.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::numcore::Tensor;
use crate::sample::{latent_loop, sample_batch, straightness, SampleRequest, SamplerKind, SamplerOptions};
use crate::schedule::{FlowTimeGrid, NoiseSchedule};
use crate::textspace::{EmbeddingTable, PAD, SEP};
use crate::train::{loss_quartile_probe, ProbeSet, Process};

/// Median seconds per sample of the latent update loop alone (no source
/// embedding, no rounding), over `repeats` runs.
pub fn time_sampler<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    kind: SamplerKind,
    steps: usize,
    batch: usize,
    geometry: (usize, usize),
    repeats: usize,
) -> Result<f64> {
    if repeats < 3 {
        return Err(invalid("timing needs at least 3 repeats"));
    }
    if batch == 0 {
        return Err(invalid("timing needs a positive batch"));
    }
    let (s, ty) = geometry;
    let d = table.dim();
    let mut src = Vec::with_capacity(batch * s);
    for i in 0..batch {
        src.extend(std::iter::repeat_n(PAD, 1));
        src.extend((0..s - 2).map(|j| 4 + (i + j) % (table.vocab_size() - 4)));
        src.push(SEP);
    }
    let xs = table.embed(&src)?.reshape(&[batch, s, d])?;
    let mut times = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
        let z = Tensor::randn(&[batch, ty, d], 1.0, &mut rng);
        let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|i| ChaCha8Rng::seed_from_u64(i as u64)).collect();
        let start = Instant::now();
        let out = latent_loop(den, table, kind, steps, opts, &xs, z, &mut rngs, None)?;
        let secs = start.elapsed().as_secs_f64();
        std::hint::black_box(out);
        times.push(secs / batch as f64);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times[times.len() / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub n: usize,
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl SeriesSummary {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("empty series"));
        }
        let mut s = xs.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        // nearest-rank percentile
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Ok(Self {
            n: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p95: s[rank - 1],
            max: s[s.len() - 1],
        })
    }
}

/// Pre-clip gradient norms from a TSV training log.
pub fn grad_norm_trace(log: &str) -> Result<(Vec<f64>, SeriesSummary)> {
    let mut lines = log.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| invalid("empty training log"))?;
    let col = header
        .split('\t')
        .position(|c| c == "grad_norm")
        .ok_or_else(|| invalid("training log has no grad_norm column"))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let v = line
            .split('\t')
            .nth(col)
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                path: "<training log>".into(),
                line: i + 1,
                msg: format!("malformed log line {line:?}"),
            })?;
        out.push(v);
    }
    let summary = SeriesSummary::of(&out)?;
    Ok((out, summary))
}

/// Quartile losses of the diffusion model under its own chain and of the
/// flow model on the straight path, on one paired probe set (EMA weights).
pub fn quartile_report(
    diffusion: &Checkpoint,
    flow: &Checkpoint,
    sched: &NoiseSchedule,
    grid: &FlowTimeGrid,
    probe: &ProbeSet,
) -> Result<([f64; 4], [f64; 4])> {
    if diffusion.vocab_hash != flow.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: diffusion.vocab_hash.clone(),
            found: flow.vocab_hash.clone(),
        });
    }
    let rescale = diffusion.ema.config.rescale_max;
    let d = loss_quartile_probe(&diffusion.ema, &diffusion.ema.table, Process::Diffusion(sched), probe, rescale)?;
    let f = loss_quartile_probe(&flow.ema, &flow.ema.table, Process::Flow(grid), probe, flow.ema.config.rescale_max)?;
    Ok((d, f))
}

pub fn quartile_csv(diffusion: &[f64; 4], flow: &[f64; 4]) -> String {
    let row = |name: &str, q: &[f64; 4]| format!("{name},{:.6e},{:.6e},{:.6e},{:.6e}\n", q[0], q[1], q[2], q[3]);
    format!("model,q0,q1,q2,q3\n{}{}", row("diffusion", diffusion), row("flow", flow))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StraightnessStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-prompt straightness of one sampler's trajectories.
pub fn straightness_per_prompt<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    sources: &[Vec<usize>],
    tgt_len: usize,
    kind: SamplerKind,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let reqs: Vec<SampleRequest> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRequest {
            src: s.clone(),
            tgt_len,
            steps,
            kind,
            record_trajectory: true,
            seed: seed.wrapping_add(i as u64),
        })
        .collect();
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(64) {
        for o in sample_batch(den, table, opts, chunk)? {
            out.push(straightness(o.trajectory.as_ref().expect("trajectory requested"))?);
        }
    }
    Ok(out)
}

impl StraightnessStats {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("no trajectories"));
        }
        Ok(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seconds_per_sample: f64,
}

/// Everything one diagnose run reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsBundle {
    pub quartiles_diffusion: [f64; 4],
    pub quartiles_flow: [f64; 4],
    pub grad_norms: Vec<(String, SeriesSummary)>,
    pub timing: Vec<TimingRow>,
    pub straightness_flow: StraightnessStats,
    pub straightness_diffusion: StraightnessStats,
    /// Fraction of prompts whose flow trajectory is straighter.
    pub straighter_fraction: f64,
}

impl DiagnosticsBundle {
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("sampler,steps,seconds_per_sample\n");
        for r in &self.timing {
            s.push_str(&format!("{},{},{:.6e}\n", r.sampler.name(), r.steps, r.seconds_per_sample));
        }
        s
    }

    pub fn straightness_csv(&self) -> String {
        let row = |n: &str, s: &StraightnessStats| format!("{n},{:.6},{:.6},{:.6}\n", s.mean, s.min, s.max);
        format!(
            "sampler,mean,min,max\n{}{}",
            row("flow-avg", &self.straightness_flow),
            row("diffusion", &self.straightness_diffusion)
        )
    }

    pub fn grad_norm_csv(&self) -> String {
        let mut s = String::from("run,n,mean,p95,max\n");
        for (name, g) in &self.grad_norms {
            s.push_str(&format!("{name},{},{:.6e},{:.6e},{:.6e}\n", g.n, g.mean, g.p95, g.max));
        }
        s
    }

    pub fn summary(&self) -> String {
        let q = |v: &[f64; 4]| format!("{:.3e} {:.3e} {:.3e} {:.3e}", v[0], v[1], v[2], v[3]);
        let mut s = format!(
            "quartile loss diffusion: {}\nquartile loss flow:      {}\n",
            q(&self.quartiles_diffusion),
            q(&self.quartiles_flow)
        );
        s.push_str(&format!(
            "straightness flow mean {:.4}, diffusion mean {:.4}, flow straighter on {:.0}% of prompts\n",
            self.straightness_flow.mean,
            self.straightness_diffusion.mean,
            100.0 * self.straighter_fraction
        ));
        for r in &self.timing {
            s.push_str(&format!("time {} N={}: {:.3e} s/sample\n", r.sampler.name(), r.steps, r.seconds_per_sample));
        }
        for (n, g) in &self.grad_norms {
            s.push_str(&format!(
                "grad norm {n}: mean {:.3} p95 {:.3} max {:.3} (p95/mean {:.3})\n",
                g.mean,
                g.p95,
                g.max,
                g.p95 / g.mean
            ));
        }
        s
    }
}
