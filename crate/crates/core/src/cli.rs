//! Command-line entry points. Every command is a pure function of its
//! config file, seed and input files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{derive_seed, RunConfig};
use crate::corpus::{build_vocab, encode_pairs, encode_source, gen_task, load_jsonl, split, write_jsonl, Example, PairRecord};
use crate::denoiser::{Model, PredTarget};
use crate::diagnose::{
    grad_norm_trace, quartile_csv, quartile_report, straightness_per_prompt, time_sampler, DiagnosticsBundle,
    StraightnessStats, TimingRow,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{candidate_seed, generate_pools, mbr_select, mbr_sweep_pools, reports_csv, score};
use crate::sample::{sample_batch, SampleRequest, SamplerKind, SamplerOptions};
use crate::schedule::{FlowTimeGrid, NoiseSchedule};
use crate::textspace::{strip_output, Granularity, Vocab};
use crate::train::{run_steps, student_from_teacher, ProbeSet, Trainer};

pub const THREADS_ENV: &str = "FLOWLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "flowlab", version, about = "Few-step flow matching for embedding-space seq2seq diffusion LMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or split) a corpus into train/valid/test JSONL plus vocab.txt.
    Corpus {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by `corpus`.
        #[arg(long)]
        data: PathBuf,
        /// Optimizer steps (overrides epochs).
        #[arg(long)]
        steps: Option<u64>,
        /// Training log (TSV); defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow matching fine-tuning from a diffusion checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Diffusion checkpoint; frozen teacher and student initialization.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate targets for the sources of a JSONL file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSONL with a "src" field per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        /// Candidates per source; the MBR choice becomes "trg".
        #[arg(long)]
        mbr: Option<usize>,
        /// Trajectory CSV of the first source's first target row.
        #[arg(long)]
        record_trajectory: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sampled outputs against references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output JSONL of `sample`.
        #[arg(long)]
        input: PathBuf,
        /// JSONL with a "trg" field per line.
        #[arg(long)]
        references: PathBuf,
        /// Sweep MBR over the first 1..=N candidates.
        #[arg(long)]
        mbr: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quartile losses, timing, straightness and gradient-norm reports.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned flow checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Diffusion checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Training logs to summarize (repeatable).
        #[arg(long)]
        log: Vec<PathBuf>,
        /// Output directory for the CSVs.
        #[arg(long)]
        out: PathBuf,
    },
}

/// One line of `sample` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub src: String,
    pub trg: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct SourceOnly {
    src: String,
}

#[derive(Debug, Deserialize)]
struct TargetOnly {
    trg: String,
}

/// Sizes the global worker pool from `FLOWLAB_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(c.seed)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

pub fn cmd_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let c = &cfg.corpus;
    let records = match &c.source {
        Some(p) => load_jsonl(p)?,
        None => gen_task(
            c.task,
            c.n,
            (c.min_len, c.max_len),
            c.vocab_size,
            cfg.model.max_len,
            derive_seed(cfg.seed, "corpus"),
        )?,
    };
    let (train, valid, test) = split(&records, c.split, derive_seed(cfg.seed, "split"))?;
    fs::create_dir_all(out)?;
    for (name, part) in SPLITS.iter().zip([&train, &valid, &test]) {
        write_jsonl(&split_path(out, name), part)?;
    }
    build_vocab(&records, c.granularity).save(&out.join("vocab.txt"))?;
    println!(
        "wrote {} train, {} valid, {} test pairs to {}",
        train.len(),
        valid.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

/// Corpus splits, vocabulary and slot counts fitting every split.
pub struct Dataset {
    pub vocab: Vocab,
    pub splits: [Vec<PairRecord>; 3],
    pub src_len: usize,
    pub tgt_len: usize,
}

impl Dataset {
    pub fn load(dir: &Path, gran: Granularity) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let splits = SPLITS.map(|n| load_jsonl(&split_path(dir, n)));
        let [a, b, c] = splits;
        let splits = [a?, b?, c?];
        let all = || splits.iter().flatten();
        let longest = |f: fn(&PairRecord) -> &str| all().map(|r| gran.split(f(r)).len()).max().unwrap_or(0);
        let src_len = longest(|r| &r.src) + 1;
        let tgt_len = longest(|r| &r.trg) + 1;
        Ok(Self {
            vocab,
            splits,
            src_len,
            tgt_len,
        })
    }

    pub fn encoded(&self, split: usize, gran: Granularity) -> Result<Vec<Example>> {
        encode_pairs(&self.splits[split], &self.vocab, gran, self.src_len, self.tgt_len)
    }
}

fn log_writer(log: Option<&Path>, out: &Path) -> Result<BufWriter<fs::File>> {
    let path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, steps: Option<u64>, log: Option<&Path>, out: &Path) -> Result<()> {
    let gran = cfg.corpus.granularity;
    let ds = Dataset::load(data, gran)?;
    let train = ds.encoded(0, gran)?;
    let mcfg = cfg.model.model_config(ds.vocab.len(), ds.src_len, ds.tgt_len);
    if mcfg.seq_len() > mcfg.max_len {
        return Err(Error::Config(format!(
            "sequences need {} slots, model max_len is {}",
            mcfg.seq_len(),
            mcfg.max_len
        )));
    }
    let model = Model::init(mcfg, PredTarget::Z0, derive_seed(cfg.seed, "init"))?;
    let mut tcfg = cfg.pretrain.clone();
    if steps.is_some() {
        tcfg.max_steps = steps;
    }
    let total = tcfg.total_steps(train.len());
    let sched = NoiseSchedule::sqrt(tcfg.diffusion_steps)?;
    let mut trainer = Trainer::new(model, tcfg)?;
    let mut w = log_writer(log, out)?;
    let reports = run_steps(&mut trainer, &train, total, &mut w, |t, b| t.pretrain_diffusion_step(b, &sched))?;
    w.flush()?;
    save_trainer(trainer, cfg, gran, &ds.vocab, out)?;
    report_done("pretrain", &reports, out);
    Ok(())
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    data: &Path,
    teacher: &Path,
    steps: Option<u64>,
    log: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let gran = cfg.corpus.granularity;
    let ds = Dataset::load(data, gran)?;
    let teacher = Checkpoint::load(teacher, Some(&ds.vocab))?;
    let tm = teacher.ema;
    if tm.pred_target != PredTarget::Z0 {
        return Err(Error::PredTargetMismatch {
            expected: PredTarget::Z0,
            found: tm.pred_target,
        });
    }
    let train = encode_pairs(&ds.splits[0], &ds.vocab, gran, tm.config.src_len, tm.config.tgt_len)?;
    let mut tcfg = cfg.finetune.clone();
    if steps.is_some() {
        tcfg.max_steps = steps;
    }
    let total = tcfg.total_steps(train.len());
    let grid = FlowTimeGrid::new(tcfg.flow_steps, tm.config.rescale_max)?;
    let student = student_from_teacher(&tm, tcfg.pred_target);
    let mut trainer = Trainer::new(student, tcfg)?;
    let mut w = log_writer(log, out)?;
    let reports = run_steps(&mut trainer, &train, total, &mut w, |t, b| t.flow_finetune_step(b, &tm, &grid))?;
    w.flush()?;
    save_trainer(trainer, cfg, gran, &ds.vocab, out)?;
    report_done("finetune", &reports, out);
    Ok(())
}

fn save_trainer(t: Trainer, cfg: &RunConfig, gran: Granularity, vocab: &Vocab, out: &Path) -> Result<()> {
    Checkpoint {
        model: t.model,
        ema: t.ema,
        granularity: gran,
        vocab_hash: vocab.hash(),
        train_step: t.step,
        seed: cfg.seed,
    }
    .save(out)
}

fn report_done(stage: &str, reports: &[crate::train::StepReport], out: &Path) {
    match reports.last() {
        Some(r) => println!(
            "{stage}: {} steps, final loss {:.4e}, saved {}",
            r.step,
            r.loss.total,
            out.display()
        ),
        None => println!("{stage}: 0 steps, saved {}", out.display()),
    }
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub vocab: &'a Path,
    pub input: &'a Path,
    pub sampler: Option<SamplerKind>,
    pub steps: Option<usize>,
    pub mbr: Option<usize>,
    pub record_trajectory: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn cmd_sample(cfg: &RunConfig, a: &SampleArgs) -> Result<()> {
    let vocab = Vocab::load(a.vocab)?;
    let ck = Checkpoint::load(a.checkpoint, Some(&vocab))?;
    let gran = ck.granularity;
    let model = &ck.ema;
    let kind = a.sampler.unwrap_or(cfg.sampler.kind);
    let sched = NoiseSchedule::sqrt(cfg.pretrain.diffusion_steps)?;
    let steps = match (a.steps, kind) {
        (Some(s), _) => s,
        (None, SamplerKind::Diffusion) => sched.steps(),
        (None, _) => cfg.sampler.steps,
    };
    let mbr = a.mbr.unwrap_or(cfg.sampler.mbr);
    if mbr == 0 {
        return Err(invalid("--mbr must be at least 1"));
    }
    let opts = SamplerOptions {
        rescale_max: model.config.rescale_max,
        sched: Some(&sched),
        clamp: cfg.sampler.clamp,
    };
    let inputs: Vec<SourceOnly> = read_lines(a.input)?;
    let sources = inputs
        .iter()
        .map(|r| encode_source(&vocab, gran, &r.src, model.config.src_len))
        .collect::<Result<Vec<_>>>()?;
    let seed = derive_seed(cfg.seed, "sample");
    let pools = generate_pools(
        model,
        &model.table,
        &opts,
        &sources,
        model.config.tgt_len,
        kind,
        steps,
        mbr,
        seed,
        cfg.sampler.batch,
    )?;
    let mut records = Vec::with_capacity(inputs.len());
    for (inp, pool) in inputs.iter().zip(&pools) {
        let chosen = mbr_select(pool)?;
        records.push(SampleRecord {
            src: inp.src.clone(),
            trg: vocab.decode(&pool[chosen], gran),
            candidates: if mbr > 1 {
                pool.iter().map(|c| vocab.decode(c, gran)).collect()
            } else {
                Vec::new()
            },
        });
    }
    write_jsonl(a.out, &records)?;
    if let (Some(path), Some(src)) = (a.record_trajectory, sources.first()) {
        let req = SampleRequest {
            src: src.clone(),
            tgt_len: model.config.tgt_len,
            steps,
            kind,
            record_trajectory: true,
            seed: candidate_seed(seed, 0, 0),
        };
        let out = sample_batch(model, &model.table, &opts, &[req])?.remove(0);
        let traj = out.trajectory.expect("trajectory requested");
        fs::write(path, traj.to_csv(0)?)?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".json");
        fs::write(PathBuf::from(meta), serde_json::to_string_pretty(&traj.metadata(0))?)?;
        debug_assert_eq!(strip_output(&out.ids), pools[0][0]);
    }
    println!(
        "sampled {} sources with {} N={} (mbr {mbr}) into {}",
        records.len(),
        kind.name(),
        steps,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, input: &Path, references: &Path, mbr: Option<usize>, out: &Path) -> Result<()> {
    let gran = cfg.corpus.granularity;
    let outputs: Vec<SampleRecord> = read_lines(input)?;
    let refs: Vec<TargetOnly> = read_lines(references)?;
    let refs: Vec<Vec<String>> = refs.iter().map(|r| gran.split(&r.trg)).collect();
    let n = mbr.unwrap_or(1);
    let reports = if n <= 1 {
        let hyps: Vec<Vec<String>> = outputs.iter().map(|o| gran.split(&o.trg)).collect();
        vec![score(&hyps, &refs, 1)?]
    } else {
        let pools: Vec<Vec<Vec<String>>> = outputs
            .iter()
            .map(|o| o.candidates.iter().map(|c| gran.split(c)).collect())
            .collect();
        mbr_sweep_pools(&pools, &refs, n)?
    };
    let csv = reports_csv(&reports);
    fs::write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub struct DiagnoseArgs<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub teacher: &'a Path,
    pub logs: &'a [PathBuf],
    pub out: &'a Path,
}

/// Prompts used for the straightness report.
pub const STRAIGHTNESS_PROMPTS: usize = 50;
pub const TIMING_REPEATS: usize = 3;

pub fn cmd_diagnose(cfg: &RunConfig, a: &DiagnoseArgs) -> Result<DiagnosticsBundle> {
    let gran = cfg.corpus.granularity;
    let ds = Dataset::load(a.data, gran)?;
    let flow = Checkpoint::load(a.checkpoint, Some(&ds.vocab))?;
    let diff = Checkpoint::load(a.teacher, Some(&ds.vocab))?;
    let mc = &flow.ema.config;
    let sched = NoiseSchedule::sqrt(cfg.pretrain.diffusion_steps)?;
    let grid = FlowTimeGrid::new(cfg.finetune.flow_steps, mc.rescale_max)?;

    let train = encode_pairs(&ds.splits[0], &ds.vocab, gran, mc.src_len, mc.tgt_len)?;
    let probe = ProbeSet::new(
        train.into_iter().take(cfg.probe_size).collect(),
        derive_seed(cfg.seed, "probe"),
    );
    let (qd, qf) = quartile_report(&diff, &flow, &sched, &grid, &probe)?;

    let test = encode_pairs(&ds.splits[2], &ds.vocab, gran, mc.src_len, mc.tgt_len)?;
    let sources: Vec<Vec<usize>> = test.iter().take(STRAIGHTNESS_PROMPTS).map(|e| e.src.clone()).collect();
    if sources.is_empty() {
        return Err(invalid("test split is empty"));
    }
    let opts = SamplerOptions {
        rescale_max: mc.rescale_max,
        sched: Some(&sched),
        clamp: cfg.sampler.clamp,
    };
    let seed = derive_seed(cfg.seed, "straightness");
    let flow_kind = match flow.ema.pred_target {
        PredTarget::Z0 => SamplerKind::FlowAvg,
        PredTarget::Velocity => SamplerKind::FlowInstant,
    };
    let sf = straightness_per_prompt(&flow.ema, &flow.ema.table, &opts, &sources, mc.tgt_len, flow_kind, grid.steps, seed)?;
    let sd = straightness_per_prompt(
        &diff.ema,
        &diff.ema.table,
        &opts,
        &sources,
        mc.tgt_len,
        SamplerKind::Diffusion,
        sched.steps(),
        seed,
    )?;
    let straighter = sf.iter().zip(&sd).filter(|(f, d)| f > d).count() as f64 / sf.len() as f64;

    let batch = cfg.sampler.batch;
    let geometry = (mc.src_len, mc.tgt_len);
    let mut timing = Vec::new();
    for n in [1, 5] {
        timing.push(TimingRow {
            sampler: flow_kind,
            steps: n,
            seconds_per_sample: time_sampler(&flow.ema, &flow.ema.table, &opts, flow_kind, n, batch, geometry, TIMING_REPEATS)?,
        });
    }
    timing.push(TimingRow {
        sampler: SamplerKind::Diffusion,
        steps: sched.steps(),
        seconds_per_sample: time_sampler(
            &diff.ema,
            &diff.ema.table,
            &opts,
            SamplerKind::Diffusion,
            sched.steps(),
            batch,
            geometry,
            TIMING_REPEATS,
        )?,
    });

    let mut grad_norms = Vec::new();
    for p in a.logs {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let text = fs::read_to_string(p)?;
        let (_, s) = grad_norm_trace(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: p.display().to_string(),
                line,
                msg,
            },
            e => e,
        })?;
        grad_norms.push((name, s));
    }

    let bundle = DiagnosticsBundle {
        quartiles_diffusion: qd,
        quartiles_flow: qf,
        grad_norms,
        timing,
        straightness_flow: StraightnessStats::of(&sf)?,
        straightness_diffusion: StraightnessStats::of(&sd)?,
        straighter_fraction: straighter,
    };
    fs::create_dir_all(a.out)?;
    fs::write(a.out.join("quartiles.csv"), quartile_csv(&qd, &qf))?;
    fs::write(a.out.join("timing.csv"), bundle.timing_csv())?;
    fs::write(a.out.join("straightness.csv"), bundle.straightness_csv())?;
    fs::write(a.out.join("grad_norms.csv"), bundle.grad_norm_csv())?;
    print!("{}", bundle.summary());
    Ok(bundle)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus { common, out } => cmd_corpus(&load_config(&common)?, &out),
        Command::Pretrain {
            common,
            data,
            steps,
            log,
            out,
        } => cmd_pretrain(&load_config(&common)?, &data, steps, log.as_deref(), &out),
        Command::Finetune {
            common,
            data,
            teacher,
            steps,
            log,
            out,
        } => cmd_finetune(&load_config(&common)?, &data, &teacher, steps, log.as_deref(), &out),
        Command::Sample {
            common,
            checkpoint,
            vocab,
            input,
            sampler,
            steps,
            mbr,
            record_trajectory,
            out,
        } => cmd_sample(
            &load_config(&common)?,
            &SampleArgs {
                checkpoint: &checkpoint,
                vocab: &vocab,
                input: &input,
                sampler,
                steps,
                mbr,
                record_trajectory: record_trajectory.as_deref(),
                out: &out,
            },
        ),
        Command::Eval {
            common,
            input,
            references,
            mbr,
            out,
        } => cmd_eval(&load_config(&common)?, &input, &references, mbr, &out),
        Command::Diagnose {
            common,
            data,
            checkpoint,
            teacher,
            log,
            out,
        } => cmd_diagnose(
            &load_config(&common)?,
            &DiagnoseArgs {
                data: &data,
                checkpoint: &checkpoint,
                teacher: &teacher,
                logs: &log,
                out: &out,
            },
        )
        .map(|_| ()),
    }
}
