//! Synthetic seq2seq tasks, JSONL ingestion, splitting, and fixed-geometry
//! encoding of pairs into id rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::textspace::{Granularity, Vocab, EOS, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub src: String,
    pub trg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Simplify,
    Paraphrase,
}

/// Content token `i` of a synthetic vocabulary.
pub fn task_token(i: usize) -> String {
    format!("w{i}")
}

/// Target for a source token list under `kind`. `bijection` is only used by
/// PARAPHRASE.
fn transform(kind: TaskKind, src: &[usize], bijection: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Simplify => src.iter().step_by(2).copied().collect(),
        TaskKind::Paraphrase => src.iter().map(|&t| bijection[t]).collect(),
    }
}

/// The fixed token permutation PARAPHRASE uses for a given seed.
pub fn paraphrase_bijection(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Applies a task rule to an existing source string of `w<i>` tokens.
pub fn apply_task(kind: TaskKind, src: &str, vocab_size: usize, seed: u64) -> Result<String> {
    let ids = src
        .split_whitespace()
        .map(|t| {
            t.strip_prefix('w')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n < vocab_size)
                .ok_or_else(|| invalid(format!("token {t:?} is not a task token")))
        })
        .collect::<Result<Vec<_>>>()?;
    let bij = paraphrase_bijection(vocab_size, seed);
    Ok(join(&transform(kind, &ids, &bij)))
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|&i| task_token(i)).collect::<Vec<_>>().join(" ")
}

/// `n` pairs with source lengths drawn uniformly from `len_range`
/// (inclusive) over `vocab_size` content tokens. `max_len` is the model's
/// sequence budget; each side must leave room for a separator.
pub fn gen_task(
    kind: TaskKind,
    n: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    let (lo, hi) = len_range;
    if n == 0 {
        return Err(invalid("gen_task: n must be at least 1"));
    }
    if lo == 0 || lo > hi || hi + 1 > max_len {
        return Err(invalid(format!(
            "infeasible length range {lo}..={hi} for max_len {max_len}"
        )));
    }
    if vocab_size == 0 {
        return Err(invalid("gen_task: vocab_size must be positive"));
    }
    let bij = paraphrase_bijection(vocab_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
            let trg = transform(kind, &src, &bij);
            PairRecord {
                src: join(&src),
                trg: join(&trg),
            }
        })
        .collect())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub type Splits = (Vec<PairRecord>, Vec<PairRecord>, Vec<PairRecord>);

/// Seeded shuffle then contiguous train/valid/test slices.
pub fn split(records: &[PairRecord], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(invalid(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| records[i].clone()).collect();
    Ok((
        take(0..n_train),
        take(n_train..n_train + n_valid),
        take(n_train + n_valid..n),
    ))
}

/// Vocabulary covering every token of the records.
pub fn build_vocab(records: &[PairRecord], gran: Granularity) -> Vocab {
    Vocab::from_texts(
        records.iter().flat_map(|r| [r.src.as_str(), r.trg.as_str()]),
        gran,
    )
}

/// A pair laid out in fixed geometry: the source is left-padded and ends in
/// SEP (`src_len` slots); the target is followed by EOS and right-padded
/// (`tgt_len` slots).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_source(vocab: &Vocab, gran: Granularity, text: &str, src_len: usize) -> Result<Vec<usize>> {
    let ids = vocab.encode(text, gran);
    if ids.is_empty() || ids.len() + 1 > src_len {
        return Err(invalid(format!(
            "source of {} tokens does not fit {src_len} slots",
            ids.len()
        )));
    }
    let mut out = vec![PAD; src_len - ids.len() - 1];
    out.extend(ids);
    out.push(SEP);
    Ok(out)
}

pub fn encode_target(vocab: &Vocab, gran: Granularity, text: &str, tgt_len: usize) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text, gran);
    if ids.is_empty() || ids.len() + 1 > tgt_len {
        return Err(invalid(format!(
            "target of {} tokens does not fit {tgt_len} slots",
            ids.len()
        )));
    }
    ids.push(EOS);
    ids.resize(tgt_len, PAD);
    Ok(ids)
}

pub fn encode_pairs(
    records: &[PairRecord],
    vocab: &Vocab,
    gran: Granularity,
    src_len: usize,
    tgt_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                src: encode_source(vocab, gran, &r.src, src_len)?,
                tgt: encode_target(vocab, gran, &r.trg, tgt_len)?,
            })
        })
        .collect()
}
