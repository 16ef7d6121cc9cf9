//! Sentence-level text metrics, minimum-Bayes-risk selection, and the
//! candidate-pool sweep over MBR sizes.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::sample::{sample_batch, SampleRequest, SamplerKind, SamplerOptions};
use crate::textspace::{strip_output, EmbeddingTable};

fn ngram_counts<T: Eq + Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4: geometric mean of clipped n-gram precisions, where a
/// zero match count for n ≥ 2 becomes `1/(c_n + 1)`, times the brevity
/// penalty `exp(1 − |ref|/|hyp|)` for short hypotheses.
pub fn bleu<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(invalid("bleu needs non-empty hypothesis and reference"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let total = hyp.len().saturating_sub(n - 1);
        let matched: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 of LCS precision and recall.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(invalid("rouge_l needs non-empty hypothesis and reference"));
    }
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean over sequences of unique/total unigrams. Empty sequences score 0.
pub fn dist1<T: Eq + Hash>(hyps: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(invalid("dist1 needs at least one sequence"));
    }
    let sum: f64 = hyps
        .iter()
        .map(|h| {
            if h.is_empty() {
                0.0
            } else {
                h.iter().collect::<HashSet<_>>().len() as f64 / h.len() as f64
            }
        })
        .sum();
    Ok(sum / hyps.len() as f64)
}

/// BLEU that scores an empty hypothesis as 0 instead of failing.
fn bleu_lenient<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        0.0
    } else {
        bleu(hyp, reference).unwrap_or(0.0)
    }
}

/// Index of the candidate with the largest summed BLEU against the others;
/// ties go to the lowest index.
pub fn mbr_select<T: Eq + Hash + Clone>(candidates: &[Vec<T>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(invalid("mbr_select needs at least one candidate"));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let mut terms: Vec<f64> = candidates
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| bleu_lenient(c, o))
            .collect();
        // summing in sorted order gives duplicates bit-identical utilities
        terms.sort_by(|a, b| a.total_cmp(b));
        let u: f64 = terms.iter().sum();
        if u > best.1 {
            best = (i, u);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mbr_n: usize,
    pub bleu: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mbr_n,bleu,rouge_l,dist1,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{}",
            self.mbr_n, self.bleu, self.rouge_l, self.dist1, self.n_samples
        )
    }
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Averages sentence metrics of `hyps` against `refs`. Empty hypotheses
/// score 0 on every metric.
pub fn score<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], mbr_n: usize) -> Result<MetricReport> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let n = hyps.len() as f64;
    let mut b = 0.0;
    let mut r = 0.0;
    for (h, rf) in hyps.iter().zip(refs) {
        b += bleu_lenient(h, rf);
        if !h.is_empty() && !rf.is_empty() {
            r += rouge_l(h, rf)?;
        }
    }
    Ok(MetricReport {
        mbr_n,
        bleu: b / n,
        rouge_l: r / n,
        dist1: dist1(hyps)?,
        n_samples: hyps.len(),
    })
}

/// For each `n` in `1..=n_max`, MBR-selects among the first `n` candidates of
/// every pool and scores the selections.
pub fn mbr_sweep_pools<T: Eq + Hash + Clone>(
    pools: &[Vec<Vec<T>>],
    refs: &[Vec<T>],
    n_max: usize,
) -> Result<Vec<MetricReport>> {
    if n_max == 0 {
        return Err(invalid("n_max must be at least 1"));
    }
    if pools.iter().any(|p| p.len() < n_max) {
        return Err(invalid(format!("every pool needs {n_max} candidates")));
    }
    (1..=n_max)
        .map(|n| {
            let chosen = pools
                .iter()
                .map(|p| Ok(p[mbr_select(&p[..n])?].clone()))
                .collect::<Result<Vec<_>>>()?;
            score(&chosen, refs, n)
        })
        .collect()
}

/// Seed for candidate `j` of item `i`.
pub fn candidate_seed(base: u64, item: usize, j: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((item as u64) << 16)
        .wrapping_add(j as u64)
}

/// Draws `n_max` candidates (distinct seeds) per source and returns them
/// stripped at EOS.
pub fn generate_pools<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    sources: &[Vec<usize>],
    tgt_len: usize,
    kind: SamplerKind,
    steps: usize,
    n_max: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut pools = vec![Vec::with_capacity(n_max); sources.len()];
    let reqs: Vec<(usize, SampleRequest)> = sources
        .iter()
        .enumerate()
        .flat_map(|(i, src)| {
            (0..n_max).map(move |j| {
                (
                    i,
                    SampleRequest {
                        src: src.clone(),
                        tgt_len,
                        steps,
                        kind,
                        record_trajectory: false,
                        seed: candidate_seed(seed, i, j),
                    },
                )
            })
        })
        .collect();
    for chunk in reqs.chunks(batch.max(1)) {
        let rs: Vec<SampleRequest> = chunk.iter().map(|(_, r)| r.clone()).collect();
        for ((i, _), out) in chunk.iter().zip(sample_batch(den, table, opts, &rs)?) {
            pools[*i].push(strip_output(&out.ids));
        }
    }
    Ok(pools)
}

/// Generates candidate pools then runs the sweep.
pub fn mbr_sweep<D: Denoiser + ?Sized>(
    den: &D,
    table: &EmbeddingTable,
    opts: &SamplerOptions,
    sources: &[Vec<usize>],
    refs: &[Vec<usize>],
    tgt_len: usize,
    kind: SamplerKind,
    steps: usize,
    n_max: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let pools = generate_pools(den, table, opts, sources, tgt_len, kind, steps, n_max, seed, 64)?;
    mbr_sweep_pools(&pools, refs, n_max)
}
