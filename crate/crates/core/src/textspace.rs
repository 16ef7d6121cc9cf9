//! Token vocabulary, the trainable embedding table and its tied decoding head.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::numcore::{Graph, Real, Tensor, TensorError, Var};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<sep>", "</s>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Word,
    Char,
}

impl Granularity {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Granularity::Word => text.split_whitespace().map(str::to_owned).collect(),
            Granularity::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    fn join(self, tokens: &[&str]) -> String {
        match self {
            Granularity::Word => tokens.join(" "),
            Granularity::Char => tokens.concat(),
        }
    }
}

/// Dense id assignment with the four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `content` in first-seen order, duplicates dropped.
    pub fn new<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.insert(s.to_owned());
        }
        for tok in content {
            vocab.insert(tok.into());
        }
        vocab
    }

    /// Collects every token of `texts` under `granularity`, sorted for a
    /// deterministic id assignment.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, granularity: Granularity) -> Self {
        let mut seen: Vec<String> = texts
            .into_iter()
            .flat_map(|t| granularity.split(t))
            .collect();
        seen.sort_by_key(|a| natural_key(a));
        seen.dedup();
        Self::new(seen)
    }

    fn insert(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str, granularity: Granularity) -> Vec<usize> {
        granularity.split(text).iter().map(|t| self.id(t)).collect()
    }

    /// Renders ids up to the first EOS or PAD, skipping SEP.
    pub fn decode(&self, ids: &[usize], granularity: Granularity) -> String {
        let toks: Vec<&str> = strip_output(ids)
            .into_iter()
            .map(|id| self.token(id).unwrap_or(SPECIALS[UNK]))
            .collect();
        granularity.join(&toks)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the serialized vocabulary file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// One token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.strip_suffix('\n').unwrap_or(&text).split('\n').collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(s) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected reserved token {s}"),
                });
            }
        }
        let vocab = Vocab::new(lines[SPECIALS.len()..].iter().copied());
        if vocab.len() != lines.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}

fn natural_key(s: &str) -> (String, u64, String) {
    let digits_at = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
    let (head, rest) = s.split_at(digits_at);
    let num_end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let num = rest[..num_end].parse().unwrap_or(0);
    (head.to_owned(), num, rest[num_end..].to_owned())
}

/// Generated ids up to the first EOS or PAD, with SEP removed.
pub fn strip_output(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .take_while(|&id| id != EOS && id != PAD)
        .filter(|&id| id != SEP)
        .collect()
}

/// `V x d` embedding matrix. Decoding is tied: `logits = z · Eᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weight: Tensor,
}

impl EmbeddingTable {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(invalid(format!(
                "embedding table must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight })
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f32, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[vocab, dim], std, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        let d = self.dim();
        &self.weight.data()[id * d..(id + 1) * d]
    }

    /// `[tokens.len(), d]`, row i = `E[tokens[i]]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        let v = self.vocab_size();
        let d = self.dim();
        if tokens.is_empty() {
            return Err(invalid("cannot embed an empty sequence"));
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "embed",
                    index: id,
                    bound: v,
                }
                .into());
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Tensor::new(vec![tokens.len(), d], data)?)
    }

    /// Per-row argmax of the tied logits `z·E[v]`; ties go to the smaller id.
    /// Accepts any tensor whose last axis is `d`.
    pub fn round_tokens(&self, z: &Tensor) -> Result<Vec<usize>> {
        let d = self.dim();
        if *z.shape().last().unwrap() != d {
            return Err(TensorError::ShapeMismatch {
                op: "round_tokens",
                left: z.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            }
            .into());
        }
        Ok(z.data()
            .chunks(d)
            .map(|row| {
                let mut best = (0usize, f32::NEG_INFINITY);
                for v in 0..self.vocab_size() {
                    let score: f32 = row.iter().zip(self.row(v)).map(|(a, b)| a * b).sum();
                    if score > best.1 {
                        best = (v, score);
                    }
                }
                best.0
            })
            .collect())
    }

    /// Snaps every row of `z` onto the embedding of its rounded token.
    pub fn clamp(&self, z: &Tensor) -> Result<Tensor> {
        let ids = self.round_tokens(z)?;
        let d = self.dim();
        let mut out = z.clone();
        for (row, id) in out.data_mut().chunks_mut(d).zip(ids) {
            row.copy_from_slice(self.row(id));
        }
        Ok(out)
    }
}

/// Mean cross-entropy of `softmax(z0 · Eᵀ)` against `tokens`, recorded on `g`.
/// `z0` is `[n, d]` (or any shape flattening to that), `table` is `[V, d]`.
pub fn ce_anchor_loss<T: Real>(g: &mut Graph<T>, z0: Var, table: Var, tokens: &[usize]) -> Result<Var> {
    let d = g.shape(table)[1];
    let n = g.value(z0).numel() / d;
    if n != tokens.len() {
        return Err(invalid(format!(
            "ce_anchor_loss: {n} latent rows but {} tokens",
            tokens.len()
        )));
    }
    let rows = g.reshape(z0, &[n, d])?;
    let et = g.permute(table, &[1, 0])?;
    let logits = g.matmul(rows, et)?;
    Ok(g.cross_entropy(logits, tokens)?)
}

pub fn ce_anchor_loss_value(z0: &Tensor, table: &EmbeddingTable, tokens: &[usize]) -> Result<f32> {
    let mut g = Graph::new();
    let z = g.constant(z0.clone())?;
    let e = g.constant(table.weight.clone())?;
    let l = ce_anchor_loss(&mut g, z, e, tokens)?;
    Ok(g.value(l).item()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormal(v: usize) -> EmbeddingTable {
        EmbeddingTable::new(Tensor::from_fn(&[v, v], |i| if i / v == i % v { 1.0 } else { 0.0 }))
            .unwrap()
    }

    #[test]
    fn vocab_specials_and_round_trip() {
        let v = Vocab::new(["a", "b", "c"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("zzz"), UNK);
        for tok in ["a", "b", "c"] {
            assert_eq!(v.token(v.id(tok)), Some(tok));
        }
        let ids = v.encode("a c b", Granularity::Word);
        assert_eq!(v.decode(&ids, Granularity::Word), "a c b");
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocab::new(["a", "b"]);
        let ids = [v.id("a"), SEP, v.id("b"), EOS, v.id("a"), PAD];
        assert_eq!(v.decode(&ids, Granularity::Word), "a b");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_texts(["t10 t2 t1", "t3"], Granularity::Word);
        assert_eq!(&v.tokens()[4..], &["t1", "t2", "t3", "t10"]);
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn embed_zero_row_and_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut table = EmbeddingTable::random(6, 4, 1.0, &mut rng);
        table.weight.data_mut()[..4].fill(0.0);
        let z = table.embed(&[0, 2, 2]).unwrap();
        assert_eq!(&z.data()[..4], &[0.0; 4]);
        assert_eq!(&z.data()[4..8], &z.data()[8..12]);
        assert!(table.embed(&[6]).is_err());
    }

    #[test]
    fn round_tokens_rules() {
        let table = orthonormal(5);
        let z = table.embed(&[3]).unwrap();
        assert_eq!(table.round_tokens(&z).unwrap(), vec![3]);
        let scaled = Tensor::from_fn(&[1, 5], |i| 2.0 * z.data()[i]);
        assert_eq!(table.round_tokens(&scaled).unwrap(), vec![3]);
        assert_eq!(table.round_tokens(&Tensor::zeros(&[1, 5])).unwrap(), vec![0]);
        assert!(table.round_tokens(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn ce_uniform_is_ln_v() {
        let table = orthonormal(4);
        let l = ce_anchor_loss_value(&Tensor::zeros(&[3, 4]), &table, &[0, 1, 2]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_large_margin_is_small() {
        let table = orthonormal(4);
        let ids = [2, 0, 3];
        let z = table.embed(&ids).unwrap();
        let z = Tensor::from_fn(z.shape(), |i| 10.0 * z.data()[i]);
        // direct softmax: each row puts e^10 on the target and e^0 on 3 others
        let expect = (1.0f64 + 3.0 * (-10.0f64).exp()).ln() as f32;
        let l = ce_anchor_loss_value(&z, &table, &ids).unwrap();
        assert!((l - expect).abs() < 1e-6);
        assert!(l < 0.01 && l > 0.0);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = EmbeddingTable::random(6, 3, 1.0, &mut rng);
        let z = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let ids = [1, 5, 0, 2];
        let e: Tensor<f64> = table.weight.cast();
        let err_z = grad_check(
            |g, z| {
                let e = g.constant(e.clone())?;
                ce_anchor_loss(g, z, e, &ids).map_err(|_| TensorError::EmptyGraph)
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err_z < 1e-3, "{err_z}");
        let err_e = grad_check(
            |g, e| {
                let zz = g.constant(z.clone())?;
                ce_anchor_loss(g, zz, e, &ids).map_err(|_| TensorError::EmptyGraph)
            },
            &e,
            1e-5,
        )
        .unwrap();
        assert!(err_e < 1e-3, "{err_e}");
    }

    #[test]
    fn clamp_snaps_to_rows() {
        let table = orthonormal(3);
        let z = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.2, 0.7, 0.0, 0.1]).unwrap();
        let c = table.clamp(&z).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
