//! Corpus ingestion, vocabulary, the embedding pipeline, synthetic
//! toy-corpus generation, and BLEU evaluation.

mod bleu;
mod markov;

pub use bleu::{self_bleu, self_bleu_tokens, test_bleu, test_bleu_tokens};
pub use markov::{bigram_tv, MarkovChain};

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::{NodeId, Tape};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: usize = 4;
const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token table with four reserved ids (0=PAD, 1=UNK, 2=BOS, 3=EOS).
#[derive(Clone, Debug)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from lines: whitespace-tokenized and lowercased, tokens
    /// under `min_count` dropped to UNK, most-frequent-first ordering
    /// with lexicographic tie-breaks, capped at `cap` total entries
    /// (reserved ids included).
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        cap: usize,
    ) -> Result<Vocab> {
        if min_count < 1 {
            return Err(Error::Param("min_count must be >= 1".into()));
        }
        if cap <= RESERVED {
            return Err(Error::Param(format!(
                "vocab cap must exceed the {RESERVED} reserved ids"
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_any = false;
        for line in lines {
            saw_any = true;
            for tok in line.split_whitespace() {
                *counts.entry(tok.to_lowercase()).or_default() += 1;
            }
        }
        if !saw_any {
            return Err(Error::Input("empty corpus stream".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        // Most frequent first; lexicographic order settles equal counts.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap - RESERVED);

        let mut vocab = Vocab::empty();
        for (tok, _) in ranked {
            let id = vocab.id_to_token.len() as u32;
            vocab.token_to_id.insert(tok.clone(), id);
            vocab.id_to_token.push(tok);
        }
        Ok(vocab)
    }

    /// A vocabulary holding exactly the given tokens in the given order.
    pub fn from_tokens(tokens: &[String]) -> Result<Vocab> {
        let mut vocab = Vocab::empty();
        for tok in tokens {
            let id = vocab.id_to_token.len() as u32;
            if vocab.token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Input(format!("duplicate vocab token {tok:?}")));
            }
            vocab.id_to_token.push(tok.clone());
        }
        Ok(vocab)
    }

    fn empty() -> Vocab {
        Vocab {
            token_to_id: BTreeMap::new(),
            id_to_token: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Fixed-length encoding: lowercase, truncate at `max_len`, pad
    /// right. No BOS is stored; the generator supplies its own.
    pub fn encode(&self, sentence: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len < 2 {
            return Err(Error::Param("max_len must be >= 2".into()));
        }
        let mut ids: Vec<u32> = sentence
            .split_whitespace()
            .take(max_len)
            .map(|t| self.id(&t.to_lowercase()))
            .collect();
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Decode ids to text, stopping at the first EOS or PAD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            if id == PAD || id == EOS {
                break;
            }
            out.push(self.token(id));
        }
        out.join(" ")
    }

    /// One non-reserved token per line, line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for tok in &self.id_to_token[RESERVED..] {
            text.push_str(tok);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_tokens(&tokens)
    }
}

/// Which side of the split a corpus came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Fixed-length, right-padded id sequences.
#[derive(Clone, Debug)]
pub struct Corpus {
    sequences: Vec<Vec<u32>>,
    max_len: usize,
    source: String,
    split: Split,
}

impl Corpus {
    pub fn new(
        sequences: Vec<Vec<u32>>,
        max_len: usize,
        vocab_size: usize,
        source: &str,
        split: Split,
    ) -> Result<Corpus> {
        if sequences.is_empty() {
            return Err(Error::Input(format!("empty corpus from {source}")));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() != max_len {
                return Err(Error::Dim(format!(
                    "sequence {i} has length {}, expected {max_len}",
                    seq.len()
                )));
            }
            if seq.iter().all(|&id| id == PAD) {
                return Err(Error::Input(format!("sequence {i} is all padding")));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::Input(format!(
                    "sequence {i} holds id {bad} >= vocab size {vocab_size}"
                )));
            }
        }
        Ok(Corpus {
            sequences,
            max_len,
            source: source.to_string(),
            split,
        })
    }

    /// Load a one-sentence-per-line UTF-8 file; blank lines are skipped.
    pub fn load_lines(path: &Path, vocab: &Vocab, max_len: usize, split: Split) -> Result<Corpus> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut sequences = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            sequences.push(vocab.encode(line, max_len)?);
        }
        Corpus::new(
            sequences,
            max_len,
            vocab.size(),
            &path.display().to_string(),
            split,
        )
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.sequences[i]
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Sequences with PAD/BOS/EOS stripped, the shape BLEU consumes.
    pub fn content_tokens(&self) -> Vec<Vec<u32>> {
        self.sequences
            .iter()
            .map(|s| {
                s.iter()
                    .copied()
                    .filter(|&id| id != PAD && id != BOS && id != EOS)
                    .collect()
            })
            .collect()
    }
}

/// Embedding lookup on the tape: column `t` of the result is column
/// `ids[t]` of the embedding matrix, so the whole thing stays
/// differentiable with respect to the matrix.
pub fn embed(tape: &mut Tape, embedding: NodeId, ids: &[u32]) -> Result<NodeId> {
    let cols: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
    tape.gather_cols(embedding, &cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{ParamSet, Tensor};

    #[test]
    fn build_vocab_frequency_then_lexicographic() {
        let v = Vocab::build(["a b a"], 1, 100).unwrap();
        assert_eq!(v.size(), RESERVED + 2);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn build_vocab_min_count_threshold() {
        let v = Vocab::build(["a b a"], 2, 100).unwrap();
        assert_eq!(v.size(), RESERVED + 1);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn build_vocab_respects_cap() {
        let lines: Vec<String> = (0..50).map(|i| format!("tok{i:02}")).collect();
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let v = Vocab::build(refs, 1, 10).unwrap();
        assert!(v.size() <= 10);
    }

    #[test]
    fn build_vocab_rejects_empty_stream() {
        let empty: Vec<&str> = Vec::new();
        assert!(matches!(Vocab::build(empty, 1, 10), Err(Error::Input(_))));
    }

    #[test]
    fn build_vocab_deterministic() {
        let lines = ["c b a", "b c", "c"];
        let v1 = Vocab::build(lines, 1, 100).unwrap();
        let v2 = Vocab::build(lines, 1, 100).unwrap();
        assert_eq!(v1.id_to_token, v2.id_to_token);
        // c(3) > b(2) > a(1)
        assert_eq!(v1.id("c"), 4);
        assert_eq!(v1.id("b"), 5);
        assert_eq!(v1.id("a"), 6);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(["the cat sat"], 1, 100).unwrap();
        let ids = v.encode("the cat sat", 6).unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(&ids[3..], &[PAD, PAD, PAD]);
        assert_eq!(v.decode(&ids), "the cat sat");
    }

    #[test]
    fn encode_truncates_and_maps_oov_to_unk() {
        let v = Vocab::build(["a b"], 1, 100).unwrap();
        let ids = v.encode("a b a b a", 3).unwrap();
        assert_eq!(ids.len(), 3);

        let ids = v.encode("x y z", 4).unwrap();
        assert_eq!(&ids[..3], &[UNK, UNK, UNK]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["gamma beta alpha gamma beta gamma"], 1, 100).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.id("gamma"), v.id("gamma"));
        assert_eq!(loaded.size(), v.size());
    }

    #[test]
    fn corpus_rejects_all_pad_and_out_of_range() {
        assert!(Corpus::new(vec![vec![PAD, PAD]], 2, 10, "t", Split::Train).is_err());
        assert!(Corpus::new(vec![vec![4, 99]], 2, 10, "t", Split::Train).is_err());
        assert!(Corpus::new(vec![], 2, 10, "t", Split::Train).is_err());
    }

    #[test]
    fn embed_selects_columns_and_counts_gradient() {
        let mut params = ParamSet::new();
        let w = Tensor::from_rows(&[vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0, 9.0]])
            .unwrap();
        params.insert("we", w).unwrap();

        let err = crate::ndgrad::grad_check(&params, 1e-5, |tape, leaves| {
            let we = leaves.id("we")?;
            let emb = embed(tape, we, &[4, 4, 0])?;
            tape.sum(emb)
        })
        .unwrap();
        assert!(err < 1e-9);

        // Forward values: id j picks column j; PAD picks column 0.
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0, 9.0]])
            .unwrap();
        let wn = tape.leaf("we", w).unwrap();
        let emb = embed(&mut tape, wn, &[4, PAD]).unwrap();
        assert_eq!(tape.value(emb).data(), &[4.0, 0.0, 9.0, 5.0]);

        // Analytic gradient of a sum equals the occurrence-count matrix.
        let loss = tape.sum(emb).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.get("we").unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert!(embed(&mut tape, w, &[5]).is_err());
    }
}
