//! Conditional-generation loss compositions: style transfer
//! (reconstruction + adversarial feature matching) and unsupervised
//! cipher cracking (feature-space cycle consistency + adversarial
//! feature matching), with built-in toy corpora so the experiments are
//! self-contained.

mod cipher;
mod style;

pub use cipher::{CipherConfig, CipherModel, CipherTrainer};
pub use style::{StyleConfig, StyleModel, StyleTrainer};

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::textdata::MarkovChain;
use crate::train::StepRecord;

/// One periodic evaluation of a conditional task: the task's primary
/// loss (reconstruction NLL or cycle loss), the adversarial term, and
/// its headline score (transfer accuracy or mapping accuracy).
#[derive(Clone, Copy, Debug)]
pub struct CondEvalRecord {
    pub iter: usize,
    pub primary: f64,
    pub adv: f64,
    pub residual: f64,
    pub score: f64,
    pub wall_ms: u64,
}

/// Logged history of a conditional run.
#[derive(Clone, Debug, Default)]
pub struct CondHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<CondEvalRecord>,
}

impl CondHistory {
    pub fn final_score(&self) -> Option<f64> {
        self.evals.last().map(|e| e.score)
    }
}

pub enum CondEvent<'a> {
    Step(&'a StepRecord),
    Eval(&'a CondEvalRecord),
}

/// Without-replacement batch order over one corpus, reshuffled per
/// epoch from counter-derived streams.
pub(crate) struct BatchCycler {
    seed: u64,
    tag: &'static str,
    len: usize,
    batch: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchCycler {
    pub(crate) fn new(seed: u64, tag: &'static str, len: usize, batch: usize) -> Self {
        let mut cycler = BatchCycler {
            seed,
            tag,
            len,
            batch,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        cycler.reshuffle();
        cycler
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut crate::seeds::rng(self.seed, self.tag, self.epoch, 0));
    }

    pub(crate) fn next(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// The two toy "styles": the same token set walked forward or backward
/// around a ring, which a likelihood-ratio classifier separates with
/// near certainty on any non-trivial sentence.
pub fn two_style_chains(states: usize) -> (MarkovChain, MarkovChain) {
    assert!(states >= 4);
    let k = states;
    let names: Vec<String> = (0..k).map(|i| format!("t{i:02}")).collect();
    let start = vec![1.0 / k as f64; k];
    let mut fwd = vec![0.0; k * k];
    let mut bwd = vec![0.0; k * k];
    for i in 0..k {
        fwd[i * k + (i + 1) % k] = 0.7;
        fwd[i * k + (i + 2) % k] = 0.3;
        bwd[i * k + (i + k - 1) % k] = 0.7;
        bwd[i * k + (i + k - 2) % k] = 0.3;
    }
    (
        MarkovChain::new(names.clone(), fwd, start.clone()).unwrap(),
        MarkovChain::new(names, bwd, start).unwrap(),
    )
}

/// Toy plain-text chain for the decipher task: token popularity decays
/// geometrically (so unigram frequencies alone nearly identify the
/// substitution) with a boosted successor edge for bigram structure.
pub fn cipher_chain(states: usize) -> MarkovChain {
    assert!(states >= 4);
    let k = states;
    let names: Vec<String> = (0..k).map(|i| format!("t{i:02}")).collect();
    let mut transitions = vec![0.0; k * k];
    for i in 0..k {
        let mut row = vec![0.0; k];
        for (j, slot) in row.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            let pop = 0.82_f64.powi(j as i32);
            let boost = if j == (i + 1) % k { 3.0 } else { 1.0 };
            *slot = pop * boost;
        }
        let total: f64 = row.iter().sum();
        for (j, &w) in row.iter().enumerate() {
            transitions[i * k + j] = w / total;
        }
    }
    // Start from the popularity profile itself.
    let mut start: Vec<f64> = (0..k).map(|j| 0.82_f64.powi(j as i32)).collect();
    let z: f64 = start.iter().sum();
    for s in &mut start {
        *s /= z;
    }
    MarkovChain::new(names, transitions, start).unwrap()
}

/// A seeded random permutation over `k` content tokens.
pub fn permutation_key(k: usize, seed: u64) -> Vec<usize> {
    let mut key: Vec<usize> = (0..k).collect();
    key.shuffle(&mut crate::seeds::rng(seed, "cipherkey", 0, 0));
    key
}

/// Apply a substitution key to a corpus (content ids only; reserved ids
/// pass through).
pub fn encipher(
    corpus: &crate::textdata::Corpus,
    key: &[usize],
    vocab_size: usize,
) -> Result<crate::textdata::Corpus> {
    let reserved = crate::textdata::RESERVED;
    let sequences: Vec<Vec<u32>> = corpus
        .sequences()
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|&id| {
                    if (id as usize) < reserved {
                        id
                    } else {
                        (key[id as usize - reserved] + reserved) as u32
                    }
                })
                .collect()
        })
        .collect();
    crate::textdata::Corpus::new(
        sequences,
        corpus.max_len(),
        vocab_size,
        &format!("{}+cipher", corpus.source()),
        corpus.split(),
    )
}

/// Sign of the log-likelihood ratio of a token sequence under two
/// chains (transition terms only, probabilities floored so unseen
/// transitions stay finite).
pub fn log_likelihood_ratio(
    seq: &[u32],
    target: &MarkovChain,
    source: &MarkovChain,
    vocab: &crate::textdata::Vocab,
) -> f64 {
    let floor = 1e-9;
    let k = target.num_states();
    let state_of = |id: u32| -> Option<usize> {
        let tok = vocab.token(id);
        target.states().iter().position(|s| s == tok)
    };
    let mut ratio = 0.0;
    for w in seq.windows(2) {
        let (a, b) = (state_of(w[0]), state_of(w[1]));
        let (pt, ps) = match (a, b) {
            (Some(i), Some(j)) if i < k && j < k => {
                (target.transition(i, j).max(floor), source.transition(i, j).max(floor))
            }
            _ => (floor, floor),
        };
        ratio += pt.ln() - ps.ln();
    }
    ratio
}
