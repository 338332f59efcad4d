//! The two learned networks: a recurrent generator decoded by argmax or
//! soft-argmax, and a multi-window convolutional feature extractor with
//! max-over-time pooling.

mod checkpoint;
mod extractor;
mod generator;

pub use checkpoint::Checkpoint;
pub use extractor::{Extractor, ExtractorNodes};
pub use generator::{Generator, GeneratorNodes, LstmState, SoftSentence};

use crate::error::{Error, Result};

/// Architecture sizes shared by generator and extractor.
///
/// The defaults are sized to train in minutes on one CPU core; all of
/// them are config-exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct NetsConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub window_sizes: Vec<usize>,
    pub filters_per_window: usize,
    pub max_len: usize,
}

impl NetsConfig {
    pub fn with_defaults(vocab_size: usize, max_len: usize) -> Self {
        NetsConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 128,
            noise_dim: 32,
            window_sizes: vec![3, 4, 5],
            filters_per_window: 32,
            max_len,
        }
    }

    /// Total feature dimension: windows times filters per window.
    pub fn feature_dim(&self) -> usize {
        self.window_sizes.len() * self.filters_per_window
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < super::textdata::RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocab size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        for &size in [
            self.embed_dim,
            self.hidden_dim,
            self.noise_dim,
            self.filters_per_window,
        ]
        .iter()
        {
            if size == 0 {
                return Err(Error::Config("network dimensions must be positive".into()));
            }
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        if self.window_sizes.is_empty() {
            return Err(Error::Config("need at least one window size".into()));
        }
        for &l in &self.window_sizes {
            if l == 0 || l > self.max_len {
                return Err(Error::Config(format!(
                    "window size {l} does not fit sentences of length {}",
                    self.max_len
                )));
            }
        }
        Ok(())
    }
}

/// Uniform(-0.08, 0.08) init for recurrent weights and the embedding.
pub(crate) const RECURRENT_INIT: f64 = 0.08;

/// The embedding matrix parameter name.
pub const EMBEDDING_PARAM: &str = "emb.we";

/// Fresh embedding matrix `k x v`, PAD column pinned to zero so
/// max-over-time pooling ignores padding.
pub fn init_embedding(cfg: &NetsConfig, seed: u64) -> Result<crate::ParamSet> {
    use rand::Rng;
    let mut rng = crate::seeds::rng(seed, "init.emb", 0, 0);
    let (k, v) = (cfg.embed_dim, cfg.vocab_size);
    let mut w = crate::Tensor::zeros(&[k, v]);
    for i in 0..k {
        for j in 0..v {
            w.set(i, j, rng.gen_range(-RECURRENT_INIT..RECURRENT_INIT));
        }
    }
    pin_pad_column(&mut w);
    let mut params = crate::ParamSet::new();
    params.insert(EMBEDDING_PARAM, w)?;
    Ok(params)
}

/// Zero the PAD column of an embedding matrix in place.
pub fn pin_pad_column(w: &mut crate::Tensor) {
    let cols = w.cols();
    for i in 0..w.rows() {
        w.data_mut()[i * cols + crate::textdata::PAD as usize] = 0.0;
    }
}
