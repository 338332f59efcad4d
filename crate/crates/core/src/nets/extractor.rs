use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{NodeId, ParamSet, Tape, Tensor};
use crate::nets::NetsConfig;

/// Convolutional sentence feature extractor.
///
/// For each window size, a bank of filters slides over the embedded
/// sentence (valid convolution, no padding), goes through tanh, and is
/// max-pooled over time; the pooled values concatenate into one feature
/// vector per sentence. Each filter acts as a detector for one local
/// pattern, and the pooling keeps whichever position excites it most.
#[derive(Clone, Debug)]
pub struct Extractor {
    cfg: NetsConfig,
    prefix: String,
}

/// Tape handles for the filter banks, one `(weights, bias)` pair per
/// window size.
pub struct ExtractorNodes {
    banks: Vec<(NodeId, NodeId)>,
}

impl Extractor {
    pub fn new(cfg: NetsConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Extractor {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    pub fn cfg(&self) -> &NetsConfig {
        &self.cfg
    }

    fn conv_name(&self, window: usize) -> String {
        format!("{}.conv{window}", self.prefix)
    }

    fn bias_name(&self, window: usize) -> String {
        format!("{}.bias{window}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.cfg
            .window_sizes
            .iter()
            .flat_map(|&l| [self.conv_name(l), self.bias_name(l)])
            .collect()
    }

    /// Scaled-uniform filter init (`+-1/sqrt(k*l)`), zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = crate::seeds::rng(seed, "init.ext", 0, 0);
        let mut params = ParamSet::new();
        let d2 = self.cfg.filters_per_window;
        for &l in &self.cfg.window_sizes {
            let fan_in = self.cfg.embed_dim * l;
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..d2 * fan_in)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            params.insert(&self.conv_name(l), Tensor::new(vec![d2, fan_in], data)?)?;
            params.insert(&self.bias_name(l), Tensor::zeros(&[d2]))?;
        }
        Ok(params)
    }

    pub fn register(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        trainable: bool,
    ) -> Result<ExtractorNodes> {
        let mut banks = Vec::with_capacity(self.cfg.window_sizes.len());
        for &l in &self.cfg.window_sizes {
            let mut node = |name: &str| -> Result<NodeId> {
                let value = params
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))?
                    .clone();
                if trainable {
                    tape.leaf(name, value)
                } else {
                    tape.constant(value)
                }
            };
            banks.push((node(&self.conv_name(l))?, node(&self.bias_name(l))?));
        }
        Ok(ExtractorNodes { banks })
    }

    /// Features of one embedded sentence (`k x L` node) as a length-`d`
    /// vector node.
    pub fn extract(
        &self,
        tape: &mut Tape,
        nodes: &ExtractorNodes,
        sentence: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.value(sentence).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.cfg.embed_dim {
            return Err(Error::Dim(format!(
                "sentence must be {} x L, got {:?}",
                self.cfg.embed_dim, shape
            )));
        }
        let time = shape[1];
        let mut pooled = Vec::with_capacity(self.cfg.window_sizes.len());
        for (&l, &(weights, bias)) in self.cfg.window_sizes.iter().zip(&nodes.banks) {
            if l > time {
                return Err(Error::Config(format!(
                    "window {l} exceeds sentence length {time}"
                )));
            }
            let patches = tape.unfold(sentence, l)?;
            let maps = tape.matmul(weights, patches)?;
            let maps = tape.add_col_vec(maps, bias)?;
            let maps = tape.tanh(maps)?;
            pooled.push(tape.max_over_time(maps)?);
        }
        tape.concat_rows(&pooled)
    }

    /// Features for a whole batch of embedded sentences, one column per
    /// sentence: a `d x n` node.
    pub fn extract_batch(
        &self,
        tape: &mut Tape,
        nodes: &ExtractorNodes,
        sentences: &[NodeId],
    ) -> Result<NodeId> {
        if sentences.is_empty() {
            return Err(Error::Dim("empty sentence batch".into()));
        }
        let features: Result<Vec<NodeId>> = sentences
            .iter()
            .map(|&s| self.extract(tape, nodes, s))
            .collect();
        tape.concat_cols(&features?)
    }
}
