use std::collections::BTreeMap;

use rand::Rng;

use crate::condext::{BatchCycler, CondEvalRecord, CondEvent, CondHistory};
use crate::error::{Error, Result};
use crate::fmd::fmd_on_tape;
use crate::ndgrad::{NodeId, ParamSet, Tape, Tensor};
use crate::nets::{
    init_embedding, pin_pad_column, Extractor, ExtractorNodes, Generator, GeneratorNodes,
    NetsConfig, EMBEDDING_PARAM, RECURRENT_INIT,
};
use crate::ot::SolverConfig;
use crate::textdata::{self, Corpus, MarkovChain, Vocab};
use crate::train::{clip_gradients, Adam, Phase, StepRecord};

/// Style-transfer task configuration. The decoder's conditioning vector
/// is the encoder content code concatenated with a learned style
/// embedding, so its width is `enc_hidden + 2 * style_dim`.
#[derive(Clone, Debug)]
pub struct StyleConfig {
    pub nets: NetsConfig,
    pub enc_hidden: usize,
    pub style_dim: usize,
    pub lambda: f64,
    pub batch: usize,
    pub eta: f64,
    pub eta_critic: Option<f64>,
    pub iters: usize,
    pub critic_steps: usize,
    pub tau: f64,
    pub clip: f64,
    pub solver: SolverConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl StyleConfig {
    pub fn defaults(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        let mut nets = NetsConfig::with_defaults(vocab_size, max_len);
        nets.embed_dim = 32;
        nets.hidden_dim = 64;
        nets.window_sizes = vec![2, 3];
        nets.filters_per_window = 16;
        StyleConfig {
            nets,
            enc_hidden: 48,
            style_dim: 8,
            lambda: 1.0,
            batch: 16,
            eta: 1e-3,
            eta_critic: Some(1e-4),
            iters: 2000,
            critic_steps: 1,
            tau: 0.1,
            clip: 5.0,
            solver: SolverConfig::training(),
            seed,
            eval_every: 250,
            eval_samples: 128,
        }
    }

    fn conditioning_dim(&self) -> usize {
        self.enc_hidden + 2 * self.style_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.enc_hidden == 0 || self.style_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.batch < 2 || self.critic_steps < 1 || self.iters < 1 || self.eval_every == 0 {
            return Err(Error::Config("bad loop controls".into()));
        }
        self.solver.validate()?;
        self.nets.validate()
    }
}

/// Encoder + style-conditioned decoder + one shared extractor critic.
pub struct StyleModel {
    cfg: StyleConfig,
    decoder: Generator,
    extractor: Extractor,
    /// Encoder, decoder and style embeddings: the min player.
    pub min_params: ParamSet,
    /// Extractor filters: the max player (with the word embedding).
    pub critic_params: ParamSet,
    pub emb_params: ParamSet,
}

struct StyleNodes {
    we: NodeId,
    enc_wx: NodeId,
    enc_wh: NodeId,
    enc_bias: NodeId,
    enc_style: NodeId,
    dec: GeneratorNodes,
    dec_style: NodeId,
    ext: ExtractorNodes,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Trainable {
    Nobody,
    Critic,
    MinPlayer,
}

impl StyleModel {
    pub fn new(cfg: StyleConfig) -> Result<StyleModel> {
        cfg.validate()?;
        let mut dec_cfg = cfg.nets.clone();
        dec_cfg.noise_dim = cfg.conditioning_dim();
        let decoder = Generator::new(dec_cfg, "dec")?;
        let extractor = Extractor::new(cfg.nets.clone(), "ext")?;

        let mut min_params = decoder.init_params(crate::seeds::derive(cfg.seed, "init", 10, 0))?;
        let mut rng = crate::seeds::rng(cfg.seed, "init.enc", 0, 0);
        let (k, he, s) = (cfg.nets.embed_dim, cfg.enc_hidden, cfg.style_dim);
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n)
                    .map(|_| rng.gen_range(-RECURRENT_INIT..RECURRENT_INIT))
                    .collect(),
            )
            .unwrap()
        };
        min_params.insert("enc.wx", uniform(&[4 * he, k]))?;
        min_params.insert("enc.wh", uniform(&[4 * he, he]))?;
        min_params.insert("enc.bias", uniform(&[4 * he]))?;
        min_params.insert("enc.style", uniform(&[s, 2]))?;
        min_params.insert("dec.style", uniform(&[s, 2]))?;

        let critic_params = extractor.init_params(crate::seeds::derive(cfg.seed, "init", 11, 0))?;
        let emb_params = init_embedding(&cfg.nets, crate::seeds::derive(cfg.seed, "init", 12, 0))?;
        Ok(StyleModel {
            cfg,
            decoder,
            extractor,
            min_params,
            critic_params,
            emb_params,
        })
    }

    pub fn cfg(&self) -> &StyleConfig {
        &self.cfg
    }

    fn register(&self, tape: &mut Tape, who: Trainable) -> Result<StyleNodes> {
        let critic = who == Trainable::Critic;
        let min_side = who == Trainable::MinPlayer;
        let we = {
            let v = self.emb_params.get(EMBEDDING_PARAM).unwrap().clone();
            if critic {
                tape.leaf(EMBEDDING_PARAM, v)?
            } else {
                tape.constant(v)?
            }
        };
        let ext = self.extractor.register(tape, &self.critic_params, critic)?;
        let dec = self.decoder.register(tape, &self.min_params, min_side)?;
        let mut named = |name: &str| -> Result<NodeId> {
            let v = self.min_params.get(name).unwrap().clone();
            if min_side {
                tape.leaf(name, v)
            } else {
                tape.constant(v)
            }
        };
        Ok(StyleNodes {
            we,
            enc_wx: named("enc.wx")?,
            enc_wh: named("enc.wh")?,
            enc_bias: named("enc.bias")?,
            enc_style: named("enc.style")?,
            dec: dec,
            dec_style: named("dec.style")?,
            ext,
        })
    }

    /// Run the encoder over a batch; the content code is the final
    /// hidden state with the style embedding appended.
    fn encode(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        batch: &[&[u32]],
        style: usize,
    ) -> Result<NodeId> {
        let n = batch.len();
        let he = self.cfg.enc_hidden;
        let len = batch[0].len();
        let mut h = tape.constant(Tensor::zeros(&[he, n]))?;
        let mut c = tape.constant(Tensor::zeros(&[he, n]))?;
        for t in 0..len {
            let ids: Vec<usize> = batch.iter().map(|s| s[t] as usize).collect();
            let w = tape.gather_cols(nodes.we, &ids)?;
            let from_w = tape.matmul(nodes.enc_wx, w)?;
            let from_h = tape.matmul(nodes.enc_wh, h)?;
            let pre = tape.add(from_w, from_h)?;
            let pre = tape.add_col_vec(pre, nodes.enc_bias)?;
            let cell = tape.lstm_cell(pre, c, he)?;
            h = tape.slice_rows(cell, 0, he)?;
            c = tape.slice_rows(cell, he, 2 * he)?;
        }
        let style_col = tape.gather_cols(nodes.enc_style, &vec![style; n])?;
        tape.concat_rows(&[h, style_col])
    }

    fn conditioning(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        content: NodeId,
        style: usize,
    ) -> Result<NodeId> {
        let n = tape.value(content).cols();
        let style_col = tape.gather_cols(nodes.dec_style, &vec![style; n])?;
        tape.concat_rows(&[content, style_col])
    }

    fn rec_term(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        batch: &[&[u32]],
        style: usize,
    ) -> Result<NodeId> {
        let content = self.encode(tape, nodes, batch, style)?;
        let cond = self.conditioning(tape, nodes, content, style)?;
        self.decoder
            .teacher_nll(tape, &nodes.dec, nodes.we, cond, batch)
    }

    fn transfer_soft(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        batch: &[&[u32]],
        from: usize,
        to: usize,
    ) -> Result<Vec<NodeId>> {
        let content = self.encode(tape, nodes, batch, from)?;
        let cond = self.conditioning(tape, nodes, content, to)?;
        let soft = self
            .decoder
            .generate_soft_from(tape, &nodes.dec, nodes.we, cond, self.cfg.tau)?;
        (0..batch.len()).map(|j| soft.sentence(tape, j)).collect()
    }

    fn real_features(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        batch: &[&[u32]],
    ) -> Result<NodeId> {
        let sents: Result<Vec<NodeId>> = batch
            .iter()
            .map(|ids| textdata::embed(tape, nodes.we, ids))
            .collect();
        self.extractor.extract_batch(tape, &nodes.ext, &sents?)
    }

    fn adv_node(
        &self,
        tape: &mut Tape,
        nodes: &StyleNodes,
        batch1: &[&[u32]],
        batch2: &[&[u32]],
    ) -> Result<(NodeId, f64, f64, f64)> {
        let t12 = self.transfer_soft(tape, nodes, batch1, 0, 1)?;
        let f12 = self.extractor.extract_batch(tape, &nodes.ext, &t12)?;
        let r2 = self.real_features(tape, nodes, batch2)?;
        let fmd1 = fmd_on_tape(tape, f12, r2, &self.cfg.solver)?;

        let t21 = self.transfer_soft(tape, nodes, batch2, 1, 0)?;
        let f21 = self.extractor.extract_batch(tape, &nodes.ext, &t21)?;
        let r1 = self.real_features(tape, nodes, batch1)?;
        let fmd2 = fmd_on_tape(tape, f21, r1, &self.cfg.solver)?;

        let sum = tape.add(fmd1.value, fmd2.value)?;
        let v1 = tape.value(fmd1.value).item();
        let v2 = tape.value(fmd2.value).item();
        Ok((sum, v1, v2, fmd1.residual.max(fmd2.residual)))
    }

    fn check_batches(&self, batch1: &[&[u32]], batch2: &[&[u32]]) -> Result<()> {
        if batch1.is_empty() || batch1.len() != batch2.len() {
            return Err(Error::Dim(format!(
                "style batches must be equal and non-empty, got {} and {}",
                batch1.len(),
                batch2.len()
            )));
        }
        Ok(())
    }

    /// Mean token NLL of each style reconstructed through its own
    /// encoding, summed over the two styles.
    pub fn reconstruction_loss(&self, batch1: &[&[u32]], batch2: &[&[u32]]) -> Result<f64> {
        self.check_batches(batch1, batch2)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, Trainable::Nobody)?;
        let r1 = self.rec_term(&mut tape, &nodes, batch1, 0)?;
        let r2 = self.rec_term(&mut tape, &nodes, batch2, 1)?;
        let total = tape.add(r1, r2)?;
        Ok(tape.value(total).item())
    }

    /// The two-term adversarial loss: each transfer direction matched
    /// against real sentences of the target style.
    pub fn style_adv_loss(&self, batch1: &[&[u32]], batch2: &[&[u32]]) -> Result<f64> {
        self.check_batches(batch1, batch2)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, Trainable::Nobody)?;
        let (sum, _, _, _) = self.adv_node(&mut tape, &nodes, batch1, batch2)?;
        Ok(tape.value(sum).item())
    }

    /// Full objective `L_rec + lambda * L_adv`.
    pub fn style_objective(
        &self,
        batch1: &[&[u32]],
        batch2: &[&[u32]],
        lambda: f64,
    ) -> Result<f64> {
        if lambda < 0.0 {
            return Err(Error::Param(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(self.reconstruction_loss(batch1, batch2)?
            + lambda * self.style_adv_loss(batch1, batch2)?)
    }

    /// Hard transfer decode (ids), for classification-based evaluation.
    pub fn transfer_hard(
        &self,
        batch: &[&[u32]],
        from: usize,
        to: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, Trainable::Nobody)?;
        let content = self.encode(&mut tape, &nodes, batch, from)?;
        let cond = self.conditioning(&mut tape, &nodes, content, to)?;
        self.decoder
            .generate_hard_from(&mut tape, &nodes.dec, nodes.we, cond)
    }
}

/// Corpora for the two styles plus the generating chains (used by the
/// likelihood-ratio evaluation).
#[derive(Clone)]
pub struct StyleData {
    pub vocab: Vocab,
    pub train_a: Corpus,
    pub train_b: Corpus,
    pub test_a: Corpus,
    pub test_b: Corpus,
    pub chain_a: MarkovChain,
    pub chain_b: MarkovChain,
}

impl StyleData {
    /// The built-in toy task: two ring chains over a shared vocabulary.
    pub fn toy(
        states: usize,
        train_count: usize,
        test_count: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<StyleData> {
        let (chain_a, chain_b) = crate::condext::two_style_chains(states);
        let vocab = chain_a.vocab()?;
        Ok(StyleData {
            vocab,
            train_a: chain_a.synth_corpus(
                train_count,
                max_len,
                crate::seeds::derive(seed, "style.a", 0, 0),
                textdata::Split::Train,
            )?,
            train_b: chain_b.synth_corpus(
                train_count,
                max_len,
                crate::seeds::derive(seed, "style.b", 0, 0),
                textdata::Split::Train,
            )?,
            test_a: chain_a.synth_corpus(
                test_count,
                max_len,
                crate::seeds::derive(seed, "style.a", 1, 0),
                textdata::Split::Test,
            )?,
            test_b: chain_b.synth_corpus(
                test_count,
                max_len,
                crate::seeds::derive(seed, "style.b", 1, 0),
                textdata::Split::Test,
            )?,
            chain_a,
            chain_b,
        })
    }
}

/// Alternating min-max training for the style task.
pub struct StyleTrainer {
    model: StyleModel,
    data: StyleData,
    min_adam: Adam,
    critic_adam: Adam,
    cycler_a: BatchCycler,
    cycler_b: BatchCycler,
    iter: usize,
}

impl StyleTrainer {
    pub fn new(cfg: StyleConfig, data: StyleData) -> Result<StyleTrainer> {
        let mut cfg = cfg;
        cfg.nets.vocab_size = data.vocab.size();
        cfg.nets.max_len = data.train_a.max_len();
        let model = StyleModel::new(cfg)?;
        let cfg = model.cfg();
        if data.train_a.len() < cfg.batch || data.train_b.len() < cfg.batch {
            return Err(Error::Input("style corpora smaller than batch".into()));
        }
        let mut critic_set = ParamSet::new();
        critic_set.absorb(&model.critic_params)?;
        critic_set.absorb(&model.emb_params)?;
        let min_adam = Adam::new(&model.min_params);
        let critic_adam = Adam::new(&critic_set);
        let cycler_a = BatchCycler::new(cfg.seed, "style.batch.a", data.train_a.len(), cfg.batch);
        let cycler_b = BatchCycler::new(cfg.seed, "style.batch.b", data.train_b.len(), cfg.batch);
        Ok(StyleTrainer {
            model,
            data,
            min_adam,
            critic_adam,
            cycler_a,
            cycler_b,
            iter: 0,
        })
    }

    pub fn model(&self) -> &StyleModel {
        &self.model
    }

    pub fn data(&self) -> &StyleData {
        &self.data
    }

    fn batches(&mut self) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let a = self
            .cycler_a
            .next()
            .into_iter()
            .map(|i| self.data.train_a.sequence(i).to_vec())
            .collect();
        let b = self
            .cycler_b
            .next()
            .into_iter()
            .map(|i| self.data.train_b.sequence(i).to_vec())
            .collect();
        (a, b)
    }

    fn critic_step(&mut self, batch1: &[&[u32]], batch2: &[&[u32]]) -> Result<StepRecord> {
        let started = std::time::Instant::now();
        let mut tape = Tape::new();
        let nodes = self.model.register(&mut tape, Trainable::Critic)?;
        let (adv, v1, v2, residual) = self.model.adv_node(&mut tape, &nodes, batch1, batch2)?;
        let mut grads = tape.backward(adv)?;
        grads.zero_column(EMBEDDING_PARAM, textdata::PAD as usize);
        clip_gradients(&mut grads, self.model.cfg.clip);
        let mut set = ParamSet::new();
        set.absorb(&self.model.critic_params)?;
        set.absorb(&self.model.emb_params)?;
        let eta = self.model.cfg.eta_critic.unwrap_or(self.model.cfg.eta);
        self.critic_adam.step(&mut set, &grads, eta, 1.0)?;
        for (name, value) in set.iter() {
            if let Some(t) = self.model.critic_params.get_mut(name) {
                *t = value.clone();
            } else if let Some(t) = self.model.emb_params.get_mut(name) {
                *t = value.clone();
            }
        }
        if let Some(we) = self.model.emb_params.get_mut(EMBEDDING_PARAM) {
            pin_pad_column(we);
        }
        Ok(StepRecord {
            iter: self.iter,
            phase: Phase::Critic,
            fmd: 0.5 * (v1 + v2),
            residual,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn min_step(&mut self, batch1: &[&[u32]], batch2: &[&[u32]]) -> Result<StepRecord> {
        let started = std::time::Instant::now();
        let mut tape = Tape::new();
        let nodes = self.model.register(&mut tape, Trainable::MinPlayer)?;
        let r1 = self.model.rec_term(&mut tape, &nodes, batch1, 0)?;
        let r2 = self.model.rec_term(&mut tape, &nodes, batch2, 1)?;
        let rec = tape.add(r1, r2)?;
        let (adv, v1, v2, residual) = self.model.adv_node(&mut tape, &nodes, batch1, batch2)?;
        let weighted = tape.mul_scalar(adv, self.model.cfg.lambda)?;
        let total = tape.add(rec, weighted)?;
        let mut grads = tape.backward(total)?;
        clip_gradients(&mut grads, self.model.cfg.clip);
        let mut set = ParamSet::new();
        set.absorb(&self.model.min_params)?;
        self.min_adam
            .step(&mut set, &grads, self.model.cfg.eta, -1.0)?;
        for (name, value) in set.iter() {
            *self.model.min_params.get_mut(name).unwrap() = value.clone();
        }
        Ok(StepRecord {
            iter: self.iter,
            phase: Phase::Generator,
            fmd: 0.5 * (v1 + v2),
            residual,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Likelihood-ratio transfer accuracy over held-out batches: a
    /// transferred sentence counts when the target chain explains it
    /// strictly better than the source chain.
    pub fn transfer_accuracy(&self) -> Result<f64> {
        let m = self
            .model
            .cfg
            .eval_samples
            .min(self.data.test_a.len())
            .min(self.data.test_b.len());
        let take_a: Vec<&[u32]> = (0..m).map(|i| self.data.test_a.sequence(i)).collect();
        let take_b: Vec<&[u32]> = (0..m).map(|i| self.data.test_b.sequence(i)).collect();
        let to_b = self.model.transfer_hard(&take_a, 0, 1)?;
        let to_a = self.model.transfer_hard(&take_b, 1, 0)?;
        let mut correct = 0usize;
        for seq in &to_b {
            if crate::condext::log_likelihood_ratio(
                seq,
                &self.data.chain_b,
                &self.data.chain_a,
                &self.data.vocab,
            ) > 0.0
            {
                correct += 1;
            }
        }
        for seq in &to_a {
            if crate::condext::log_likelihood_ratio(
                seq,
                &self.data.chain_a,
                &self.data.chain_b,
                &self.data.vocab,
            ) > 0.0
            {
                correct += 1;
            }
        }
        Ok(correct as f64 / (2 * m) as f64)
    }

    pub fn evaluate(&self) -> Result<CondEvalRecord> {
        let started = std::time::Instant::now();
        let n = self.model.cfg.batch.min(self.data.test_a.len()).min(self.data.test_b.len());
        let a: Vec<&[u32]> = (0..n).map(|i| self.data.test_a.sequence(i)).collect();
        let b: Vec<&[u32]> = (0..n).map(|i| self.data.test_b.sequence(i)).collect();
        let rec = self.model.reconstruction_loss(&a, &b)?;
        let adv = self.model.style_adv_loss(&a, &b)?;
        let score = self.transfer_accuracy()?;
        Ok(CondEvalRecord {
            iter: self.iter,
            primary: rec,
            adv,
            residual: 0.0,
            score,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn run(&mut self, mut observe: impl FnMut(CondEvent)) -> Result<CondHistory> {
        let mut history = CondHistory::default();
        let total = self.model.cfg.iters;
        while self.iter < total {
            self.iter += 1;
            for _ in 0..self.model.cfg.critic_steps {
                let (a, b) = self.batches();
                let a_refs: Vec<&[u32]> = a.iter().map(|s| s.as_slice()).collect();
                let b_refs: Vec<&[u32]> = b.iter().map(|s| s.as_slice()).collect();
                let rec = self.critic_step(&a_refs, &b_refs)?;
                observe(CondEvent::Step(&rec));
                history.steps.push(rec);
            }
            let (a, b) = self.batches();
            let a_refs: Vec<&[u32]> = a.iter().map(|s| s.as_slice()).collect();
            let b_refs: Vec<&[u32]> = b.iter().map(|s| s.as_slice()).collect();
            let rec = self.min_step(&a_refs, &b_refs)?;
            observe(CondEvent::Step(&rec));
            history.steps.push(rec);

            if self.iter % self.model.cfg.eval_every == 0 || self.iter == total {
                let eval = self.evaluate()?;
                observe(CondEvent::Eval(&eval));
                history.evals.push(eval);
            }
        }
        Ok(history)
    }
}
