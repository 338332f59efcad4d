//! The alternating min-max training loop: several critic ascent steps
//! per generator descent step, each on the feature-mover distance
//! between real and synthesized sentence features.

mod adam;
mod metrics;

pub use adam::{clip_gradients, Adam};
pub use metrics::write_metrics_csv;

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::fmd::{fmd_on_tape, TapeFmd};
use crate::ndgrad::{NodeId, ParamSet, Tape, Tensor};
use crate::nets::{
    init_embedding, pin_pad_column, Checkpoint, Extractor, Generator, NetsConfig,
    EMBEDDING_PARAM,
};
use crate::ot::SolverConfig;
use crate::textdata::{self, Corpus, Vocab};

/// Which player's optimizer owns the word-embedding matrix. The critic
/// step maximizes over the extractor, and keeping the embedding with
/// the max player makes that step self-contained; the opposite
/// assignment stays available behind this switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingOwner {
    Critic,
    Generator,
}

/// Every knob the objective leaves open.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Mini-batch size for both batches of the transport problem.
    pub batch: usize,
    /// Learning rate, generator side (and critic side unless
    /// `eta_critic` overrides it).
    pub eta: f64,
    /// Separate critic learning rate; `None` means use `eta`.
    pub eta_critic: Option<f64>,
    /// Outer iterations.
    pub iters: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Soft-argmax temperature.
    pub tau: f64,
    /// Linearly anneal tau toward `tau_end` over the run.
    pub tau_anneal: bool,
    pub tau_end: f64,
    /// Global gradient-norm clip, both players.
    pub clip: f64,
    pub solver: SolverConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Checkpoint cadence in iterations; 0 disables.
    pub checkpoint_every: usize,
    pub embedding_owner: EmbeddingOwner,
    /// Reuse the last critic batch for the generator step instead of
    /// sampling a fresh one.
    pub reuse_batch: bool,
    pub nets: NetsConfig,
    /// Recorded into checkpoints; when empty a fingerprint of this
    /// config is used.
    pub config_hash: String,
}

impl TrainConfig {
    pub fn defaults(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        TrainConfig {
            batch: 16,
            eta: 1e-4,
            eta_critic: None,
            iters: 2000,
            critic_steps: 5,
            tau: 0.1,
            tau_anneal: false,
            tau_end: 0.01,
            clip: 5.0,
            solver: SolverConfig::training(),
            seed,
            eval_every: 250,
            eval_samples: 500,
            checkpoint_every: 0,
            embedding_owner: EmbeddingOwner::Critic,
            reuse_batch: false,
            nets: NetsConfig::with_defaults(vocab_size, max_len),
            config_hash: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must be >= 2, got {}", self.batch)));
        }
        if self.critic_steps < 1 {
            return Err(Error::Config("critic_steps must be >= 1".into()));
        }
        if self.iters < 1 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        // eta = 0 is allowed: a rate of zero must leave parameters
        // bit-identical, which the tests rely on.
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if let Some(ec) = self.eta_critic {
            if !(ec >= 0.0 && ec.is_finite()) {
                return Err(Error::Config(format!("eta_critic must be >= 0, got {ec}")));
            }
        }
        for (name, v) in [("tau", self.tau), ("clip", self.clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be >= 2".into()));
        }
        self.solver.validate()?;
        self.nets.validate()?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        if !self.config_hash.is_empty() {
            return self.config_hash.clone();
        }
        let dump = format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in dump.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn tau_at(&self, iter: usize) -> f64 {
        if !self.tau_anneal || self.iters <= 1 {
            return self.tau;
        }
        let frac = (iter - 1) as f64 / (self.iters - 1) as f64;
        self.tau + (self.tau_end - self.tau) * frac
    }
}

/// Train/test corpora plus the vocabulary they were encoded against.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Corpus,
    pub test: Corpus,
    pub vocab: Vocab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Critic,
    Generator,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Critic => write!(f, "critic"),
            Phase::Generator => write!(f, "generator"),
        }
    }
}

/// One logged update.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub iter: usize,
    pub phase: Phase,
    pub fmd: f64,
    pub residual: f64,
    pub wall_ms: u64,
}

/// One periodic evaluation: generator-side distance on a fixed held-out
/// batch, plus quality (test-BLEU) and diversity (self-BLEU) of a fixed
/// pool of hard-decoded samples.
#[derive(Clone, Copy, Debug)]
pub struct EvalRecord {
    pub iter: usize,
    pub heldout_fmd: f64,
    pub residual: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub self_bleu2: f64,
    pub self_bleu3: f64,
    pub wall_ms: u64,
}

/// Everything a run logged, in iteration order.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn eval_at(&self, iter: usize) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.iter == iter)
    }

    /// Equality of every numeric field except wall-clock times, which
    /// are the one thing a rerun cannot reproduce.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.steps.len() == other.steps.len()
            && self.evals.len() == other.evals.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.iter == b.iter
                    && a.phase == b.phase
                    && a.fmd.to_bits() == b.fmd.to_bits()
                    && a.residual.to_bits() == b.residual.to_bits()
            })
            && self.evals.iter().zip(&other.evals).all(|(a, b)| {
                a.iter == b.iter
                    && a.heldout_fmd.to_bits() == b.heldout_fmd.to_bits()
                    && a.residual.to_bits() == b.residual.to_bits()
                    && a.bleu2.to_bits() == b.bleu2.to_bits()
                    && a.bleu3.to_bits() == b.bleu3.to_bits()
                    && a.self_bleu2.to_bits() == b.self_bleu2.to_bits()
                    && a.self_bleu3.to_bits() == b.self_bleu3.to_bits()
            })
    }
}

/// Events surfaced to the caller as the run progresses.
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
    Checkpoint(&'a Path),
}

/// The adversarial trainer: owns both players' parameters, their
/// optimizer state, and the data order.
pub struct Trainer {
    cfg: TrainConfig,
    data: TrainData,
    generator: Generator,
    extractor: Extractor,
    gen_params: ParamSet,
    ext_params: ParamSet,
    emb_params: ParamSet,
    gen_adam: Adam,
    critic_adam: Adam,
    iter: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    checkpoint_dir: Option<std::path::PathBuf>,
}

struct LossNodes {
    fmd: TapeFmd,
    cost_min: f64,
    cost_max: f64,
}

impl Trainer {
    pub fn new(mut cfg: TrainConfig, data: TrainData) -> Result<Trainer> {
        cfg.nets.vocab_size = data.vocab.size();
        cfg.nets.max_len = data.train.max_len();
        cfg.validate()?;
        if data.train.len() < cfg.batch {
            return Err(Error::Input(format!(
                "dataset of {} sentences is smaller than batch {}",
                data.train.len(),
                cfg.batch
            )));
        }
        if data.test.len() < cfg.batch {
            return Err(Error::Input(format!(
                "test split of {} sentences is smaller than batch {}",
                data.test.len(),
                cfg.batch
            )));
        }
        let generator = Generator::new(cfg.nets.clone(), "gen")?;
        let extractor = Extractor::new(cfg.nets.clone(), "ext")?;
        let gen_params = generator.init_params(crate::seeds::derive(cfg.seed, "init", 1, 0))?;
        let ext_params = extractor.init_params(crate::seeds::derive(cfg.seed, "init", 2, 0))?;
        let emb_params = init_embedding(&cfg.nets, crate::seeds::derive(cfg.seed, "init", 3, 0))?;

        let gen_adam = Adam::new(&Self::generator_set(&cfg, &gen_params, &emb_params)?);
        let critic_adam = Adam::new(&Self::critic_set(&cfg, &ext_params, &emb_params)?);
        let order = Self::epoch_order(cfg.seed, 0, data.train.len());
        Ok(Trainer {
            cfg,
            data,
            generator,
            extractor,
            gen_params,
            ext_params,
            emb_params,
            gen_adam,
            critic_adam,
            iter: 0,
            epoch: 0,
            cursor: 0,
            order,
            checkpoint_dir: None,
        })
    }

    pub fn set_checkpoint_dir(&mut self, dir: &Path) {
        self.checkpoint_dir = Some(dir.to_path_buf());
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.data.vocab
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    fn critic_set(cfg: &TrainConfig, ext: &ParamSet, emb: &ParamSet) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        set.absorb(ext)?;
        if cfg.embedding_owner == EmbeddingOwner::Critic {
            set.absorb(emb)?;
        }
        Ok(set)
    }

    fn generator_set(cfg: &TrainConfig, gen: &ParamSet, emb: &ParamSet) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        set.absorb(gen)?;
        if cfg.embedding_owner == EmbeddingOwner::Generator {
            set.absorb(emb)?;
        }
        Ok(set)
    }

    /// Names the critic's optimizer touches.
    pub fn critic_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.ext_params.names().map(|s| s.to_string()).collect();
        if self.cfg.embedding_owner == EmbeddingOwner::Critic {
            names.extend(self.emb_params.names().map(|s| s.to_string()));
        }
        names
    }

    /// Names the generator's optimizer touches.
    pub fn generator_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.gen_params.names().map(|s| s.to_string()).collect();
        if self.cfg.embedding_owner == EmbeddingOwner::Generator {
            names.extend(self.emb_params.names().map(|s| s.to_string()));
        }
        names
    }

    pub fn gen_checksum(&self) -> u64 {
        self.gen_params.checksum()
    }

    pub fn critic_checksum(&self) -> u64 {
        let set = Self::critic_set(&self.cfg, &self.ext_params, &self.emb_params).unwrap();
        set.checksum()
    }

    fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut crate::seeds::rng(seed, "shuffle", epoch, 0));
        order
    }

    /// Next without-replacement batch of training-sequence indices;
    /// reshuffles (and drops a short tail) at epoch boundaries.
    fn next_batch_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.cfg.batch > self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = Self::epoch_order(self.cfg.seed, self.epoch, self.data.train.len());
        }
        let slice = self.order[self.cursor..self.cursor + self.cfg.batch].to_vec();
        self.cursor += self.cfg.batch;
        slice
    }

    fn noise_for(&self, iter: usize, step: u64) -> Tensor {
        let mut rng = crate::seeds::rng(self.cfg.seed, "z", iter as u64, step);
        self.generator.sample_noise(self.cfg.batch, &mut rng)
    }

    /// Build the shared loss: extract features of the real batch and of
    /// a soft-decoded batch, then the transport distance between them.
    fn build_loss(
        &self,
        tape: &mut Tape,
        real: &[usize],
        noise: &Tensor,
        tau: f64,
        trainable: Phase,
    ) -> Result<LossNodes> {
        let critic_trainable = trainable == Phase::Critic;
        let gen_trainable = trainable == Phase::Generator;
        let emb_trainable = match self.cfg.embedding_owner {
            EmbeddingOwner::Critic => critic_trainable,
            EmbeddingOwner::Generator => gen_trainable,
        };

        let we = {
            let value = self.emb_params.get(EMBEDDING_PARAM).unwrap().clone();
            if emb_trainable {
                tape.leaf(EMBEDDING_PARAM, value)?
            } else {
                tape.constant(value)?
            }
        };
        let ext_nodes = self.extractor.register(tape, &self.ext_params, critic_trainable)?;
        let gen_nodes = self.generator.register(tape, &self.gen_params, gen_trainable)?;

        let mut real_sentences = Vec::with_capacity(real.len());
        for &idx in real {
            let ids = self.data.train.sequence(idx);
            real_sentences.push(textdata::embed(tape, we, ids)?);
        }
        let f_real = self.extractor.extract_batch(tape, &ext_nodes, &real_sentences)?;

        let soft = self.generator.generate_soft(tape, &gen_nodes, we, noise, tau)?;
        let mut fake_sentences = Vec::with_capacity(noise.cols());
        for j in 0..noise.cols() {
            fake_sentences.push(soft.sentence(tape, j)?);
        }
        let f_fake = self.extractor.extract_batch(tape, &ext_nodes, &fake_sentences)?;

        self.loss_from_features(tape, f_real, f_fake)
    }

    fn loss_from_features(
        &self,
        tape: &mut Tape,
        f_real: NodeId,
        f_fake: NodeId,
    ) -> Result<LossNodes> {
        let cost_node = crate::fmd::cosine_cost_on_tape(tape, f_real, f_fake)?;
        let (cost_min, cost_max) = {
            let c = tape.value(cost_node);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in c.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let cost = crate::ot::CostMatrix::new(tape.value(cost_node).clone()).map_err(|e| {
            self.with_extrema(e, cost_min, cost_max)
        })?;
        let plan = crate::ot::ipot(&cost, &self.cfg.solver)
            .map_err(|e| self.with_extrema(e, cost_min, cost_max))?;
        let residual = crate::ot::marginal_residual(&plan);
        let plan_node = tape.constant(plan.values().clone())?;
        let value = tape.frob_dot(plan_node, cost_node)?;
        Ok(LossNodes {
            fmd: TapeFmd {
                value,
                plan,
                residual,
            },
            cost_min,
            cost_max,
        })
    }

    fn with_extrema(&self, e: Error, lo: f64, hi: f64) -> Error {
        match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("{msg} (cost extrema: min {lo}, max {hi})"))
            }
            other => other,
        }
    }

    /// One critic ascent step on the given batch. Generator weights are
    /// untouched by construction (they enter the tape as constants).
    pub fn critic_update(&mut self, real: &[usize], noise: &Tensor, tau: f64) -> Result<StepRecord> {
        let started = std::time::Instant::now();
        let mut tape = Tape::new();
        let loss = self
            .build_loss(&mut tape, real, noise, tau, Phase::Critic)
            .map_err(|e| self.augment_numeric(e, "critic"))?;
        let mut grads = tape.backward(loss.fmd.value)?;
        grads.zero_column(EMBEDDING_PARAM, textdata::PAD as usize);
        clip_gradients(&mut grads, self.cfg.clip);

        let mut set = Self::critic_set(&self.cfg, &self.ext_params, &self.emb_params)?;
        let eta = self.cfg.eta_critic.unwrap_or(self.cfg.eta);
        self.critic_adam.step(&mut set, &grads, eta, 1.0)?;
        self.write_back(&set)?;

        let value = tape.value(loss.fmd.value).item();
        self.check_loss(value, &loss)?;
        Ok(StepRecord {
            iter: self.iter,
            phase: Phase::Critic,
            fmd: value,
            residual: loss.fmd.residual,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// One generator descent step; critic weights and the embedding (in
    /// the default ownership) stay untouched.
    pub fn generator_update(
        &mut self,
        real: &[usize],
        noise: &Tensor,
        tau: f64,
    ) -> Result<StepRecord> {
        let started = std::time::Instant::now();
        let mut tape = Tape::new();
        let loss = self
            .build_loss(&mut tape, real, noise, tau, Phase::Generator)
            .map_err(|e| self.augment_numeric(e, "generator"))?;
        let mut grads = tape.backward(loss.fmd.value)?;
        if self.cfg.embedding_owner == EmbeddingOwner::Generator {
            grads.zero_column(EMBEDDING_PARAM, textdata::PAD as usize);
        }
        clip_gradients(&mut grads, self.cfg.clip);

        let mut set = Self::generator_set(&self.cfg, &self.gen_params, &self.emb_params)?;
        self.gen_adam.step(&mut set, &grads, self.cfg.eta, -1.0)?;
        self.write_back(&set)?;

        let value = tape.value(loss.fmd.value).item();
        self.check_loss(value, &loss)?;
        Ok(StepRecord {
            iter: self.iter,
            phase: Phase::Generator,
            fmd: value,
            residual: loss.fmd.residual,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn check_loss(&self, value: f64, loss: &LossNodes) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} (cost extrema: min {}, max {})",
                loss.cost_min, loss.cost_max
            )));
        }
        Ok(())
    }

    fn augment_numeric(&self, e: Error, player: &str) -> Error {
        match e {
            Error::Numeric(msg) => Error::Numeric(format!("{player} update aborted: {msg}")),
            other => other,
        }
    }

    /// Copy updated values back into the per-component sets, re-pinning
    /// the PAD embedding column.
    fn write_back(&mut self, set: &ParamSet) -> Result<()> {
        for (name, value) in set.iter() {
            let slot = if let Some(t) = self.gen_params.get_mut(name) {
                t
            } else if let Some(t) = self.ext_params.get_mut(name) {
                t
            } else if let Some(t) = self.emb_params.get_mut(name) {
                t
            } else {
                return Err(Error::Contract(format!("write-back of unknown {name:?}")));
            };
            *slot = value.clone();
        }
        if let Some(we) = self.emb_params.get_mut(EMBEDDING_PARAM) {
            pin_pad_column(we);
        }
        Ok(())
    }

    /// The loss value on a given batch under the current parameters,
    /// with nothing updated. Diagnostic hook for the ascent/descent
    /// direction tests.
    pub fn loss_value(&self, real: &[usize], noise: &Tensor, tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.build_loss(&mut tape, real, noise, tau, Phase::Critic)?;
        Ok(tape.value(loss.fmd.value).item())
    }

    /// Run (or continue) the loop to `cfg.iters`, reporting progress.
    pub fn run(&mut self, mut observe: impl FnMut(TrainEvent)) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        while self.iter < self.cfg.iters {
            self.iter += 1;
            let tau = self.cfg.tau_at(self.iter);
            let mut last_batch: Option<(Vec<usize>, Tensor)> = None;
            for j in 1..=self.cfg.critic_steps {
                let real = self.next_batch_indices();
                let noise = self.noise_for(self.iter, j as u64);
                let rec = self.critic_update(&real, &noise, tau)?;
                observe(TrainEvent::Step(&rec));
                history.steps.push(rec);
                last_batch = Some((real, noise));
            }
            let (real, noise) = if self.cfg.reuse_batch {
                last_batch.expect("critic_steps >= 1")
            } else {
                let real = self.next_batch_indices();
                let noise = self.noise_for(self.iter, 0);
                (real, noise)
            };
            let rec = self.generator_update(&real, &noise, tau)?;
            observe(TrainEvent::Step(&rec));
            history.steps.push(rec);

            if self.iter == 10 || self.iter % self.cfg.eval_every == 0 || self.iter == self.cfg.iters
            {
                let eval = self.evaluate()?;
                observe(TrainEvent::Eval(&eval));
                history.evals.push(eval);
            }
            if self.cfg.checkpoint_every > 0 && self.iter % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = self.checkpoint_dir.clone() {
                    let path = dir.join(format!("ckpt-{:06}.ckpt", self.iter));
                    self.save_checkpoint(&path)?;
                    observe(TrainEvent::Checkpoint(&path));
                }
            }
        }
        Ok(history)
    }

    /// Held-out generator-side distance plus sample quality/diversity.
    /// Uses fixed evaluation noise and a fixed held-out batch so the
    /// numbers are comparable across evaluation points.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        let started = std::time::Instant::now();
        let n = self.cfg.batch;

        // Held-out FMD under the current parameters.
        let heldout: Vec<usize> = {
            let mut order: Vec<usize> = (0..self.data.test.len()).collect();
            order.shuffle(&mut crate::seeds::rng(self.cfg.seed, "heldout", 0, 0));
            order.truncate(n);
            order
        };
        let mut tape = Tape::new();
        let we = tape.constant(self.emb_params.get(EMBEDDING_PARAM).unwrap().clone())?;
        let ext_nodes = self.extractor.register(&mut tape, &self.ext_params, false)?;
        let gen_nodes = self.generator.register(&mut tape, &self.gen_params, false)?;
        let mut real_sentences = Vec::with_capacity(n);
        for &idx in &heldout {
            let ids = self.data.test.sequence(idx);
            real_sentences.push(textdata::embed(&mut tape, we, ids)?);
        }
        let f_real = self.extractor.extract_batch(&mut tape, &ext_nodes, &real_sentences)?;
        let eval_noise = {
            let mut rng = crate::seeds::rng(self.cfg.seed, "evalfmd", 0, 0);
            self.generator.sample_noise(n, &mut rng)
        };
        let tau = self.cfg.tau_at(self.iter.max(1));
        let soft = self
            .generator
            .generate_soft(&mut tape, &gen_nodes, we, &eval_noise, tau)?;
        let mut fake_sentences = Vec::with_capacity(n);
        for j in 0..n {
            fake_sentences.push(soft.sentence(&mut tape, j)?);
        }
        let f_fake = self.extractor.extract_batch(&mut tape, &ext_nodes, &fake_sentences)?;
        let fmd = fmd_on_tape(&mut tape, f_real, f_fake, &self.cfg.solver)?;
        let heldout_fmd = tape.value(fmd.value).item();

        // Sample pool for BLEU, fixed noise across evaluations.
        let samples = self.sample_hard(self.cfg.eval_samples)?;
        let refs = self.data.test.content_tokens();
        let strip = |s: &Vec<u32>| -> Vec<u32> {
            s.iter()
                .copied()
                .filter(|&id| id != textdata::PAD && id != textdata::BOS && id != textdata::EOS)
                .collect()
        };
        let cands: Vec<Vec<u32>> = samples.iter().map(strip).collect();
        let nonempty: Vec<Vec<u32>> = cands.iter().filter(|c| !c.is_empty()).cloned().collect();
        let (bleu2, bleu3, self_bleu2, self_bleu3) = if nonempty.len() >= 2 {
            (
                textdata::test_bleu_tokens(&nonempty, &refs, 2)?,
                textdata::test_bleu_tokens(&nonempty, &refs, 3)?,
                textdata::self_bleu_tokens(&nonempty, 2)?,
                textdata::self_bleu_tokens(&nonempty, 3)?,
            )
        } else {
            // A generator emitting only specials scores zero quality and
            // full collapse.
            (0.0, 0.0, 1.0, 1.0)
        };

        Ok(EvalRecord {
            iter: self.iter,
            heldout_fmd,
            residual: fmd.residual,
            bleu2,
            bleu3,
            self_bleu2,
            self_bleu3,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Hard-decode `count` sentences from the fixed evaluation noise
    /// streams under the current parameters.
    pub fn sample_hard(&self, count: usize) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(count);
        let mut batch_idx = 0u64;
        while out.len() < count {
            let take = (count - out.len()).min(self.cfg.batch);
            let mut rng = crate::seeds::rng(self.cfg.seed, "evalz", batch_idx, 0);
            let noise_full = self.generator.sample_noise(self.cfg.batch, &mut rng);
            let mut tape = Tape::new();
            let we = tape.constant(self.emb_params.get(EMBEDDING_PARAM).unwrap().clone())?;
            let gen_nodes = self.generator.register(&mut tape, &self.gen_params, false)?;
            let sentences = self
                .generator
                .generate_hard(&mut tape, &gen_nodes, we, &noise_full)?;
            out.extend(sentences.into_iter().take(take));
            batch_idx += 1;
        }
        Ok(out)
    }

    /// Persist parameters, optimizer state, and loop counters.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(self.cfg.seed, &self.cfg.fingerprint());
        ck.meta.insert("iter".into(), self.iter.to_string());
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("cursor".into(), self.cursor.to_string());
        for set in [&self.gen_params, &self.ext_params, &self.emb_params] {
            for (name, t) in set.iter() {
                ck.push_tensor(name, t);
            }
        }
        let mut opt = Vec::new();
        self.gen_adam.export("adam.gen", &mut opt);
        self.critic_adam.export("adam.critic", &mut opt);
        for (name, t) in &opt {
            ck.push_tensor(name, t);
        }
        ck.save(path)
    }

    /// Rebuild a trainer mid-run from a checkpoint only (no live
    /// trainer needed); continuing produces the same trajectory an
    /// uninterrupted run would have.
    pub fn resume(cfg: TrainConfig, data: TrainData, path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::load(path)?;
        let mut trainer = Trainer::new(cfg, data)?;
        let expect = trainer.cfg.fingerprint();
        if ck.meta.get("config_hash").map(|s| s.as_str()) != Some(expect.as_str()) {
            return Err(Error::Config(format!(
                "checkpoint was written by a different config (hash {:?}, expected {expect:?})",
                ck.meta.get("config_hash")
            )));
        }
        for set in [
            &mut trainer.gen_params,
            &mut trainer.ext_params,
            &mut trainer.emb_params,
        ] {
            let names: Vec<String> = set.names().map(|s| s.to_string()).collect();
            for name in names {
                let stored = ck.tensor(&name)?;
                let slot = set.get_mut(&name).unwrap();
                if stored.shape() != slot.shape() {
                    return Err(Error::Input(format!("checkpoint shape mismatch for {name:?}")));
                }
                *slot = stored.clone();
            }
        }
        trainer.gen_adam = Adam::import("adam.gen", &trainer.gen_params, &ck.tensors)?;
        let critic_set =
            Self::critic_set(&trainer.cfg, &trainer.ext_params, &trainer.emb_params)?;
        trainer.critic_adam = Adam::import("adam.critic", &critic_set, &ck.tensors)?;
        trainer.iter = ck.meta_u64("iter")? as usize;
        trainer.epoch = ck.meta_u64("epoch")?;
        trainer.cursor = ck.meta_u64("cursor")? as usize;
        trainer.order = Self::epoch_order(trainer.cfg.seed, trainer.epoch, trainer.data.train.len());
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetsConfig;
    use crate::textdata::{MarkovChain, Split};

    fn tiny_setup(seed: u64) -> (TrainConfig, TrainData) {
        let chain = MarkovChain::toy(8);
        let vocab = chain.vocab().unwrap();
        let train = chain.synth_corpus(64, 6, 100, Split::Train).unwrap();
        let test = chain.synth_corpus(32, 6, 101, Split::Test).unwrap();
        let mut cfg = TrainConfig::defaults(vocab.size(), 6, seed);
        cfg.batch = 4;
        cfg.iters = 3;
        cfg.critic_steps = 2;
        cfg.eval_every = 2;
        cfg.eval_samples = 8;
        cfg.nets = NetsConfig {
            vocab_size: vocab.size(),
            embed_dim: 8,
            hidden_dim: 10,
            noise_dim: 4,
            window_sizes: vec![2, 3],
            filters_per_window: 4,
            max_len: 6,
        };
        (cfg, TrainData { train, test, vocab })
    }

    #[test]
    fn player_parameter_sets_partition_all_leaves() {
        for owner in [EmbeddingOwner::Critic, EmbeddingOwner::Generator] {
            let (mut cfg, data) = tiny_setup(1);
            cfg.embedding_owner = owner;
            let trainer = Trainer::new(cfg, data).unwrap();
            let critic: std::collections::BTreeSet<String> =
                trainer.critic_param_names().into_iter().collect();
            let generator: std::collections::BTreeSet<String> =
                trainer.generator_param_names().into_iter().collect();
            assert!(critic.is_disjoint(&generator));
            let mut all: std::collections::BTreeSet<String> = critic.clone();
            all.extend(generator.iter().cloned());
            let expect: std::collections::BTreeSet<String> = trainer
                .gen_params
                .names()
                .chain(trainer.ext_params.names())
                .chain(trainer.emb_params.names())
                .map(|s| s.to_string())
                .collect();
            assert_eq!(all, expect);
        }
    }

    #[test]
    fn critic_update_leaves_generator_untouched_and_vice_versa() {
        let (cfg, data) = tiny_setup(2);
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let real: Vec<usize> = (0..4).collect();
        let noise = trainer.noise_for(1, 1);

        let gen_before = trainer.gen_checksum();
        trainer.critic_update(&real, &noise, 0.1).unwrap();
        assert_eq!(trainer.gen_checksum(), gen_before);

        let critic_before = trainer.critic_checksum();
        trainer.generator_update(&real, &noise, 0.1).unwrap();
        assert_eq!(trainer.critic_checksum(), critic_before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut cfg, data) = tiny_setup(3);
        cfg.eta = 0.0;
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let real: Vec<usize> = (0..4).collect();
        let noise = trainer.noise_for(1, 1);
        let critic_before = trainer.critic_checksum();
        let gen_before = trainer.gen_checksum();
        trainer.critic_update(&real, &noise, 0.1).unwrap();
        trainer.generator_update(&real, &noise, 0.1).unwrap();
        assert_eq!(trainer.critic_checksum(), critic_before);
        assert_eq!(trainer.gen_checksum(), gen_before);
    }

    #[test]
    fn small_step_moves_loss_in_the_right_direction() {
        let (mut cfg, data) = tiny_setup(4);
        cfg.eta = 1e-4;
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let real: Vec<usize> = (0..4).collect();
        let noise = trainer.noise_for(1, 1);

        let before = trainer.loss_value(&real, &noise, 0.1).unwrap();
        trainer.critic_update(&real, &noise, 0.1).unwrap();
        let after_critic = trainer.loss_value(&real, &noise, 0.1).unwrap();
        assert!(
            after_critic > before,
            "critic ascent: {before} -> {after_critic}"
        );

        trainer.generator_update(&real, &noise, 0.1).unwrap();
        let after_gen = trainer.loss_value(&real, &noise, 0.1).unwrap();
        assert!(
            after_gen < after_critic,
            "generator descent: {after_critic} -> {after_gen}"
        );
    }

    #[test]
    fn loop_structure_counts_updates() {
        let (mut cfg, data) = tiny_setup(5);
        cfg.iters = 1;
        cfg.critic_steps = 2;
        cfg.eval_every = 10;
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let history = trainer.run(|_| {}).unwrap();
        let critics = history
            .steps
            .iter()
            .filter(|s| s.phase == Phase::Critic)
            .count();
        let gens = history
            .steps
            .iter()
            .filter(|s| s.phase == Phase::Generator)
            .count();
        assert_eq!((critics, gens), (2, 1));
        // eval fires at the final iteration
        assert_eq!(history.evals.len(), 1);
    }

    #[test]
    fn logged_values_are_finite_and_in_range() {
        let (cfg, data) = tiny_setup(6);
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let history = trainer.run(|_| {}).unwrap();
        for s in &history.steps {
            assert!(s.fmd.is_finite() && (0.0..=2.0).contains(&s.fmd), "{s:?}");
            assert!(s.residual.is_finite());
        }
        let mut last = 0;
        for s in history.steps.iter().filter(|s| s.phase == Phase::Generator) {
            assert!(s.iter > last);
            last = s.iter;
        }
    }

    #[test]
    fn fixed_seed_reruns_are_bit_identical() {
        let run = || {
            let (cfg, data) = tiny_setup(7);
            let mut trainer = Trainer::new(cfg, data).unwrap();
            let history = trainer.run(|_| {}).unwrap();
            (history, trainer.gen_checksum(), trainer.critic_checksum())
        };
        let (h1, g1, c1) = run();
        let (h2, g2, c2) = run();
        assert!(h1.same_trajectory(&h2));
        assert_eq!(g1, g2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn checkpoint_resume_continues_bit_identically() {
        // One config, run to completion with a mid-run checkpoint; then
        // the same config resumed from that checkpoint must retrace the
        // remainder of the interrupted run exactly.
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, data) = tiny_setup(8);
        cfg.iters = 4;
        cfg.checkpoint_every = 2;
        let mut straight = Trainer::new(cfg.clone(), data.clone()).unwrap();
        straight.set_checkpoint_dir(dir.path());
        let full_history = straight.run(|_| {}).unwrap();
        let ckpt = dir.path().join("ckpt-000002.ckpt");
        assert!(ckpt.exists());

        let mut resumed = Trainer::resume(cfg, data, &ckpt).unwrap();
        assert_eq!(resumed.iteration(), 2);
        let tail = resumed.run(|_| {}).unwrap();

        assert_eq!(straight.gen_checksum(), resumed.gen_checksum());
        assert_eq!(straight.critic_checksum(), resumed.critic_checksum());
        let split = full_history
            .steps
            .iter()
            .position(|s| s.iter > 2)
            .unwrap();
        let expected_tail = TrainHistory {
            steps: full_history.steps[split..].to_vec(),
            evals: full_history
                .evals
                .iter()
                .filter(|e| e.iter > 2)
                .copied()
                .collect(),
        };
        assert!(expected_tail.same_trajectory(&tail));
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        let (cfg, data) = tiny_setup(9);
        let trainer = Trainer::new(cfg.clone(), data.clone()).unwrap();
        trainer.save_checkpoint(&ckpt).unwrap();
        let mut other = cfg;
        other.eta = 0.123;
        assert!(matches!(
            Trainer::resume(other, data, &ckpt),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_smaller_than_batch_is_rejected() {
        let (mut cfg, data) = tiny_setup(10);
        cfg.batch = 100;
        assert!(matches!(Trainer::new(cfg, data), Err(Error::Input(_))));
    }

    #[test]
    fn metrics_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data) = tiny_setup(11);
        let mut trainer = Trainer::new(cfg, data).unwrap();
        let history = trainer.run(|_| {}).unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,phase,fmd,residual,bleu2,bleu3,selfbleu2,selfbleu3,wall_ms"
        );
        let mut saw_eval = false;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 9, "{line}");
            if cols[1] == "eval" {
                saw_eval = true;
                assert!(!cols[4].is_empty());
            } else {
                assert!(cols[4].is_empty());
            }
        }
        assert!(saw_eval);
    }
}
