use featmover_core::textdata::{bigram_tv, MarkovChain, Split};
use featmover_core::train::{EmbeddingOwner, TrainConfig, TrainData, TrainEvent, Trainer};

fn run_one(tag: &str, tweak: impl Fn(&mut TrainConfig)) {
    let chain = MarkovChain::toy(20);
    let vocab = chain.vocab().unwrap();
    let train = chain.synth_corpus(10_000, 12, 1, Split::Train).unwrap();
    let test = chain.synth_corpus(1_000, 12, 2, Split::Test).unwrap();
    let mut cfg = TrainConfig::defaults(vocab.size(), 12, 42);
    cfg.iters = 500;
    cfg.eval_every = 125;
    tweak(&mut cfg);
    let mut trainer = Trainer::new(cfg, TrainData { train, test, vocab: vocab.clone() }).unwrap();
    let u = trainer.evaluate().unwrap();
    let t0 = std::time::Instant::now();
    let mut evs = vec![];
    let _ = trainer.run(|e| { if let TrainEvent::Eval(ev) = e { evs.push((ev.iter, ev.heldout_fmd, ev.bleu2, ev.self_bleu2)); } }).unwrap();
    let samples = trainer.sample_hard(500).unwrap();
    let tv = bigram_tv(&chain, &vocab, &samples, 12).unwrap();
    let evstr: Vec<String> = evs.iter().map(|(i, f, b, s)| format!("{i}:fmd{f:.3},b2 {b:.3},s2 {s:.3}")).collect();
    println!("[{tag}] t={:.0}s untrained_b2={:.3} | {} | TV={tv:.3}", t0.elapsed().as_secs_f64(), u.bleu2, evstr.join(" | "));
}

#[test]
fn sweep() {
    run_one("J1_eta5e-4", |c| { c.critic_steps = 1; c.eta = 5e-4; });
    run_one("J1_eta5e-4_genWE", |c| { c.critic_steps = 1; c.eta = 5e-4; c.embedding_owner = EmbeddingOwner::Generator; });
    run_one("J1_eta5e-4_anneal", |c| { c.critic_steps = 1; c.eta = 5e-4; c.tau = 0.3; c.tau_anneal = true; c.tau_end = 0.03; });
    run_one("J5_eta5e-4", |c| { c.eta = 5e-4; });
    run_one("J1_eta1e-3", |c| { c.critic_steps = 1; c.eta = 1e-3; });
}
