use mixfill_core::config::{CorpusSpec, TrainConfig};
use mixfill_core::data::Corpus;
use mixfill_core::train::{batch_indices, train_step, Trainer};

#[test]
fn step_timing() {
    let spec = CorpusSpec { n_train: 64, n_test: 4, ..Default::default() };
    let corpus = Corpus::generate(&spec).unwrap();
    let cfg = TrainConfig::default();
    let mut tr = Trainer::new(&cfg, &corpus).unwrap();
    // warmup
    for step in 0..3 {
        let idx = batch_indices(&cfg, corpus.train().len(), step);
        let batch: Vec<_> = idx.iter().map(|&i| &corpus.train()[i]).collect();
        train_step(&mut tr.params, &mut tr.opt, &batch, &cfg, &mut tr.rng, step).unwrap();
    }
    let n = 20;
    let t0 = std::time::Instant::now();
    for step in 3..3 + n {
        let idx = batch_indices(&cfg, corpus.train().len(), step);
        let batch: Vec<_> = idx.iter().map(|&i| &corpus.train()[i]).collect();
        train_step(&mut tr.params, &mut tr.opt, &batch, &cfg, &mut tr.rng, step).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / n as f64;
    eprintln!("per-step: {:.1} ms  -> 20k steps = {:.1} min", per_step * 1e3, per_step * 20000.0 / 60.0);
    panic!("timing printed");
}
