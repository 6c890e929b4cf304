//! Episode-level parallelism: greedy rollouts over a split through `par::map`
//! against a plain sequential loop, and one training step (which uses
//! `par::map` internally; run with `--no-default-features` for the
//! sequential build).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use imnav::agent::{Agent, AgentConfig, DEFAULT_MAX_STEPS};
use imnav::dataset::{CorpusConfig, Dataset, ImaginationPolicy};
use imnav::imagination::ImaginationConfig;
use imnav::par;
use imnav::training::{TrainConfig, Trainer};
use imnav::world::Split;

fn setup() -> (Dataset, imnav::imagination::ImaginationSet) {
    let cfg = CorpusConfig { worlds: [4, 1, 2], episodes: [64, 8, 64], d_v: 16, p_landmark: 1.0, ..CorpusConfig::default() };
    let ds = Dataset::generate(&cfg, 1).unwrap();
    let set = ds.imagine(&ImaginationConfig::default(), 1).unwrap();
    (ds, set)
}

fn rollouts(c: &mut Criterion) {
    let (ds, set) = setup();
    let agent = Agent::new(AgentConfig::new(32, ds.worlds[0].k, ds.library.d_v, ds.vocab.len()), 1).unwrap();
    let inputs = ds.inputs(Split::ValUnseen, &set, ImaginationPolicy::Correct, 0).unwrap();
    let mut g = c.benchmark_group("rollouts");
    g.sample_size(10);
    g.bench_function("par_map", |b| {
        b.iter(|| black_box(par::map(&inputs, |x| agent.run(x, DEFAULT_MAX_STEPS, false).unwrap())))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(inputs.iter().map(|x| agent.run(x, DEFAULT_MAX_STEPS, false).unwrap()).collect::<Vec<_>>()))
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (ds, set) = setup();
    let agent = Agent::new(AgentConfig::new(32, ds.worlds[0].k, ds.library.d_v, ds.vocab.len()), 1).unwrap();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let config = TrainConfig { batch: 16, iterations: usize::MAX, ..TrainConfig::default() };
    let mut trainer = Trainer::new(agent, config).unwrap();
    let name = if par::is_parallel() { "step_rayon" } else { "step_sequential" };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function(name, |b| b.iter(|| black_box(trainer.step(&data).unwrap())));
    g.finish();
}

criterion_group!(benches, rollouts, train_step);
criterion_main!(benches);
