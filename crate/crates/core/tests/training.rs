use imnav::agent::*;
use imnav::dataset::{CorpusConfig, Dataset, ImaginationPolicy};
use imnav::error::Error;
use imnav::gradcheck::{check_inputs_smooth, GradReport};
use imnav::imagination::ImaginationConfig;
use imnav::numcore::{ParamGroup, ParamStore, Tape, Tensor, Var};
use imnav::rng;
use imnav::training::*;
use imnav::world::Split;
use rand::Rng;

fn scalar(tape: &Tape<'_, f64>, v: Var) -> f64 {
    tape.value(v).item()
}

fn rows(tape: &mut Tape<'_, f64>, n: usize, d: usize, data: Vec<f64>) -> Var {
    tape.input(Tensor::new(n, d, data).unwrap())
}

#[test]
fn imitation_loss_anchor_cases() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let sat: Vec<Var> = (0..3).map(|t| rows(&mut tape, 1, 4, (0..4).map(|j| if j == t { 1000.0 } else { 0.0 }).collect())).collect();
    let l = imitation_loss(&mut tape, &sat, &[0, 1, 2]).unwrap();
    assert!(scalar(&tape, l).abs() < 1e-9);
    let uni: Vec<Var> = (0..2).map(|_| rows(&mut tape, 1, 4, vec![0.3; 4])).collect();
    let l = imitation_loss(&mut tape, &uni, &[3, 1]).unwrap();
    assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);
    assert!(matches!(imitation_loss(&mut tape, &uni, &[1]), Err(Error::Contract(_))));
}

#[test]
fn imitation_loss_matches_a_stepwise_oracle() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let mut r = rng::seeded(5);
    let widths = [3, 5, 2];
    let targets = [2, 0, 1];
    let mut oracle = 0.0;
    let mut logits = Vec::new();
    for (&w, &t) in widths.iter().zip(&targets) {
        let x: Vec<f64> = (0..w).map(|_| r.random_range(-3.0..3.0)).collect();
        let lse = x.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - x[t];
        logits.push(rows(&mut tape, 1, w, x));
    }
    let l = imitation_loss(&mut tape, &logits, &targets).unwrap();
    assert!((scalar(&tape, l) - oracle / 3.0).abs() < 1e-6);
}

#[test]
fn cosine_alignment_anchor_cases() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let cases = [
        (vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0], 0.0),
        (vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0], vec![0.0, 3.0, 0.0, 0.0, 0.0, 1.0], 1.0),
        (vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0], vec![-1.0, -2.0, -3.0, 1.0, -0.5, -2.0], 2.0),
        (vec![1.0, 2.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 2.0, 0.0, 0.0, 5.0, 0.0], 0.5),
    ];
    for (h, s, want) in cases {
        let h = rows(&mut tape, 2, 3, h);
        let s = rows(&mut tape, 2, 3, s);
        let l = cosine_alignment_loss(&mut tape, h, s).unwrap().unwrap();
        assert!((scalar(&tape, l) - want).abs() < 1e-6, "want {want}");
    }
    let e = rows(&mut tape, 0, 3, vec![]);
    assert!(cosine_alignment_loss(&mut tape, e, e).unwrap().is_none());
    let a = rows(&mut tape, 1, 3, vec![1.0; 3]);
    let b = rows(&mut tape, 1, 2, vec![1.0; 2]);
    assert!(matches!(cosine_alignment_loss(&mut tape, a, b), Err(Error::Contract(_))));
    let z = rows(&mut tape, 1, 3, vec![0.0; 3]);
    assert!(matches!(cosine_alignment_loss(&mut tape, a, z), Err(Error::Numeric(_))));
}

#[test]
fn infonce_anchor_cases() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let h = rows(&mut tape, 1, 3, vec![0.2, -1.0, 0.4]);
    let s = rows(&mut tape, 1, 3, vec![1.0, 1.0, 0.0]);
    let l = infonce_loss(&mut tape, h, s, &[0], 0.1).unwrap().unwrap();
    assert!(scalar(&tape, l).abs() < 1e-12);
    // Two instructions whose phrase embeddings coincide: positive and
    // negative similarities are equal for every imagination.
    let h = rows(&mut tape, 2, 3, vec![0.2, -1.0, 0.4, 1.0, 0.1, 0.0]);
    let s = rows(&mut tape, 2, 3, vec![1.0, 1.0, 0.5, 1.0, 1.0, 0.5]);
    let l = infonce_loss(&mut tape, h, s, &[0, 1], 0.1).unwrap().unwrap();
    assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-6);
    // Rows of one instruction are never negatives for each other.
    let l = infonce_loss(&mut tape, h, s, &[4, 4], 0.1).unwrap().unwrap();
    assert!(scalar(&tape, l).abs() < 1e-12);
    assert!(matches!(infonce_loss(&mut tape, h, s, &[0, 1], 0.0), Err(Error::Config(_))));
    assert!(matches!(infonce_loss(&mut tape, h, s, &[0], 0.1), Err(Error::Contract(_))));
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn infonce_with_three_negatives_matches_the_direct_formula() {
    let store = ParamStore::<f64>::new();
    let mut r = rng::seeded(8);
    for tau in [0.1, 0.5, 1.0] {
        let (n, d) = (4, 6);
        let hd: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let sd: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let hi = &hd[i * d..(i + 1) * d];
            let sims: Vec<f64> = (0..n).map(|j| cos(hi, &sd[j * d..(j + 1) * d]) / tau).collect();
            let m = sims.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            oracle += lse - sims[i];
        }
        oracle /= n as f64;
        let mut tape = Tape::new(&store);
        let h = rows(&mut tape, n, d, hd);
        let s = rows(&mut tape, n, d, sd);
        let l = infonce_loss(&mut tape, h, s, &[0, 1, 2, 3], tau).unwrap().unwrap();
        assert!((scalar(&tape, l) - oracle).abs() < 1e-6, "tau {tau}");
        assert!(scalar(&tape, l) >= 0.0);
    }
}

#[test]
fn alignment_losses_stay_in_range_and_match_finite_differences() {
    let store = ParamStore::<f64>::new();
    let mut r = rng::seeded(12);
    let mut total = GradReport::default();
    for trial in 0..20 {
        let (n, d) = (1 + trial % 4, 5);
        let h = Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let owner: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let cosr = check_inputs_smooth(&store, &[h.clone(), s.clone()], 1e-3, |t, v| {
            let l = cosine_alignment_loss(t, v[0], v[1]).map_err(|e| match e {
                Error::Numeric(n) => n,
                other => panic!("{other}"),
            })?;
            let l = l.unwrap();
            let x = t.value(l).item();
            assert!((0.0..=2.0).contains(&x));
            Ok(l)
        })
        .unwrap();
        assert!(cosr.max_rel_error < 1e-4, "cosine: {}", cosr.worst);
        let nce = check_inputs_smooth(&store, &[h, s], 1e-3, |t, v| {
            let l = infonce_loss(t, v[0], v[1], &owner, 0.5).unwrap().unwrap();
            assert!(t.value(l).item() >= 0.0);
            Ok(l)
        })
        .unwrap();
        assert!(nce.max_rel_error < 1e-4, "infonce: {}", nce.worst);
        total.merge(cosr);
        total.merge(nce);
    }
    assert!(total.skipped * 20 <= total.entries, "{} of {} probes skipped", total.skipped, total.entries);
}

#[test]
fn total_loss_composition() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let base = tape.input(Tensor::scalar(1.0));
    let aux = tape.input(Tensor::scalar(0.5));
    let t = total_loss(&mut tape, base, Some(aux), 0.5).unwrap();
    assert_eq!(scalar(&tape, t), 1.25);
    let t = total_loss(&mut tape, base, Some(aux), 0.0).unwrap();
    assert_eq!(scalar(&tape, t), 1.0);
    assert_eq!(total_loss(&mut tape, base, None, 0.5).unwrap(), base);
    assert!(matches!(total_loss(&mut tape, base, Some(aux), -1.0), Err(Error::Config(_))));
}

#[test]
fn schedule_matches_the_staged_routine() {
    let s = StageSchedule { multiplier: 1.0, ..StageSchedule::default() };
    let n = 100_000;
    let (stage, r) = s.rates(10_000, n).unwrap();
    assert_eq!((stage, r.imagination_encoder, r.type_embedding, r.base), (1, 1e-4, 1e-4, 0.0));
    assert_eq!(r.frozen_groups(), vec![ParamGroup::Base]);
    let (stage, r) = s.rates(30_000, n).unwrap();
    assert_eq!((stage, r.imagination_encoder, r.type_embedding, r.base), (2, 5e-5, 5e-5, 1e-6));
    let (stage, r) = s.rates(80_000, n).unwrap();
    assert_eq!((stage, r.imagination_encoder, r.type_embedding, r.base), (3, 1e-6, 1e-6, 1e-6));
    assert_eq!(s.boundaries(n), (25_000, 50_000));
    assert_eq!(s.rates(24_999, n).unwrap().0, 1);
    assert_eq!(s.rates(25_000, n).unwrap().0, 2);
    assert_eq!(s.rates(50_000, n).unwrap().0, 3);
    assert!(matches!(s.rates(n, n), Err(Error::Contract(_))));
    let m = StageSchedule::default();
    assert_eq!(m.rates(10_000, n).unwrap().1.imagination_encoder, m.multiplier * 1e-4);
    let bad = StageSchedule { fractions: [0.5, 0.5, 0.5], ..StageSchedule::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

fn tiny() -> (Dataset, imnav::imagination::ImaginationSet) {
    let cfg = CorpusConfig { worlds: [3, 1, 1], episodes: [50, 10, 10], p_landmark: 1.0, ..CorpusConfig::default() };
    let ds = Dataset::generate(&cfg, 4).unwrap();
    let set = ds.imagine(&ImaginationConfig::default(), 4).unwrap();
    (ds, set)
}

fn agent_config(ds: &Dataset) -> AgentConfig {
    AgentConfig::new(16, ds.worlds[0].k, ds.library.d_v, ds.vocab.len())
}

fn train_config(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, batch: 4, seed: 3, ..TrainConfig::default() }
}

#[test]
fn stage_one_leaves_base_parameters_bitwise_unchanged() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let agent = Agent::new(agent_config(&ds), 1).unwrap();
    let init = agent.params.clone();
    let cfg = train_config(40);
    let mut t = Trainer::new(agent, cfg).unwrap();
    let mut curves = Vec::new();
    t.run_until(&data, &[], 10, &mut curves).unwrap();
    let mut moved = 0;
    for ((_, a), (_, b)) in init.iter().zip(t.agent.params.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        match a.group {
            ParamGroup::Base => assert!(same, "{} moved in stage 1", a.name),
            _ => moved += usize::from(!same),
        }
    }
    assert!(moved > 0);
    // Stage 2 moves the base.
    t.run_until(&data, &[], 11, &mut curves).unwrap();
    assert!(init.iter().zip(t.agent.params.iter()).any(|((_, a), (_, b))| a.group == ParamGroup::Base && a.value != b.value));
}

#[test]
fn loss_breakdown_composes_exactly() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    for aux in [AuxLoss::Cosine, AuxLoss::InfoNce, AuxLoss::None] {
        let cfg = TrainConfig { aux_loss: aux, ..train_config(8) };
        let w = cfg.aux_weight();
        let mut t = Trainer::new(Agent::new(agent_config(&ds), 1).unwrap(), cfg).unwrap();
        for _ in 0..4 {
            let b = t.step(&data).unwrap();
            assert_eq!(b.total, b.l_base + w * b.l_aux);
            if aux == AuxLoss::None {
                assert_eq!((b.l_aux, b.total), (0.0, b.l_base));
            } else {
                assert!(b.n_im > 0);
                assert!(b.l_aux >= 0.0);
            }
        }
    }
}

#[test]
fn auxiliary_term_can_start_after_stage_one() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let cfg = TrainConfig { aux_from_stage: 2, ..train_config(8) };
    let w = cfg.aux_weight();
    let mut t = Trainer::new(Agent::new(agent_config(&ds), 1).unwrap(), cfg).unwrap();
    let mut stages = [0; 3];
    for _ in 0..8 {
        let b = t.step(&data).unwrap();
        stages[b.stage - 1] += 1;
        let expected = if b.stage == 1 { b.l_base } else { b.l_base + w * b.l_aux };
        assert_eq!(b.total, expected);
    }
    assert!(stages.iter().all(|&n| n > 0));
    for bad in ["0", "4"] {
        let mut c = train_config(8);
        c.set("aux_from_stage", bad).unwrap();
        assert!(c.validate().is_err());
    }
}

#[test]
fn alignment_gradients_stay_on_the_alignment_paths() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let input = data.iter().find(|i| !i.imaginations.is_empty()).unwrap();
    let agent = Agent::new(agent_config(&ds), 2).unwrap();
    let mut tape = Tape::new(&agent.params);
    let r = rollout_on_tape(&mut tape, &agent.config, agent.ids(), input, RolloutMode::Teacher, 15, false, &mut rng::seeded(0))
        .unwrap();
    let (h, s) = (r.context.slots.unwrap(), r.context.noun_means.unwrap());
    let l = cosine_alignment_loss(&mut tape, h, s).unwrap().unwrap();
    let g = tape.backward(l).unwrap();
    let on_path = ["word_emb", "text.", "im."];
    for (id, p) in agent.params.iter() {
        let nonzero = g.param(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
        if !on_path.iter().any(|pre| p.name.starts_with(pre)) {
            assert!(!nonzero, "{} receives alignment gradient", p.name);
        }
    }
    for name in ["im.type", "im.proj", "im.mlp1", "word_emb"] {
        let id = agent.params.id(name).unwrap();
        assert!(g.param(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)), "{name}");
    }
}

#[test]
fn imagination_free_training_is_the_baseline_trace() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Absent, 0).unwrap();
    let cfg = TrainConfig { aux_loss: AuxLoss::None, lambda: 0.0, ..train_config(12) };
    let base_cfg = agent_config(&ds);
    let mut late = base_cfg.clone();
    late.fusion = Fusion::Late;
    late.encoder = EncoderKind::Transformer;
    let (a, ca) = train(Agent::new(base_cfg, 6).unwrap(), &data, &[], &cfg).unwrap();
    let (b, cb) = train(Agent::new(late, 6).unwrap(), &data, &[], &cfg).unwrap();
    assert_eq!(ca, cb);
    for (_, p) in a.agent.params.iter().filter(|(_, p)| p.group == ParamGroup::Base) {
        assert_eq!(p.value, b.agent.params.by_name(&p.name).unwrap().value, "{}", p.name);
    }
}

#[test]
fn training_reduces_the_loss_on_a_small_corpus() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    assert_eq!(data.len(), 50);
    let cfg = TrainConfig { schedule: Schedule::Constant(3e-3), batch: 8, ..train_config(2000) };
    let (_, curves) = train(Agent::new(agent_config(&ds), 0).unwrap(), &data, &[], &cfg).unwrap();
    let mean = |c: &[CurvePoint]| c.iter().map(|p| p.l_base).sum::<f64>() / c.len() as f64;
    let (first, last) = (mean(&curves[..100]), mean(&curves[curves.len() - 100..]));
    assert!(last <= 0.5 * first, "first {first}, last {last}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let run = || train(Agent::new(agent_config(&ds), 0).unwrap(), &data, &[], &train_config(6)).unwrap().0.to_bytes();
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let val = ds.inputs(Split::ValSeen, &set, ImaginationPolicy::Correct, 0).unwrap();
    let cfg = TrainConfig { eval_interval: 4, ..train_config(16) };
    let (full, full_curves) = train(Agent::new(agent_config(&ds), 0).unwrap(), &data, &val, &cfg).unwrap();

    let mut t = Trainer::new(Agent::new(agent_config(&ds), 0).unwrap(), cfg).unwrap();
    let mut curves = Vec::new();
    t.run_until(&data, &val, 7, &mut curves).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), t.checkpoint().to_bytes());
    assert_eq!(loaded.iteration, 7);
    let mut resumed = Trainer::from_checkpoint(loaded).unwrap();
    resumed.run_until(&data, &val, 16, &mut curves).unwrap();
    assert_eq!(curves, full_curves);
    assert_eq!(resumed.checkpoint().to_bytes(), full.to_bytes());
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let (ds, _) = tiny();
    let ck = Trainer::new(Agent::new(agent_config(&ds), 0).unwrap(), train_config(4)).unwrap().checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..5], MAGIC);
    assert_eq!(bytes[5], VERSION);
    let mut bad = bytes.clone();
    bad[0] ^= 0x20;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[5] = VERSION + 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")), Err(Error::Io(_))));
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let (ds, set) = tiny();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let mut agent = Agent::new(agent_config(&ds), 0).unwrap();
    agent.params.by_name_mut("act.stop").unwrap().value.data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(agent, train_config(4)).unwrap();
    match t.step(&data) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("iteration 0")),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn train_config_round_trips_through_key_values() {
    let mut cfg = TrainConfig { aux_loss: AuxLoss::InfoNce, tau: 0.5, word_dropout: 0.25, ..TrainConfig::default() };
    cfg.set("lr_multiplier", "4").unwrap();
    let mut back = TrainConfig::default();
    for (k, v) in cfg.to_kv() {
        back.set(&k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(matches!(TrainConfig { tau: 0.0, ..TrainConfig::default() }.validate(), Err(Error::Config(_))));
    assert!(back.set("bogus", "1").is_err());
}
