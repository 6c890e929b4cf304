//! Acceptance suite. Every test prints one `criterion N ...: PASS|FAIL` line
//! before asserting. Criteria 8–12 share one run of the disambiguation
//! ablation (`configs/disambiguation.cfg`), which takes tens of minutes on
//! a single core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use imnav::agent::*;
use imnav::dataset::{CorpusConfig, Dataset, ImaginationPolicy};
use imnav::error::Error;
use imnav::eval::{episode_result, write_tsv, MetricsRecord};
use imnav::gradcheck::{check_agent, check_inputs_smooth, GradReport};
use imnav::harness::{run_ablation, Ablation, ExperimentSpec, Verdict};
use imnav::imagination::{fidelity_check, imagine_dataset, ImaginationConfig};
use imnav::instructions::*;
use imnav::numcore::{ParamGroup, ParamStore, Tape, Tensor};
use imnav::rng;
use imnav::training::*;
use imnav::world::*;
use rand::Rng;

/// Writes past the test harness's output capture, so verdicts and suite
/// progress show up in a plain `cargo test` log.
fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict_line(n: usize, name: &str, pass: bool, detail: &str) {
    emit(&format!("criterion {n:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" }));
}

fn corpus() -> (Dataset, imnav::imagination::ImaginationSet) {
    let cfg = CorpusConfig {
        worlds: [4, 2, 2],
        episodes: [40, 20, 20],
        coarse_fraction: 0.3,
        p_landmark: 1.0,
        ..CorpusConfig::default()
    };
    let ds = Dataset::generate(&cfg, 11).unwrap();
    let set = ds.imagine(&ImaginationConfig::default(), 11).unwrap();
    (ds, set)
}

fn variants(base: &AgentConfig) -> Vec<(&'static str, AgentConfig)> {
    let mut out = vec![("early", base.clone())];
    let mut c = base.clone();
    c.encoder = EncoderKind::Transformer;
    out.push(("transformer", c));
    let mut c = base.clone();
    c.concat_target = ConcatTarget::Visual;
    out.push(("visual", c));
    let mut c = base.clone();
    c.fusion = Fusion::Late;
    out.push(("late", c));
    let mut c = base.clone();
    c.slot_source = SlotSource::TextMean;
    out.push(("text_mean", c));
    let mut c = base.clone();
    c.order_encoding = true;
    out.push(("ordered", c));
    out
}

fn numeric(e: Error) -> imnav::numcore::NumError {
    match e {
        Error::Numeric(n) => n,
        other => panic!("{other}"),
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let (ds, set) = corpus();
    let mut base = AgentConfig::new(12, ds.worlds[0].k, ds.library.d_v, ds.vocab.len());
    base.heads = 2;
    let inputs = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let live = |mode| inputs.iter().filter(move |i| !i.imaginations.is_empty() && i.episode.mode == mode).take(2);
    let picks: Vec<_> = live(Mode::Fine).chain(live(Mode::Coarse)).collect();
    let mut agent_report = GradReport::default();
    let mut agent_instances = 0;
    for (v, (_, cfg)) in variants(&base).into_iter().enumerate() {
        for (e, input) in picks.iter().enumerate() {
            let agent = Agent::new(cfg.clone(), (10 * v + e) as u64).unwrap();
            agent_report.merge(check_agent(&agent, input, 0.5, 1e-3, 3).unwrap());
            agent_instances += 1;
        }
    }

    let store = ParamStore::<f64>::new();
    let mut r = rng::seeded(12);
    let mut loss_report = GradReport::default();
    let mut loss_instances = 0;
    for trial in 0..20 {
        let (n, d) = (1 + trial % 4, 5);
        let h = Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = Tensor::new(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let owner: Vec<usize> = (0..n).map(|i| i / 2).collect();
        loss_report.merge(
            check_inputs_smooth(&store, &[h.clone(), s.clone()], 1e-3, |t, v| {
                Ok(cosine_alignment_loss(t, v[0], v[1]).map_err(numeric)?.unwrap())
            })
            .unwrap(),
        );
        loss_report.merge(
            check_inputs_smooth(&store, &[h, s], 1e-3, |t, v| Ok(infonce_loss(t, v[0], v[1], &owner, 0.5).map_err(numeric)?.unwrap()))
                .unwrap(),
        );
        loss_instances += 2;
    }
    let secs = t0.elapsed().as_secs_f64();
    let skipped = agent_report.skipped + loss_report.skipped;
    let entries = agent_report.entries + loss_report.entries;
    let pass = agent_report.max_rel_error < 1e-4
        && loss_report.max_rel_error < 1e-4
        && agent_instances >= 20
        && loss_instances >= 20
        && skipped * 20 <= entries
        && secs < 60.0;
    verdict_line(
        1,
        "gradient correctness",
        pass,
        &format!(
            "agent {agent_instances} instances max rel {:.2e}; losses {loss_instances} instances max rel {:.2e}; {skipped}/{entries} kink probes skipped; {secs:.1} s",
            agent_report.max_rel_error, loss_report.max_rel_error
        ),
    );
    assert!(pass, "agent worst {}; loss worst {}", agent_report.worst, loss_report.worst);
}

#[test]
fn criterion_02_loss_identities() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let mut input = |n: usize, d: usize, v: Vec<f64>| tape.input(Tensor::new(n, d, v).unwrap());
    let a = input(1, 3, vec![1.0, 2.0, -3.0]);
    let b = input(1, 3, vec![-2.0, 1.0, 0.0]);
    let neg = input(1, 3, vec![-0.5, -1.0, 1.5]);
    let (h2, s2) = (input(2, 3, vec![0.2, -1.0, 0.4, 1.0, 0.1, 0.0]), input(2, 3, vec![1.0, 1.0, 0.5, 1.0, 1.0, 0.5]));
    let single = (input(1, 3, vec![0.2, -1.0, 0.4]), input(1, 3, vec![1.0, 1.0, 0.0]));
    let base = input(1, 1, vec![0.75]);
    let mut errors = Vec::new();
    let mut check = |what: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            errors.push(format!("{what}: {got} vs {want}"));
        }
    };
    let cos = |tape: &mut Tape<'_, f64>, h, s| {
        let v = cosine_alignment_loss(tape, h, s).unwrap().unwrap();
        (v, tape.value(v).item())
    };
    check("identical", cos(&mut tape, a, a).1, 0.0, 1e-6);
    check("orthogonal", cos(&mut tape, a, b).1, 1.0, 1e-6);
    let (anti, x) = cos(&mut tape, a, neg);
    check("antipodal", x, 2.0, 1e-6);
    for lambda in [0.0, 0.5, 1.0, 2.5] {
        let total = total_loss(&mut tape, base, Some(anti), lambda).unwrap();
        let want = tape.value(base).item() + lambda * tape.value(anti).item();
        check("composition", tape.value(total).item(), want, 0.0);
    }
    let l = infonce_loss(&mut tape, single.0, single.1, &[0], 0.1).unwrap().unwrap();
    check("infonce singleton", tape.value(l).item(), 0.0, 1e-6);
    let l = infonce_loss(&mut tape, h2, s2, &[0, 1], 0.1).unwrap().unwrap();
    check("infonce symmetric pair", tape.value(l).item(), 2f64.ln(), 1e-6);
    let pass = errors.is_empty();
    verdict_line(2, "loss identities", pass, &if pass { "anchors 0/1/2, composition exact, InfoNCE 0 and ln 2".into() } else { errors.join("; ") });
    assert!(pass);
}

#[test]
fn criterion_03_null_imaginations_equal_removed_imaginations() {
    let (ds, set) = corpus();
    let base = AgentConfig::new(16, ds.worlds[0].k, ds.library.d_v, ds.vocab.len());
    let null = ds.inputs(Split::ValUnseen, &set, ImaginationPolicy::Null, 3).unwrap();
    let bare = ds.inputs(Split::ValUnseen, &set, ImaginationPolicy::Absent, 3).unwrap();
    let bits = |t: &Trajectory| t.logits.iter().map(|r| r.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    let (mut compared, mut mismatched) = (0, Vec::new());
    for (name, cfg) in variants(&base) {
        for seed in 0..3 {
            let agent = Agent::new(cfg.clone(), seed).unwrap();
            for (n, b) in null.iter().zip(&bare) {
                let tn = agent.run(n, DEFAULT_MAX_STEPS, false).unwrap();
                let tb = agent.run(b, DEFAULT_MAX_STEPS, false).unwrap();
                compared += 1;
                if tn.visited != tb.visited || bits(&tn) != bits(&tb) || tn.grounded_view != tb.grounded_view {
                    mismatched.push(format!("{name}/{seed}/{}", n.episode.id));
                }
            }
        }
    }
    let pass = null.len() == 20 && mismatched.is_empty();
    verdict_line(3, "masking equivalence", pass, &format!("{compared} rollouts over {} episodes, {} mismatches", null.len(), mismatched.len()));
    assert!(pass, "{mismatched:?}");
}

#[test]
fn criterion_04_metrics_match_a_brute_force_oracle() {
    let lib = LandmarkLibrary::default_with(16, 0).unwrap();
    let mut r = rng::seeded(21);
    let mut worst: f64 = 0.0;
    let mut spl_le_sr = true;
    let mut sets = 0;
    for set in 0..5 {
        let w = generate_world(&WorldConfig::default(), &lib, 0, 100 + set).unwrap();
        let n = w.len();
        let euclid = |a: usize, b: usize| {
            let (p, q) = (w.positions[a], w.positions[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let mut dist = vec![vec![f64::INFINITY; n]; n];
        for a in 0..n {
            dist[a][a] = 0.0;
            for &(_, b) in &w.views[a] {
                dist[a][b] = euclid(a, b);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    dist[i][j] = dist[i][j].min(dist[i][k] + dist[k][j]);
                }
            }
        }
        let (mut results, mut hits, mut spl_sum, mut ne_sum, mut tl_sum) = (Vec::new(), 0.0, 0.0, 0.0, 0.0);
        for i in 0..50 {
            let e = sample_episode(&w, Mode::Fine, i, r.random()).unwrap();
            let visited = if r.random_bool(0.3) {
                e.path.clone()
            } else {
                let mut v = vec![e.start];
                for _ in 0..r.random_range(0..8) {
                    let nav = &w.views[*v.last().unwrap()];
                    v.push(nav[r.random_range(0..nav.len())].1);
                }
                v
            };
            let traj = Trajectory { visited: visited.clone(), actions: vec![Action::Stop], logits: Vec::new(), grounded_view: None, truncated: false, attention: None };
            results.push(episode_result(&w, &e, &traj, 1.0).unwrap());
            let ne = euclid(*visited.last().unwrap(), e.goal);
            let tl: f64 = visited.windows(2).map(|p| euclid(p[0], p[1])).sum();
            let l = dist[e.start][e.goal];
            if ne <= 1.0 {
                hits += 1.0;
                spl_sum += l / tl.max(l);
            }
            ne_sum += ne;
            tl_sum += tl;
        }
        let m = MetricsRecord::aggregate(&results, "x", Split::ValSeen, ImaginationPolicy::Absent, 0).unwrap();
        for (got, want) in [(m.sr, hits / 50.0), (m.spl, spl_sum / 50.0), (m.ne, ne_sum / 50.0), (m.tl, tl_sum / 50.0)] {
            worst = worst.max((got - want).abs());
        }
        spl_le_sr &= m.spl <= m.sr;
        sets += 1;
    }
    let pass = worst <= 1e-9 && spl_le_sr;
    verdict_line(4, "metric oracle equivalence", pass, &format!("{sets} sets × 50 trajectories, max abs diff {worst:.1e}, SPL ≤ SR: {spl_le_sr}"));
    assert!(pass);
}

#[test]
fn criterion_05_filter_pipeline() {
    let ds = Dataset::generate(&CorpusConfig::default(), 3).unwrap();
    let (mut matched, mut kept_ok) = (0, 0);
    for ins in &ds.instructions {
        matched += usize::from(segment(&ins.tokens, &ds.templates) == ins.gold_segments);
        let subs = sub_instructions(ins, &ds.templates, &ds.lexicon);
        let kept: Vec<usize> = filter_sub_instructions(&subs, &ds.lexicon).iter().map(|s| s.index).collect();
        let landmark: Vec<usize> = (0..ins.gold_classes.len()).filter(|&i| ins.gold_classes[i].is_some()).collect();
        kept_ok += usize::from(kept == landmark);
    }
    let lexicon = FilterLexicon::default_with(&ds.library).unwrap();
    let verdicts = |text: &str| {
        let t = tokenize(text);
        segment(&t, &ds.templates).into_iter().enumerate().map(|(i, s)| analyze_span(&t, s, i, &lexicon).verdict).collect::<Vec<_>>()
    };
    let cases = [
        verdicts("go straight then left").iter().all(|v| *v != imnav::instructions::Verdict::Kept),
        verdicts("turn left") == [imnav::instructions::Verdict::Blacklisted],
        verdicts("walk toward it") == [imnav::instructions::Verdict::Blacklisted],
        verdicts("walk past the pool table") == [imnav::instructions::Verdict::Kept],
    ];
    let n = ds.instructions.len();
    let pass = matched == n && kept_ok == n && cases.iter().all(|&c| c);
    verdict_line(
        5,
        "filter pipeline",
        pass,
        &format!("segmentation {matched}/{n} gold, kept = landmark {kept_ok}/{n}, filter cases {}/4", cases.iter().filter(|&&c| c).count()),
    );
    assert!(pass);
}

#[test]
fn criterion_06_fidelity_calibration() {
    let t0 = Instant::now();
    let lib = LandmarkLibrary::default_with(32, 6).unwrap();
    let sub = |index: usize, class: usize| SubInstruction {
        index,
        span: (0, 1),
        tokens: vec!["x".into()],
        noun_phrases: vec![(0, 1)],
        landmark_class: Some(class),
        verdict: imnav::instructions::Verdict::Kept,
    };
    let kept: BTreeMap<usize, Vec<SubInstruction>> =
        (0..2500).map(|i| (i, (0..4).map(|s| sub(s, (i * 4 + s) % lib.len())).collect())).collect();
    let set = imagine_dataset(&kept, &lib, &ImaginationConfig { sigma_gen: 0.05, fidelity: 0.95 }, 7).unwrap();
    let report = fidelity_check(&set, &lib).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = report.imaginations == 10_000 && (report.detected - 0.95).abs() <= 0.02 && secs < 30.0;
    verdict_line(6, "fidelity calibration", pass, &format!("{} imaginations, detected {:.2}%, {secs:.1} s", report.imaginations, 100.0 * report.detected));
    assert!(pass);
}

#[test]
fn criterion_07_schedule_conformance() {
    let s = StageSchedule { multiplier: 1.0, ..StageSchedule::default() };
    let n = 100_000;
    let rates = |i| {
        let (stage, r) = s.rates(i, n).unwrap();
        (stage, r.imagination_encoder, r.type_embedding, r.base)
    };
    let schedule_ok = rates(0) == (1, 1e-4, 1e-4, 0.0)
        && rates(10_000) == (1, 1e-4, 1e-4, 0.0)
        && rates(24_999) == (1, 1e-4, 1e-4, 0.0)
        && rates(25_000) == (2, 5e-5, 5e-5, 1e-6)
        && rates(30_000) == (2, 5e-5, 5e-5, 1e-6)
        && rates(50_000) == (3, 1e-6, 1e-6, 1e-6)
        && rates(99_999) == (3, 1e-6, 1e-6, 1e-6);
    let m = StageSchedule { multiplier: 7.0, ..StageSchedule::default() };
    let scaled = m.rates(30_000, n).unwrap().1;
    let multiplier_ok = scaled.imagination_encoder == 7.0 * 5e-5 && scaled.base == 7.0 * 1e-6;

    let cfg = CorpusConfig { worlds: [3, 1, 1], episodes: [50, 10, 10], p_landmark: 1.0, ..CorpusConfig::default() };
    let ds = Dataset::generate(&cfg, 4).unwrap();
    let set = ds.imagine(&ImaginationConfig::default(), 4).unwrap();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let agent = Agent::new(AgentConfig::new(16, ds.worlds[0].k, ds.library.d_v, ds.vocab.len()), 1).unwrap();
    let init = agent.params.clone();
    let mut t = Trainer::new(agent, TrainConfig { iterations: 40, batch: 4, seed: 3, ..TrainConfig::default() }).unwrap();
    t.run_until(&data, &[], 10, &mut Vec::new()).unwrap();
    let (mut base_moved, mut others_moved) = (0, 0);
    for ((_, a), (_, b)) in init.iter().zip(t.agent.params.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        match a.group {
            ParamGroup::Base => base_moved += usize::from(!same),
            _ => others_moved += usize::from(!same),
        }
    }
    let pass = schedule_ok && multiplier_ok && base_moved == 0 && others_moved > 0;
    verdict_line(
        7,
        "schedule conformance",
        pass,
        &format!("stage rates {schedule_ok}, multiplier {multiplier_ok}; first 25%: {base_moved} base tensors moved, {others_moved} imagination tensors moved"),
    );
    assert!(pass);
}

struct Suite {
    spec: ExperimentSpec,
    ablation: Ablation,
    metrics: Vec<u8>,
}

fn suite_spec() -> ExperimentSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/disambiguation.cfg");
    ExperimentSpec::parse(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn run_suite(spec: &ExperimentSpec) -> (Ablation, Vec<u8>) {
    let t0 = Instant::now();
    let ablation = run_ablation(spec, &mut |line| emit(&format!("[{:.0} s] {line}", t0.elapsed().as_secs_f64()))).unwrap();
    let mut metrics = Vec::new();
    write_tsv(&mut metrics, &ablation.records).unwrap();
    emit(&format!("ablation finished in {:.1} min", t0.elapsed().as_secs_f64() / 60.0));
    (ablation, metrics)
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let spec = suite_spec();
        let (ablation, metrics) = run_suite(&spec);
        emit(&imnav::harness::summary_table(&ablation.summary));
        Suite { spec, ablation, metrics }
    })
}

fn verdict(name: &str) -> &'static Verdict {
    suite()
        .ablation
        .verdicts
        .iter()
        .find(|v| v.hypothesis.name == name)
        .unwrap_or_else(|| panic!("no verdict for {name}"))
}

fn ordering(n: usize, title: &str, names: &[&str]) {
    let s = suite();
    assert!(s.spec.seeds.len() >= 5);
    let vs: Vec<&Verdict> = names.iter().map(|n| verdict(n)).collect();
    let pass = vs.iter().all(|v| v.pass);
    let detail = vs.iter().map(|v| v.to_string().trim_start_matches("hypothesis ").to_string()).collect::<Vec<_>>().join("; ");
    verdict_line(n, title, pass, &format!("{} seeds, {}: {detail}", s.spec.seeds.len(), s.spec.verdict_split));
    assert!(pass, "{detail}");
}

#[test]
fn criterion_08_imagination_beats_the_baseline() {
    ordering(8, "main effect", &["imagine>baseline"]);
}

#[test]
fn criterion_09_correct_beats_null_and_wrong() {
    ordering(9, "role of imaginations", &["correct>=null", "correct>=wrong", "correct>wrong"]);
}

#[test]
fn criterion_10_sequential_beats_goal_only() {
    ordering(10, "sequential vs goal-only", &["sequential>goal_only", "goal_only>=baseline"]);
}

#[test]
fn criterion_11_loss_ablation_direction() {
    ordering(11, "loss ablation", &["cosine>=no_aux", "infonce~cosine"]);
}

#[test]
fn criterion_12_ablation_is_deterministic_end_to_end() {
    let first = suite();
    let (_, again) = run_suite(&first.spec);
    let pass = again == first.metrics;
    verdict_line(12, "end-to-end determinism", pass, &format!("two runs, {} metric bytes each, identical: {pass}", first.metrics.len()));
    assert!(pass);
}

#[test]
fn criterion_13_checkpoint_round_trip_resumes_bitwise() {
    let (ds, set) = corpus();
    let data = ds.inputs(Split::Train, &set, ImaginationPolicy::Correct, 0).unwrap();
    let val = ds.inputs(Split::ValSeen, &set, ImaginationPolicy::Correct, 0).unwrap();
    let mut all_equal = true;
    let mut cases = Vec::new();
    for aux_loss in [AuxLoss::Cosine, AuxLoss::InfoNce] {
        let cfg = TrainConfig { iterations: 24, batch: 4, seed: 9, eval_interval: 6, aux_loss, ..TrainConfig::default() };
        let fresh = || Agent::new(AgentConfig::new(16, ds.worlds[0].k, ds.library.d_v, ds.vocab.len()), 2).unwrap();
        let (full, full_curves) = train(fresh(), &data, &val, &cfg).unwrap();
        // Interrupt inside stage 2.
        let mut t = Trainer::new(fresh(), cfg).unwrap();
        let mut curves = Vec::new();
        t.run_until(&data, &val, 9, &mut curves).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        t.checkpoint().save(&path).unwrap();
        drop(t);
        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        resumed.run_until(&data, &val, 24, &mut curves).unwrap();
        let params_equal = full.agent.params.iter().zip(resumed.agent.params.iter()).all(|((_, a), (_, b))| {
            a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let equal = params_equal && curves == full_curves && resumed.checkpoint().to_bytes() == full.to_bytes();
        all_equal &= equal;
        cases.push(format!("{aux_loss}: {}", if equal { "bitwise equal" } else { "differs" }));
    }
    verdict_line(13, "checkpoint round trip", all_equal, &format!("save at 9 of 24, resume; {}", cases.join(", ")));
    assert!(all_equal);
}
