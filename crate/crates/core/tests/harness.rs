use imnav::dataset::Dataset;
use imnav::error::Error;
use imnav::eval::{write_tsv, MetricsRecord};
use imnav::harness::*;
use imnav::world::Split;

const TINY: &str = "\
# two conditions, one seed
[experiment]
name = tiny
splits = val_seen, val_unseen

[corpus]
worlds.train = 2
worlds.val_seen = 1
worlds.val_unseen = 1
episodes.train = 16
episodes.val_seen = 8
episodes.val_unseen = 8
p_landmark = 1
d_v = 16

[agent]
d = 16

[pretrain]
iterations = 12
batch = 4

[train]
iterations = 12
batch = 4

[ablation]
conditions = baseline, imagine, null_test, wrong_test
seeds = 3
";

fn tiny() -> ExperimentSpec {
    ExperimentSpec::parse(TINY).unwrap()
}

#[test]
fn spec_text_round_trips() {
    let spec = tiny();
    assert_eq!(spec.name, "tiny");
    assert_eq!(spec.seeds, vec![3]);
    assert_eq!(spec.corpus.d_v, 16);
    assert_eq!(ExperimentSpec::parse(&spec.to_text()).unwrap(), spec);
    let default = ExperimentSpec::default();
    assert_eq!(ExperimentSpec::parse(&default.to_text()).unwrap(), default);
}

#[test]
fn spec_errors_name_the_line() {
    let line_of = |text: &str| match ExperimentSpec::parse(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    };
    assert_eq!(line_of("[experiment]\nname = x\nbogus = 1\n"), 3);
    assert_eq!(line_of("[agent]\nk = 8\n"), 2);
    assert_eq!(line_of("[agent]\nd_v = 8\n"), 2);
    assert_eq!(line_of("\n[nowhere]\nx = 1\n"), 3);
    assert_eq!(line_of("[ablation]\nseeds = 1, x\n"), 2);
    assert_eq!(line_of("[ablation]\nconditions = baseline, dreaming\n"), 2);
    assert_eq!(line_of("[imagination]\nsigma_gen = loud\n"), 2);
}

#[test]
fn spec_validation() {
    let config = |text: &str| matches!(ExperimentSpec::parse(text), Err(Error::Config(_)));
    assert!(config("[ablation]\nconditions = imagine, null_test\n"));
    assert!(config("[ablation]\nconditions = baseline, baseline\n"));
    assert!(config("[ablation]\nseeds =\n"));
    assert!(config("[experiment]\nradius = 0\n"));
    assert!(ExperimentSpec::parse("[ablation]\nconditions = baseline, imagine, goal_only\n").is_ok());
}

#[test]
fn conditions_map_to_variants_and_policies() {
    for c in Condition::ALL {
        assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        assert_eq!(c.is_test_time(), c.variant() == Variant::Imagine && c != Condition::Imagine);
        assert_eq!(c.variant().uses_imaginations(), c != Condition::Baseline);
    }
    assert_eq!(Condition::TextOnly.variant(), Variant::TextOnly);
}

fn row(condition: &str, sr: f64, seed: u64) -> MetricsRow {
    MetricsRow {
        condition: condition.into(),
        split: "val_unseen".into(),
        policy: "correct".into(),
        sr,
        spl: sr / 2.0,
        ne: 1.0,
        tl: 2.0,
        rgs: None,
        rgspl: None,
        n: 10,
        seed,
    }
}

#[test]
fn summary_statistics() {
    let s = Stat::of(&[60.0, 62.0]);
    assert_eq!(s.mean, 61.0);
    assert!((s.sd.unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(Stat::of(&[7.0]), Stat { mean: 7.0, sd: None });

    let rows = [row("imagine", 60.0, 0), row("baseline", 50.0, 0), row("imagine", 62.0, 1), row("baseline", 54.0, 1)];
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].condition, "imagine");
    assert_eq!((summary[0].runs, summary[0].sr.mean, summary[0].spl.mean), (2, 61.0, 30.5));
    let single = summarize(&rows[..1]);
    assert_eq!(single[0].sr, Stat { mean: 60.0, sd: None });
    assert_eq!(single[0].cells()[5], "-");

    let tsv = write_summary_tsv(&summary);
    assert_eq!(tsv.lines().next().unwrap(), SUMMARY_COLUMNS.join("\t"));
    assert_eq!(tsv.lines().nth(1).unwrap(), "imagine\tval_unseen\tcorrect\t2\t61.00\t1.414\t30.50\t0.707\t1.000\t0.000\t2.000\t0.000");
}

#[test]
fn verdicts_compare_means_on_the_split() {
    let rows = [row("imagine", 60.0, 0), row("baseline", 50.0, 0), row("imagine", 62.0, 1), row("baseline", 54.0, 1)];
    let v = verdicts(&summarize(&rows), "val_unseen");
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].hypothesis.name, "imagine>baseline");
    assert_eq!(v[0].delta, 9.0);
    assert!(v[0].pass);
    assert_eq!(v[0].to_string(), "hypothesis imagine>baseline: PASS (Δ=+9.0 SR)");
    assert!(verdicts(&summarize(&rows), "val_seen").is_empty());

    let close = [row("imagine", 60.0, 0), row("baseline", 56.0, 0), row("infonce", 58.5, 0)];
    let v = verdicts(&summarize(&close), "val_unseen");
    let by = |n: &str| v.iter().find(|x| x.hypothesis.name == n).unwrap().clone();
    assert!(!by("imagine>baseline").pass);
    assert_eq!(by("imagine>baseline").to_string(), "hypothesis imagine>baseline: FAIL (Δ=+4.0 SR)");
    assert!(by("infonce~cosine").pass);
    assert!((by("infonce~cosine").delta + 1.5).abs() < 1e-12);
    let far = [row("imagine", 60.0, 0), row("infonce", 57.5, 0)];
    assert!(!verdicts(&summarize(&far), "val_unseen")[0].pass);

    // Multi-landmark hypotheses read only the restricted rows.
    let multi = [row("imagine", 40.0, 0), row("goal_only", 45.0, 0), row("imagine:multi", 50.0, 0), row("goal_only:multi", 47.0, 0)];
    let v = verdicts(&summarize(&multi), "val_unseen");
    let seq = v.iter().find(|x| x.hypothesis.name == "sequential>goal_only").unwrap();
    assert_eq!((seq.delta, seq.pass), (3.0, true));
}

#[test]
fn metrics_files_parse_back() {
    let spec = tiny();
    let ab = run_ablation(&spec, &mut |_| {}).unwrap();
    let mut out = vec![b"# imnav ablate --seed 3\n".to_vec()];
    let mut body = Vec::new();
    write_tsv(&mut body, &ab.records).unwrap();
    out.push(body);
    let text = String::from_utf8(out.concat()).unwrap();
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(rows, ab.records.iter().map(MetricsRow::from_record).collect::<Vec<_>>());
    assert_eq!(summarize(&rows), ab.summary);

    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "imagine\tval_seen\tcorrect\tlots\t1\t1\t1\t-\t-\t1\t0";
    assert!(matches!(parse_metrics(&lines.join("\n")), Err(Error::Parse { line: 4, .. })));
    lines[3] = "imagine\tval_seen";
    assert!(matches!(parse_metrics(&lines.join("\n")), Err(Error::Parse { line: 4, .. })));
    assert!(matches!(parse_metrics("imagine\tval_seen\n"), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(parse_metrics("# only a comment\n"), Err(Error::Parse { line: 0, .. })));
}

#[test]
fn ablation_has_one_row_per_cell_and_matches_manual_steps() {
    let spec = tiny();
    let mut log = Vec::new();
    let ab = run_ablation(&spec, &mut |l| log.push(l.to_string())).unwrap();
    // Three trained steps: base, baseline, imagine (the test-time conditions
    // reuse the imagine agent).
    assert_eq!(log.len(), 3, "{log:?}");

    let plain: Vec<&MetricsRecord> = ab.records.iter().filter(|r| !r.condition.ends_with(MULTI_SUFFIX)).collect();
    let multi: Vec<&MetricsRecord> = ab.records.iter().filter(|r| r.condition.ends_with(MULTI_SUFFIX)).collect();
    assert_eq!(plain.len(), spec.conditions.len() * spec.splits.len());
    assert_eq!(multi.len(), spec.conditions.len());
    assert!(multi.iter().all(|r| r.split == Split::ValUnseen));
    for c in &spec.conditions {
        for s in &spec.splits {
            assert_eq!(plain.iter().filter(|r| r.condition == c.as_str() && r.split == *s).count(), 1);
        }
    }
    assert_eq!(ab.summary.len(), ab.records.len());
    assert!(ab.verdicts.iter().any(|v| v.hypothesis.name == "imagine>baseline"));
    assert!(ab.verdicts.iter().any(|v| v.hypothesis.name == "correct>wrong"));

    let seed = spec.seeds[0];
    let ds = Dataset::generate(&spec.corpus, seed).unwrap();
    let set = ds.imagine(&spec.imagination, seed).unwrap();
    let base = pretrain_base(&spec, &ds, &set, seed).unwrap();
    let imagine = finetune(&spec, &ds, &set, &base, Variant::Imagine, seed).unwrap();
    let manual = evaluate_condition(&spec, &ds, &set, &imagine, Condition::WrongTest, Split::ValUnseen, seed).unwrap();
    let from_ablation: Vec<MetricsRecord> = ab
        .records
        .iter()
        .filter(|r| r.condition.starts_with("wrong_test") && r.split == Split::ValUnseen)
        .cloned()
        .collect();
    assert_eq!(manual, from_ablation);

    let again = run_ablation(&spec, &mut |_| {}).unwrap();
    assert_eq!(again.records, ab.records);
}

#[test]
fn text_only_runs_without_alignment() {
    let text = TINY.replace("baseline, imagine, null_test, wrong_test", "baseline, text_only");
    let spec = ExperimentSpec::parse(&text).unwrap();
    let ab = run_ablation(&spec, &mut |_| {}).unwrap();
    assert!(ab.records.iter().any(|r| r.condition == "text_only"));
    let mut agent = spec.agent_config(10).unwrap();
    let mut train = spec.train.clone();
    Variant::TextOnly.apply(&mut agent, &mut train);
    assert_eq!(train.aux_loss, imnav::training::AuxLoss::None);
}
