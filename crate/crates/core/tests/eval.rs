use imnav::agent::{Action, Agent, AgentConfig, TeacherReplay, Trajectory};
use imnav::dataset::{CorpusConfig, Dataset, ImaginationPolicy};
use imnav::error::Error;
use imnav::eval::*;
use imnav::imagination::ImaginationConfig;
use imnav::rng;
use imnav::world::*;
use rand::Rng;

fn result(success: bool, tl: f64, shortest: f64) -> EpisodeResult {
    EpisodeResult { episode: 0, final_node: 0, success, ne: 0.0, tl, shortest, grounded: None, truncated: false }
}

fn trajectory(visited: Vec<usize>, grounded_view: Option<usize>) -> Trajectory {
    Trajectory { visited, actions: vec![Action::Stop], logits: Vec::new(), grounded_view, truncated: false, attention: None }
}

#[test]
fn success_is_inclusive_at_the_radius() {
    assert!(success([0.0, 0.0], [0.0, 0.0], 1.0).unwrap());
    assert!(success([3.0, 4.0], [0.0, 0.0], 5.0).unwrap());
    assert!(!success([3.0, 4.0 + 1e-9], [0.0, 0.0], 5.0).unwrap());
    assert!(matches!(success([0.0, 0.0], [0.0, 0.0], 0.0), Err(Error::Config(_))));
}

#[test]
fn spl_anchor_cases() {
    assert_eq!(spl(&[result(true, 10.0, 10.0)]).unwrap(), 1.0);
    assert_eq!(spl(&[result(false, 10.0, 10.0)]).unwrap(), 0.0);
    let two = spl(&[result(true, 12.0, 10.0), result(false, 3.0, 5.0)]).unwrap();
    assert!((two - 0.4167).abs() < 1e-4);
    assert!((two - 5.0 / 12.0).abs() < 1e-15);
    // A shortcut never scores above 1.
    assert_eq!(spl(&[result(true, 4.0, 5.0)]).unwrap(), 1.0);
    assert!(matches!(spl(&[result(true, 1.0, 0.0)]), Err(Error::Contract(_))));
    assert!(matches!(spl(&[]), Err(Error::Input(_))));
}

fn library() -> LandmarkLibrary {
    LandmarkLibrary::default_with(16, 0).unwrap()
}

fn world(seed: u64) -> World {
    generate_world(&WorldConfig::default(), &library(), 0, seed).unwrap()
}

#[test]
fn navigation_error_and_trajectory_length() {
    let w = world(1);
    assert_eq!(navigation_error(&w, 3, 3).unwrap(), 0.0);
    assert_eq!(trajectory_length(&w, &[5]).unwrap(), 0.0);
    let (path, len) = w.shortest_path(0, w.len() - 1).unwrap();
    assert!(path.len() >= 3);
    let oracle: f64 = path
        .windows(2)
        .map(|p| {
            let (a, b) = (w.positions[p[0]], w.positions[p[1]]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum();
    assert!((trajectory_length(&w, &path).unwrap() - oracle).abs() < 1e-12);
    assert!((len - oracle).abs() < 1e-12);
    assert!(matches!(trajectory_length(&w, &[0, 999]), Err(Error::Lookup(_))));
}

#[test]
fn grounding_needs_success_and_the_target_view() {
    let lib = library();
    let cfg = WorldConfig { landmark_density: 1.0, ..WorldConfig::default() };
    let w = generate_world(&cfg, &lib, 0, 2).unwrap();
    let e = sample_episode(&w, Mode::Coarse, 0, 0).unwrap();
    let target = e.target.unwrap();
    let right = w.placements[e.goal].iter().find(|&&(_, c)| c == target).unwrap().0;
    let wrong = (0..w.k).find(|&v| w.class_at(e.goal, v) != Some(target)).unwrap();
    assert!(grounding_success(true, &w, &e, e.goal, Some(right)).unwrap());
    assert!(!grounding_success(true, &w, &e, e.goal, Some(wrong)).unwrap());
    assert!(!grounding_success(false, &w, &e, e.goal, Some(right)).unwrap());
    assert!(!grounding_success(true, &w, &e, e.goal, None).unwrap());
    let fine = sample_episode(&w, Mode::Fine, 1, 0).unwrap();
    assert!(matches!(grounding_success(true, &w, &fine, fine.goal, Some(0)), Err(Error::Contract(_))));
}

/// All-pairs shortest lengths by Floyd–Warshall over Euclidean edge weights.
fn all_pairs(w: &World) -> Vec<Vec<f64>> {
    let n = w.len();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (a, row) in d.iter_mut().enumerate() {
        row[a] = 0.0;
        for &(_, b) in &w.views[a] {
            let (p, q) = (w.positions[a], w.positions[b]);
            row[b] = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

#[test]
fn metrics_match_a_brute_force_recomputation() {
    let mut r = rng::seeded(21);
    for set in 0..5 {
        let w = world(100 + set);
        let dist = all_pairs(&w);
        let euclid = |a: usize, b: usize| {
            let (p, q) = (w.positions[a], w.positions[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let mut results = Vec::new();
        let (mut hits, mut spl_sum, mut ne_sum, mut tl_sum) = (0usize, 0.0, 0.0, 0.0);
        for i in 0..50 {
            let e = sample_episode(&w, Mode::Fine, i, r.random()).unwrap();
            // Random walk that sometimes follows the reference path.
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
            let res = episode_result(&w, &e, &trajectory(visited.clone(), None), 1.0).unwrap();
            let last = *visited.last().unwrap();
            let ne = euclid(last, e.goal);
            let tl: f64 = visited.windows(2).map(|p| euclid(p[0], p[1])).sum();
            let l = dist[e.start][e.goal];
            let ok = ne <= 1.0;
            assert_eq!(res.success, ok);
            assert!((res.ne - ne).abs() < 1e-9 && (res.tl - tl).abs() < 1e-9 && (res.shortest - l).abs() < 1e-9);
            hits += usize::from(ok);
            if ok {
                spl_sum += l / tl.max(l);
            }
            ne_sum += ne;
            tl_sum += tl;
            results.push(res);
        }
        let m = MetricsRecord::aggregate(&results, "x", Split::ValSeen, ImaginationPolicy::Correct, 0).unwrap();
        assert!((m.sr - hits as f64 / 50.0).abs() < 1e-9);
        assert!((m.spl - spl_sum / 50.0).abs() < 1e-9);
        assert!((m.ne - ne_sum / 50.0).abs() < 1e-9);
        assert!((m.tl - tl_sum / 50.0).abs() < 1e-9);
        assert!(m.spl <= m.sr);
        assert!(hits > 0 && hits < 50, "set {set}: {hits} successes");
    }
}

fn corpus() -> (Dataset, imnav::imagination::ImaginationSet) {
    let cfg = CorpusConfig { worlds: [2, 2, 2], episodes: [10, 20, 20], coarse_fraction: 0.5, ..CorpusConfig::default() };
    let ds = Dataset::generate(&cfg, 6).unwrap();
    let set = ds.imagine(&ImaginationConfig::default(), 6).unwrap();
    (ds, set)
}

#[test]
fn teacher_replay_is_a_perfect_agent() {
    let (ds, set) = corpus();
    let (m, results) =
        evaluate(&TeacherReplay, &ds, Split::ValSeen, &set, ImaginationPolicy::Correct, "oracle", &EvalOptions::default()).unwrap();
    assert_eq!((m.sr, m.spl, m.ne), (1.0, 1.0, 0.0));
    assert_eq!((m.rgs, m.rgspl), (Some(1.0), Some(1.0)));
    assert_eq!(m.n, 20);
    assert!(results.iter().all(|r| r.success));
}

#[test]
fn evaluation_is_deterministic_and_ordered() {
    let (ds, set) = corpus();
    let agent = Agent::new(AgentConfig::new(16, ds.worlds[0].k, ds.library.d_v, ds.vocab.len()), 3).unwrap();
    let opts = EvalOptions { seed: 4, ..EvalOptions::default() };
    for policy in ImaginationPolicy::ALL {
        let a = evaluate(&agent, &ds, Split::ValUnseen, &set, policy, "c", &opts).unwrap();
        let b = evaluate(&agent, &ds, Split::ValUnseen, &set, policy, "c", &opts).unwrap();
        assert_eq!(a, b);
        let m = &a.0;
        assert!(m.spl <= m.sr + 1e-15);
        assert!(m.rgs.unwrap() <= m.sr);
        assert!(m.rgspl.unwrap() <= m.spl + 1e-15);
    }
    let null = evaluate(&agent, &ds, Split::ValUnseen, &set, ImaginationPolicy::Null, "c", &opts).unwrap();
    let absent = evaluate(&agent, &ds, Split::ValUnseen, &set, ImaginationPolicy::Absent, "c", &opts).unwrap();
    assert_eq!(null.1, absent.1);
}

#[test]
fn spl_equals_sr_only_for_shortest_successes() {
    let exact = [result(true, 3.0, 3.0), result(false, 9.0, 2.0), result(true, 2.0, 2.0)];
    let m = MetricsRecord::aggregate(&exact, "c", Split::ValSeen, ImaginationPolicy::Correct, 0).unwrap();
    assert_eq!(m.spl, m.sr);
    let detour = [result(true, 3.5, 3.0), result(true, 2.0, 2.0)];
    let m = MetricsRecord::aggregate(&detour, "c", Split::ValSeen, ImaginationPolicy::Correct, 0).unwrap();
    assert!(m.spl < m.sr);
    assert!(matches!(MetricsRecord::aggregate(&[], "c", Split::ValSeen, ImaginationPolicy::Correct, 0), Err(Error::Input(_))));
}

#[test]
fn records_render_as_tsv_and_table() {
    let m = MetricsRecord {
        condition: "imagine".into(),
        split: Split::ValUnseen,
        policy: ImaginationPolicy::Correct,
        sr: 0.6,
        spl: 0.41666,
        ne: 1.23456,
        tl: 4.0,
        rgs: None,
        rgspl: None,
        n: 100,
        seed: 3,
    };
    let mut out = Vec::new();
    write_tsv(&mut out, std::slice::from_ref(&m)).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "condition\tsplit\tpolicy\tSR\tSPL\tNE\tTL\tRGS\tRGSPL\tn\tseed\nimagine\tval_unseen\tcorrect\t60.00\t41.67\t1.235\t4.000\t-\t-\t100\t3\n"
    );
    let table = metrics_table(&[m]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].find("SR").map(|i| i + 2), lines[1].find("60.00").map(|i| i + 5));
}
