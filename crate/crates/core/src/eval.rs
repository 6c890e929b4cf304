//! Navigation metrics: success, SPL, navigation error, trajectory length and
//! the coarse-mode grounding scores.

use std::fmt::Write as _;
use std::io::Write;

use crate::agent::{EpisodeInput, Navigator, Trajectory};
use crate::dataset::{Dataset, ImaginationPolicy};
use crate::error::{Error, Result};
use crate::imagination::ImaginationSet;
use crate::par;
use crate::world::{Episode, Mode, Split, World};

/// Success radius in world units.
pub const DEFAULT_RADIUS: f64 = 1.0;

/// True iff the final position lies within `radius` of the goal, boundary
/// included.
pub fn success(final_pos: [f64; 2], goal_pos: [f64; 2], radius: f64) -> Result<bool> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("success radius must be positive, got {radius}")));
    }
    let d = ((final_pos[0] - goal_pos[0]).powi(2) + (final_pos[1] - goal_pos[1]).powi(2)).sqrt();
    Ok(d <= radius)
}

fn position(world: &World, node: usize) -> Result<[f64; 2]> {
    world.positions.get(node).copied().ok_or_else(|| Error::Lookup(format!("node {node} in world {}", world.id)))
}

pub fn navigation_error(world: &World, final_node: usize, goal: usize) -> Result<f64> {
    let (a, b) = (position(world, final_node)?, position(world, goal)?);
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
}

pub fn trajectory_length(world: &World, visited: &[usize]) -> Result<f64> {
    for &n in visited {
        position(world, n)?;
    }
    Ok(world.path_length(visited))
}

/// Success plus a grounding choice that shows the target landmark.
pub fn grounding_success(
    succeeded: bool,
    world: &World,
    episode: &Episode,
    stop_node: usize,
    chosen_view: Option<usize>,
) -> Result<bool> {
    if episode.mode != Mode::Coarse {
        return Err(Error::Contract(format!("grounding is undefined for fine-mode episode {}", episode.id)));
    }
    position(world, stop_node)?;
    Ok(succeeded
        && match (chosen_view, episode.target) {
            (Some(v), Some(t)) => world.class_at(stop_node, v) == Some(t),
            _ => false,
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub final_node: usize,
    pub success: bool,
    pub ne: f64,
    /// Agent path length.
    pub tl: f64,
    /// Shortest start-to-goal length.
    pub shortest: f64,
    pub grounded: Option<bool>,
    pub truncated: bool,
}

pub fn episode_result(world: &World, episode: &Episode, traj: &Trajectory, radius: f64) -> Result<EpisodeResult> {
    let final_node = *traj.visited.last().ok_or_else(|| Error::Contract("empty trajectory".into()))?;
    let ok = success(position(world, final_node)?, position(world, episode.goal)?, radius)?;
    let grounded = match episode.mode {
        Mode::Coarse => Some(grounding_success(ok, world, episode, final_node, traj.grounded_view)?),
        Mode::Fine => None,
    };
    Ok(EpisodeResult {
        episode: episode.id,
        final_node,
        success: ok,
        ne: navigation_error(world, final_node, episode.goal)?,
        tl: trajectory_length(world, &traj.visited)?,
        shortest: world.shortest_path(episode.start, episode.goal)?.1,
        grounded,
        truncated: traj.truncated,
    })
}

fn weighted(results: &[EpisodeResult], hit: impl Fn(&EpisodeResult) -> bool) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Input("no episode results".into()));
    }
    let mut sum = 0.0;
    for r in results {
        if !(r.shortest > 0.0) {
            return Err(Error::Contract(format!("episode {} has shortest length {}", r.episode, r.shortest)));
        }
        if hit(r) {
            sum += r.shortest / r.tl.max(r.shortest);
        }
    }
    Ok(sum / results.len() as f64)
}

/// Success weighted by shortest length over max(agent length, shortest).
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    weighted(results, |r| r.success)
}

/// SPL's path weighting applied to grounded successes.
pub fn rgspl(results: &[EpisodeResult]) -> Result<f64> {
    weighted(results, |r| r.grounded == Some(true))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Free label: the ablation condition, or the policy for plain runs.
    pub condition: String,
    pub split: Split,
    pub policy: ImaginationPolicy,
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub tl: f64,
    /// Grounding scores, present when the split has coarse episodes (computed
    /// over those episodes).
    pub rgs: Option<f64>,
    pub rgspl: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

pub const TSV_COLUMNS: [&str; 11] = ["condition", "split", "policy", "SR", "SPL", "NE", "TL", "RGS", "RGSPL", "n", "seed"];

impl MetricsRecord {
    pub fn aggregate(
        results: &[EpisodeResult],
        condition: &str,
        split: Split,
        policy: ImaginationPolicy,
        seed: u64,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Input("no episode results".into()));
        }
        let n = results.len() as f64;
        let coarse: Vec<EpisodeResult> = results.iter().filter(|r| r.grounded.is_some()).cloned().collect();
        let (rgs, rgspl) = if coarse.is_empty() {
            (None, None)
        } else {
            let g = coarse.iter().filter(|r| r.grounded == Some(true)).count() as f64 / coarse.len() as f64;
            (Some(g), Some(rgspl(&coarse)?))
        };
        Ok(Self {
            condition: condition.to_string(),
            split,
            policy,
            sr: results.iter().filter(|r| r.success).count() as f64 / n,
            spl: spl(results)?,
            ne: results.iter().map(|r| r.ne).sum::<f64>() / n,
            tl: results.iter().map(|r| r.tl).sum::<f64>() / n,
            rgs,
            rgspl,
            n: results.len(),
            seed,
        })
    }

    /// Row cells: rates as percentages with two decimals, lengths with three.
    pub fn cells(&self) -> Vec<String> {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), pct);
        vec![
            self.condition.clone(),
            self.split.to_string(),
            self.policy.to_string(),
            pct(self.sr),
            pct(self.spl),
            format!("{:.3}", self.ne),
            format!("{:.3}", self.tl),
            opt(self.rgs),
            opt(self.rgspl),
            self.n.to_string(),
            self.seed.to_string(),
        ]
    }
}

pub fn write_tsv<W: Write>(out: &mut W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(out, "{}", TSV_COLUMNS.join("\t"))?;
    for r in records {
        writeln!(out, "{}", r.cells().join("\t"))?;
    }
    Ok(())
}

/// Right-aligned plain-text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |cells: &mut dyn Iterator<Item = &str>, s: &mut String| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied(), &mut s);
    for r in rows {
        line(&mut r.iter().map(String::as_str), &mut s);
    }
    s
}

pub fn metrics_table(records: &[MetricsRecord]) -> String {
    format_table(&TSV_COLUMNS, &records.iter().map(MetricsRecord::cells).collect::<Vec<_>>())
}

/// Greedy rollouts over prepared inputs, in parallel, results in input order.
pub fn run_inputs<N: Navigator>(nav: &N, inputs: &[EpisodeInput<'_>], max_steps: usize, radius: f64) -> Result<Vec<EpisodeResult>> {
    par::map(inputs, |inp| {
        let traj = nav.navigate(inp, max_steps)?;
        episode_result(inp.world, inp.episode, &traj, radius)
    })
    .into_iter()
    .collect()
}

pub fn success_rate<N: Navigator>(nav: &N, inputs: &[EpisodeInput<'_>], max_steps: usize, radius: f64) -> Result<f64> {
    let r = run_inputs(nav, inputs, max_steps, radius)?;
    if r.is_empty() {
        return Err(Error::Input("no episodes to evaluate".into()));
    }
    Ok(r.iter().filter(|x| x.success).count() as f64 / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub radius: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, max_steps: crate::agent::DEFAULT_MAX_STEPS, seed: 0 }
    }
}

/// Evaluates one split under an imagination policy.
pub fn evaluate<N: Navigator>(
    nav: &N,
    dataset: &Dataset,
    split: Split,
    set: &ImaginationSet,
    policy: ImaginationPolicy,
    condition: &str,
    opts: &EvalOptions,
) -> Result<(MetricsRecord, Vec<EpisodeResult>)> {
    let inputs = dataset.inputs(split, set, policy, opts.seed)?;
    if inputs.is_empty() {
        return Err(Error::Input(format!("split {split} has no episodes")));
    }
    let results = run_inputs(nav, &inputs, opts.max_steps, opts.radius)?;
    Ok((MetricsRecord::aggregate(&results, condition, split, policy, opts.seed)?, results))
}
