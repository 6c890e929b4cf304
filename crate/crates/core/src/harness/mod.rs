//! Experiment orchestration: one spec file describes a corpus, an agent,
//! the training phases and an ablation matrix; `run_ablation` trains each
//! needed variant once per seed and evaluates every condition.

mod report;
mod spec;

pub use report::{
    parse_metrics, summarize, summary_table, verdicts, write_summary_tsv, Hypothesis, MetricsRow, Stat, SummaryRow, Test,
    Verdict, HYPOTHESES, MULTI_SUFFIX, SUMMARY_COLUMNS,
};
pub use spec::{Condition, ExperimentSpec, Variant};

use std::collections::BTreeMap;
use std::time::Instant;

use crate::agent::{Agent, EpisodeInput};
use crate::dataset::{Dataset, ImaginationPolicy};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsRecord};
use crate::imagination::ImaginationSet;
use crate::training::{TrainConfig, Trainer};
use crate::world::Split;

#[derive(Clone, Debug)]
pub struct Ablation {
    /// Per seed, per condition, per split; the verdict split also gets a
    /// multi-landmark row for each condition.
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    pub verdicts: Vec<Verdict>,
}

fn wrap<T>(what: &str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Run { what: what.to_string(), seed, source: Box::new(e) })
}

/// Training inputs for `variant`, or for base pretraining when `None`.
pub fn training_inputs<'d>(ds: &'d Dataset, set: &ImaginationSet, variant: Option<Variant>) -> Result<Vec<EpisodeInput<'d>>> {
    let policy = match variant {
        Some(v) if v.uses_imaginations() => ImaginationPolicy::Correct,
        _ => ImaginationPolicy::Absent,
    };
    ds.inputs(Split::Train, set, policy, 0)
}

/// Trainer for imagination-free pretraining of the shared base agent.
pub fn base_trainer(spec: &ExperimentSpec, ds: &Dataset, seed: u64) -> Result<Trainer> {
    let cfg = spec.agent_config(ds.vocab.len())?;
    let agent = Agent::new(cfg, seed)?;
    Trainer::new(agent, TrainConfig { seed, ..spec.pretrain.clone() })
}

/// Trainer for a fresh `variant` agent on top of the pretrained base.
pub fn variant_trainer(spec: &ExperimentSpec, ds: &Dataset, base: &Agent, variant: Variant, seed: u64) -> Result<Trainer> {
    let mut cfg = spec.agent_config(ds.vocab.len())?;
    let mut tc = TrainConfig { seed, ..spec.train.clone() };
    variant.apply(&mut cfg, &mut tc);
    let mut agent = Agent::new(cfg, seed)?;
    agent.adopt_base(&base.params)?;
    Trainer::new(agent, tc)
}

fn run_to_end(mut t: Trainer, data: &[EpisodeInput<'_>]) -> Result<Agent> {
    let until = t.config.iterations;
    t.run_until(data, &[], until, &mut Vec::new())?;
    Ok(t.agent)
}

/// Imagination-free training of the shared base agent. Every step takes the
/// run seed; the steps draw from disjoint named streams.
pub fn pretrain_base(spec: &ExperimentSpec, ds: &Dataset, set: &ImaginationSet, seed: u64) -> Result<Agent> {
    run_to_end(base_trainer(spec, ds, seed)?, &training_inputs(ds, set, None)?)
}

/// Finetunes a fresh `variant` agent on top of the pretrained base.
pub fn finetune(
    spec: &ExperimentSpec,
    ds: &Dataset,
    set: &ImaginationSet,
    base: &Agent,
    variant: Variant,
    seed: u64,
) -> Result<Agent> {
    run_to_end(variant_trainer(spec, ds, base, variant, seed)?, &training_inputs(ds, set, Some(variant))?)
}

/// Metrics of `condition` on `split`; on the verdict split, also over the
/// episodes that carry at least two imaginations.
pub fn evaluate_condition(
    spec: &ExperimentSpec,
    ds: &Dataset,
    set: &ImaginationSet,
    agent: &Agent,
    condition: Condition,
    split: Split,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let opts = EvalOptions { radius: spec.radius, max_steps: spec.max_steps, seed };
    let policy = condition.policy();
    let (record, results) = evaluate(agent, ds, split, set, policy, condition.as_str(), &opts)?;
    let mut out = vec![record];
    if split == spec.verdict_split {
        let multi: Vec<_> = results
            .into_iter()
            .filter(|r| set.get(&r.episode).is_some_and(|l| l.len() >= 2))
            .collect();
        if !multi.is_empty() {
            let label = format!("{condition}{MULTI_SUFFIX}");
            out.push(MetricsRecord::aggregate(&multi, &label, split, policy, seed)?);
        }
    }
    Ok(out)
}

/// Runs the whole matrix. `log` receives one progress line per finished
/// step.
pub fn run_ablation(spec: &ExperimentSpec, log: &mut dyn FnMut(&str)) -> Result<Ablation> {
    spec.validate()?;
    let mut records = Vec::new();
    for &seed in &spec.seeds {
        let t = Instant::now();
        let ds = wrap("corpus generation", seed, Dataset::generate(&spec.corpus, seed))?;
        let set = wrap("imagination", seed, ds.imagine(&spec.imagination, seed))?;
        let base = wrap("base pretraining", seed, pretrain_base(spec, &ds, &set, seed))?;
        log(&format!("seed {seed}: base pretrained ({:.1} s)", t.elapsed().as_secs_f64()));
        let mut trained: BTreeMap<Variant, Agent> = BTreeMap::new();
        for c in &spec.conditions {
            let v = c.variant();
            if trained.contains_key(&v) {
                continue;
            }
            let t = Instant::now();
            let agent = wrap(c.as_str(), seed, finetune(spec, &ds, &set, &base, v, seed))?;
            log(&format!("seed {seed}: {} finetuned ({:.1} s)", v.as_str(), t.elapsed().as_secs_f64()));
            trained.insert(v, agent);
        }
        for &c in &spec.conditions {
            let agent = &trained[&c.variant()];
            for &split in &spec.splits {
                records.extend(wrap(c.as_str(), seed, evaluate_condition(spec, &ds, &set, agent, c, split, seed))?);
            }
        }
    }
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from_record).collect();
    let summary = summarize(&rows);
    let verdicts = verdicts(&summary, spec.verdict_split.as_str());
    Ok(Ablation { records, summary, verdicts })
}
