//! Imitation learning with the auxiliary alignment loss and the staged
//! finetuning schedule.
//!
//! One iteration runs in two phases. Every episode of the batch is rolled out
//! teacher-forced on its own tape (in parallel). The encoded imaginations and
//! mean noun-phrase embeddings of the whole batch are then copied onto a
//! small auxiliary tape, since contrastive negatives cross episode
//! boundaries. Its input gradients are fed back as seeds into each episode
//! tape's backward pass, and the per-episode parameter gradients are summed
//! in batch order.

mod checkpoint;
mod config;
mod losses;
mod schedule;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{AuxLoss, TrainConfig};
pub use losses::{cosine_alignment_loss, infonce_loss, total_loss};
pub use schedule::{Schedule, StageSchedule};

use std::io::Write;

use rand::Rng;

use crate::agent::{imitation_loss, rollout_on_tape, Agent, EpisodeInput, RolloutMode, SlotSource};
use crate::error::{Error, Result};
use crate::eval;
use crate::instructions::UNK_ID;
use crate::numcore::{Adam, Gradients, ParamGroup, ParamStore, Real, Tape, Tensor, Var, NORM_EPS};
use crate::par;
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_base: f64,
    pub l_aux: f64,
    pub total: f64,
    /// Imagination/phrase pairs entering the auxiliary term.
    pub n_im: usize,
    pub stage: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iter: usize,
    pub l_base: f64,
    pub l_aux: f64,
    pub val_sr: Option<f64>,
}

pub fn write_curves<W: Write>(out: &mut W, points: &[CurvePoint]) -> Result<()> {
    writeln!(out, "iter\tl_base\tl_aux\tval_sr")?;
    for p in points {
        let sr = p.val_sr.map(|s| format!("{:.2}", 100.0 * s)).unwrap_or_else(|| "NA".into());
        writeln!(out, "{}\t{:.6}\t{:.6}\t{}", p.iter, p.l_base, p.l_aux, sr)?;
    }
    Ok(())
}

/// Whether both vectors clear the cosine norm guard.
pub(crate) fn alignable<T: Real>(h: &[T], s: &[T]) -> bool {
    let norm = |v: &[T]| v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    norm(h) > NORM_EPS && norm(s) > NORM_EPS
}

struct Forward<'p> {
    tape: Tape<'p, f32>,
    loss: Var,
    l_base: f64,
    /// Slot and phrase-mean nodes plus the live slot rows, when this episode
    /// takes part in the auxiliary term.
    aux: Option<(Var, Var, Vec<usize>)>,
}

pub struct Trainer {
    pub agent: Agent,
    pub config: TrainConfig,
    pub adam: Adam<f32>,
    pub iteration: usize,
    rng: StreamRng,
}

impl Trainer {
    pub fn new(agent: Agent, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&agent.params);
        let rng = rng::stream(config.seed, "train", 0);
        Ok(Self { agent, config, adam, iteration: 0, rng })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        Ok(Self { agent: ck.agent, config: ck.train, adam: ck.adam, iteration: ck.iteration, rng: ck.rng })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.agent.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
        }
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn forward<'p>(
        params: &'p ParamStore<f32>,
        agent: &Agent,
        frozen: &[ParamGroup],
        input: &EpisodeInput<'_>,
        seed: u64,
        cfg: &TrainConfig,
    ) -> Result<Forward<'p>> {
        let mut tape = Tape::with_frozen(params, frozen);
        let mut words = rng::stream(seed, "word-dropout", 0);
        let tokens: Vec<usize> = input
            .tokens
            .iter()
            .map(|&t| if cfg.word_dropout > 0.0 && words.random::<f64>() < cfg.word_dropout { UNK_ID } else { t })
            .collect();
        let mut input = EpisodeInput { tokens: &tokens, ..input.clone() };
        input.obs_seed = rng::derive(seed, "observation", 0);
        let mut dropout = rng::stream(seed, "dropout", 0);
        let r = rollout_on_tape(&mut tape, &agent.config, agent.ids(), &input, RolloutMode::Teacher, cfg.max_steps, true, &mut dropout)?;
        let mut loss = imitation_loss(&mut tape, &r.logits, &r.targets)?;
        if let (Some(g), Some(t)) = (r.ground_logits, r.ground_target) {
            let ce = tape.cross_entropy(g, t)?;
            loss = tape.add(loss, ce)?;
        }
        let l_base = tape.value(loss).item() as f64;
        let aux = match (cfg.aux_loss, agent.config.slot_source, r.context.slots, r.context.noun_means) {
            (AuxLoss::None, ..) | (_, SlotSource::TextMean, ..) => None,
            (_, _, Some(h), Some(s)) => {
                // A pair whose phrase tokens were all dropped, or whose
                // imagination encodes to zero, has no direction to align.
                let live: Vec<usize> = (0..input.mask.len())
                    .filter(|&i| input.mask[i] && input.noun_positions[i].iter().any(|&p| tokens[p] != UNK_ID))
                    .filter(|&i| alignable(tape.value(h).row(i), tape.value(s).row(i)))
                    .collect();
                (!live.is_empty()).then_some((h, s, live))
            }
            _ => None,
        };
        Ok(Forward { tape, loss, l_base, aux })
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn step(&mut self, data: &[EpisodeInput<'_>]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let cfg = self.config.clone();
        let (stage, rates) = cfg.schedule.rates(self.iteration, cfg.iterations)?;
        let frozen = rates.frozen_groups();
        let picks: Vec<(usize, u64)> =
            (0..cfg.batch).map(|_| (self.rng.random_range(0..data.len()), self.rng.random::<u64>())).collect();
        let b = picks.len() as f64;
        let agent = &self.agent;
        let forwards = par::map(&picks, |&(i, seed)| Self::forward(&agent.params, agent, &frozen, &data[i], seed, &cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let l_base = forwards.iter().map(|f| f.l_base).sum::<f64>() / b;

        // Auxiliary phase over the batch's live slots.
        let weight = cfg.aux_weight_at(stage);
        let d = agent.config.d;
        let mut h_rows = Vec::new();
        let mut s_rows = Vec::new();
        let mut owner = Vec::new();
        for (f, &(i, _)) in forwards.iter().zip(&picks) {
            if let Some((h, s, live)) = &f.aux {
                for &r in live {
                    h_rows.extend_from_slice(f.tape.value(*h).row(r));
                    s_rows.extend_from_slice(f.tape.value(*s).row(r));
                    owner.push(i);
                }
            }
        }
        let n_im = owner.len();
        let mut l_aux = 0.0;
        let mut aux_grads: Option<(Tensor<f32>, Tensor<f32>)> = None;
        if n_im > 0 {
            let empty = ParamStore::<f32>::new();
            let mut at = Tape::new(&empty);
            let h_in = at.input(Tensor::new(n_im, d, h_rows)?);
            let s_in = at.input(Tensor::new(n_im, d, s_rows)?);
            let loss = match cfg.aux_loss {
                AuxLoss::Cosine => cosine_alignment_loss(&mut at, h_in, s_in)?,
                AuxLoss::InfoNce => infonce_loss(&mut at, h_in, s_in, &owner, cfg.tau)?,
                AuxLoss::None => None,
            };
            if let Some(loss) = loss {
                l_aux = at.value(loss).item() as f64;
                if weight > 0.0 {
                    let g = at.backward(loss)?;
                    let pick = |v| g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(n_im, d));
                    aux_grads = Some((pick(h_in), pick(s_in)));
                }
            }
        }
        let total = l_base + weight * l_aux;
        if !(l_base.is_finite() && l_aux.is_finite()) {
            return Err(Error::NonFinite(format!(
                "iteration {} (stage {stage}): L_base = {l_base}, L_aux = {l_aux}, batch = {:?}, rates = {rates:?}",
                self.iteration,
                picks.iter().map(|p| p.0).collect::<Vec<_>>()
            )));
        }

        // Per-episode seeds: the mean over the batch, plus the auxiliary
        // gradients routed back to the rows each episode contributed.
        let mut seeds: Vec<Vec<(Var, Tensor<f32>)>> = Vec::with_capacity(forwards.len());
        let mut offset = 0;
        for f in &forwards {
            let mut s = vec![(f.loss, Tensor::scalar((1.0 / b) as f32))];
            if let (Some((h, m, live)), Some((gh, gs))) = (&f.aux, &aux_grads) {
                let shape = f.tape.value(*h).shape();
                let mut th = Tensor::<f32>::zeros(shape[0], shape[1]);
                let mut ts = Tensor::<f32>::zeros(shape[0], shape[1]);
                for (k, &r) in live.iter().enumerate() {
                    for c in 0..d {
                        th.set(r, c, (weight * gh.get(offset + k, c) as f64) as f32);
                        ts.set(r, c, (weight * gs.get(offset + k, c) as f64) as f32);
                    }
                }
                offset += live.len();
                s.push((*h, th));
                s.push((*m, ts));
            }
            seeds.push(s);
        }
        let jobs: Vec<(&Forward<'_>, &Vec<(Var, Tensor<f32>)>)> = forwards.iter().zip(&seeds).collect();
        let grads: Vec<Gradients<f32>> =
            par::map(&jobs, |(f, s)| f.tape.backward_seeded(s)).into_iter().collect::<Result<_, _>>()?;
        drop(jobs);
        drop(forwards);

        let params = &mut self.agent.params;
        params.zero_grads();
        for g in &grads {
            for (id, t) in g.params() {
                params.accumulate_grad(*id, t)?;
            }
        }
        self.adam.step(params, &rates)?;
        params.clear_grads();
        self.iteration += 1;
        Ok(LossBreakdown { l_base, l_aux, total, n_im, stage })
    }

    /// Trains until `until` iterations (capped at the configured total),
    /// appending to `curves`. Validation success is measured on `val` every
    /// `eval_interval` iterations.
    pub fn run_until(
        &mut self,
        data: &[EpisodeInput<'_>],
        val: &[EpisodeInput<'_>],
        until: usize,
        curves: &mut Vec<CurvePoint>,
    ) -> Result<()> {
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            let iter = self.iteration;
            let loss = self.step(data)?;
            let interval = self.config.eval_interval;
            let val_sr = if interval > 0 && !val.is_empty() && (iter + 1).is_multiple_of(interval) {
                Some(eval::success_rate(&self.agent, val, self.config.max_steps, eval::DEFAULT_RADIUS)?)
            } else {
                None
            };
            curves.push(CurvePoint { iter, l_base: loss.l_base, l_aux: loss.l_aux, val_sr });
        }
        Ok(())
    }
}

/// Trains `agent` for the configured number of iterations.
pub fn train(
    agent: Agent,
    data: &[EpisodeInput<'_>],
    val: &[EpisodeInput<'_>],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<CurvePoint>)> {
    let mut t = Trainer::new(agent, config.clone())?;
    let mut curves = Vec::with_capacity(config.iterations);
    t.run_until(data, val, config.iterations, &mut curves)?;
    Ok((t.checkpoint(), curves))
}
