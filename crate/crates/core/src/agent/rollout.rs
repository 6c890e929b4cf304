use rand::Rng;

use super::config::AgentConfig;
use super::model::{self, Context, ContextInput, ParamIds};
use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};
use crate::rng;
use crate::world::{Episode, Mode, World};

pub const DEFAULT_MAX_STEPS: usize = 15;

/// Everything the agent sees for one episode.
#[derive(Clone, Debug)]
pub struct EpisodeInput<'a> {
    pub world: &'a World,
    pub episode: &'a Episode,
    pub tokens: &'a [usize],
    pub imaginations: Vec<Vec<f32>>,
    /// Per imagination, the instruction positions of its sub-instruction's
    /// noun-phrase tokens. May be empty when unknown.
    pub noun_positions: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    /// Seeds the observation-noise stream.
    pub obs_seed: u64,
}

impl<'a> EpisodeInput<'a> {
    pub fn bare(world: &'a World, episode: &'a Episode, tokens: &'a [usize], obs_seed: u64) -> Self {
        Self { world, episode, tokens, imaginations: Vec::new(), noun_positions: Vec::new(), mask: Vec::new(), obs_seed }
    }

    fn context_input(&self) -> ContextInput<'_> {
        ContextInput { tokens: self.tokens, imaginations: &self.imaginations, noun_positions: &self.noun_positions, mask: &self.mask }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    Teacher,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Move { view: usize, to: usize },
    Stop,
}

/// Attention weights captured during a rollout, for probing.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub text_len: usize,
    pub slots: usize,
    /// Number of context rows (text plus concatenated slots).
    pub rows: usize,
    /// Context self-attention, heads × rows × rows.
    pub context: Vec<f32>,
    /// Per step, per layer: cross-attention of the visual tokens over the
    /// context rows, heads × (K + 1 [+ N]) × rows.
    pub cross: Vec<Vec<Vec<f32>>>,
    pub queries_per_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub visited: Vec<usize>,
    pub actions: Vec<Action>,
    pub logits: Vec<Vec<f32>>,
    /// View chosen by the grounding head at the stop node (coarse mode).
    pub grounded_view: Option<usize>,
    pub truncated: bool,
    pub attention: Option<AttentionTrace>,
}

/// A rollout still attached to its tape.
pub struct TapeRollout {
    pub trajectory: Trajectory,
    pub context: Context,
    pub logits: Vec<Var>,
    /// Teacher action index per step (teacher mode only).
    pub targets: Vec<usize>,
    pub ground_logits: Option<Var>,
    pub ground_target: Option<usize>,
    cross: Vec<Vec<Var>>,
}

fn panorama_var<T: Real>(tape: &mut Tape<'_, T>, world: &World, node: usize, rng: &mut rng::StreamRng) -> Result<Var> {
    let p = world.observation_at(node, rng)?;
    let data = p.data.iter().map(|&x| T::of(x as f32 as f64)).collect();
    Ok(tape.constant(Tensor::new(p.k, p.d_v, data)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs one episode on `tape`. In teacher mode the agent follows the
/// reference path and the teacher's action indices are recorded; in argmax
/// mode it acts greedily until it stops or `max_steps` moves were made.
#[allow(clippy::too_many_arguments)]
pub fn rollout_on_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    cfg: &AgentConfig,
    ids: &ParamIds,
    input: &EpisodeInput<'_>,
    mode: RolloutMode,
    max_steps: usize,
    train: bool,
    dropout_rng: &mut R,
) -> Result<TapeRollout> {
    let world = input.world;
    let ep = input.episode;
    if world.k != cfg.k || world.d_v != cfg.d_v {
        return Err(Error::Config(format!(
            "world has K={} d_v={}, agent expects K={} d_v={}",
            world.k, world.d_v, cfg.k, cfg.d_v
        )));
    }
    let context = model::encode_context(tape, cfg, ids, &input.context_input(), train, dropout_rng)?;
    let mut obs_rng = rng::stream(input.obs_seed, "observation", ep.id as u64);
    let mut history = tape.param(ids.hist_init);
    let mut node = ep.start;
    let mut visited = vec![node];
    let mut actions = Vec::new();
    let mut logit_vars = Vec::new();
    let mut logit_vals = Vec::new();
    let mut targets = Vec::new();
    let mut cross = Vec::new();
    let mut truncated = false;
    let mut last_tokens;
    let mut t = 0;
    loop {
        let nav = world.navigable(node)?.to_vec();
        let views: Vec<usize> = nav.iter().map(|&(v, _)| v).collect();
        let pano = panorama_var(tape, world, node, &mut obs_rng)?;
        let out = model::step(tape, cfg, ids, &context, pano, history, &views)?;
        last_tokens = out.tokens;
        cross.push(out.cross_attn.clone());
        let values: Vec<T> = tape.value(out.logits).data().to_vec();
        logit_vals.push(values.iter().map(|v| v.f64() as f32).collect());
        logit_vars.push(out.logits);
        let choice = match mode {
            RolloutMode::Teacher => {
                if t + 1 >= ep.path.len() {
                    nav.len()
                } else {
                    let next = ep.path[t + 1];
                    nav.iter().position(|&(_, m)| m == next).ok_or_else(|| {
                        Error::Contract(format!("teacher path of episode {} uses a missing edge {node}->{next}", ep.id))
                    })?
                }
            }
            RolloutMode::Argmax => {
                if t >= max_steps {
                    truncated = true;
                    nav.len()
                } else {
                    argmax(&values)
                }
            }
        };
        targets.push(choice);
        if choice == nav.len() {
            actions.push(Action::Stop);
            break;
        }
        let (view, to) = nav[choice];
        actions.push(Action::Move { view, to });
        history = model::update_history(tape, ids, history, out.tokens, view)?;
        node = to;
        visited.push(node);
        t += 1;
    }
    let (ground_logits, ground_target, grounded_view) = if ep.mode == Mode::Coarse {
        let g = model::grounding_logits(tape, cfg, ids, last_tokens)?;
        let chosen = argmax(tape.value(g).data());
        let target = ep.target.and_then(|c| world.placements[ep.goal].iter().find(|&&(_, pc)| pc == c).map(|&(v, _)| v));
        (Some(g), target, Some(chosen))
    } else {
        (None, None, None)
    };
    if mode == RolloutMode::Argmax {
        targets.clear();
    }
    Ok(TapeRollout {
        trajectory: Trajectory { visited, actions, logits: logit_vals, grounded_view, truncated, attention: None },
        context,
        logits: logit_vars,
        targets,
        ground_logits,
        ground_target,
        cross,
    })
}

impl TapeRollout {
    /// Copies the attention weights off the tape into the trajectory.
    pub fn capture_attention<T: Real>(&mut self, tape: &Tape<'_, T>, cfg: &AgentConfig) {
        let Some((ctx_w, heads)) = tape.attention_weights(self.context.self_attn) else { return };
        let rows = tape.value(self.context.rows).rows();
        let to_f32 = |w: &[T]| w.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
        let cross = self
            .cross
            .iter()
            .map(|layers| layers.iter().filter_map(|&a| tape.attention_weights(a).map(|(w, _)| to_f32(w))).collect())
            .collect::<Vec<Vec<Vec<f32>>>>();
        let queries = cross.first().and_then(|l| l.first()).map(|w| w.len() / (heads * rows)).unwrap_or(cfg.k + 1);
        self.trajectory.attention = Some(AttentionTrace {
            heads,
            text_len: self.context.text_len,
            slots: self.context.slot_mask.len(),
            rows,
            context: to_f32(ctx_w),
            cross,
            queries_per_step: queries,
        });
    }
}

/// Mean step-wise cross-entropy of the logits against teacher actions.
pub fn imitation_loss<T: Real>(tape: &mut Tape<'_, T>, logits: &[Var], targets: &[usize]) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Contract(format!("{} logit rows for {} teacher actions", logits.len(), targets.len())));
    }
    let mut total: Option<Var> = None;
    for (&l, &t) in logits.iter().zip(targets) {
        let ce = tape.cross_entropy(l, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / logits.len() as f64))
}

/// Anything that can drive an episode to a stop.
pub trait Navigator: Sync {
    fn navigate(&self, input: &EpisodeInput<'_>, max_steps: usize) -> Result<Trajectory>;
}

/// Replays the reference path; grounds on the target's view.
#[derive(Clone, Copy, Debug, Default)]
pub struct TeacherReplay;

impl Navigator for TeacherReplay {
    fn navigate(&self, input: &EpisodeInput<'_>, _max_steps: usize) -> Result<Trajectory> {
        let (w, ep) = (input.world, input.episode);
        let mut actions = Vec::new();
        for pair in ep.path.windows(2) {
            let view = w
                .view_towards(pair[0], pair[1])
                .ok_or_else(|| Error::Contract(format!("episode {} path uses a missing edge", ep.id)))?;
            actions.push(Action::Move { view, to: pair[1] });
        }
        actions.push(Action::Stop);
        let grounded_view = match (ep.mode, ep.target) {
            (Mode::Coarse, Some(c)) => w.placements[ep.goal].iter().find(|&&(_, pc)| pc == c).map(|&(v, _)| v),
            _ => None,
        };
        Ok(Trajectory { visited: ep.path.clone(), actions, logits: Vec::new(), grounded_view, truncated: false, attention: None })
    }
}
