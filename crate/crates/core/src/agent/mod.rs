//! The navigation agent: instruction encoder, imagination encoder,
//! observation/history encoder and the cross-modal policy.

mod config;
pub mod model;
mod probe;
mod rollout;

pub use config::{default_mlp_hidden, AgentConfig, ConcatTarget, EncoderKind, Fusion, SlotSource};
pub use model::{init_params, position_code, ParamIds};
pub use probe::{attention_probe, top_k, ProbeResult};
pub use rollout::{
    argmax, imitation_loss, rollout_on_tape, Action, AttentionTrace, EpisodeInput, Navigator, RolloutMode, TapeRollout,
    TeacherReplay, Trajectory, DEFAULT_MAX_STEPS,
};

use crate::error::{Error, Result};
use crate::numcore::{ParamGroup, ParamStore, Tape};
use crate::rng;

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub params: ParamStore<f32>,
    ids: ParamIds,
}

impl Agent {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: AgentConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    /// Overwrites every base-group parameter with the same-named array from
    /// `base`. Returns how many arrays were copied.
    pub fn adopt_base(&mut self, base: &ParamStore<f32>) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if p.group != ParamGroup::Base {
                continue;
            }
            let src = base
                .by_name(&p.name)
                .ok_or_else(|| Error::Lookup(format!("base checkpoint lacks parameter {:?}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?}: base shape {:?} differs from {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Greedy rollout without dropout; optionally records attention.
    pub fn run(&self, input: &EpisodeInput<'_>, max_steps: usize, record_attention: bool) -> Result<Trajectory> {
        let mut tape = Tape::new(&self.params);
        let mut no_dropout = rng::seeded(0);
        let mut r = rollout_on_tape(&mut tape, &self.config, &self.ids, input, RolloutMode::Argmax, max_steps, false, &mut no_dropout)?;
        if record_attention {
            r.capture_attention(&tape, &self.config);
        }
        Ok(r.trajectory)
    }
}

impl Navigator for Agent {
    fn navigate(&self, input: &EpisodeInput<'_>, max_steps: usize) -> Result<Trajectory> {
        self.run(input, max_steps, false)
    }
}
