//! A generated corpus: landmark library, worlds, episodes and instructions
//! for every split, plus the glue that turns it into agent inputs.

mod records;

pub use records::{read_dataset, read_imaginations, write_dataset, write_imaginations, HEADER_PREFIX};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::agent::EpisodeInput;
use crate::error::{Error, Result};
use crate::imagination::{self, ImaginationSet};
use crate::instructions::{self, FilterLexicon, Instruction, InstructionGenerator, SubInstruction, TemplateSet, Vocab};
use crate::rng;
use crate::world::{self, parse_phrases, Episode, LandmarkLibrary, Mode, Split, Topology, World, WorldConfig, DEFAULT_PHRASES};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub world: WorldConfig,
    pub d_v: usize,
    pub held_out_fraction: f64,
    /// Worlds per split, in `Split::ALL` order.
    pub worlds: [usize; 3],
    /// Episodes per split, spread evenly over that split's worlds.
    pub episodes: [usize; 3],
    pub coarse_fraction: f64,
    /// Only sample routes that landmarks alone disambiguate.
    pub unambiguous: bool,
    pub p_landmark: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            d_v: 32,
            held_out_fraction: 0.2,
            worlds: [25, 5, 5],
            episodes: [500, 100, 100],
            coarse_fraction: 0.0,
            unambiguous: false,
            p_landmark: 0.7,
        }
    }
}

fn split_index(s: Split) -> usize {
    Split::ALL.iter().position(|&x| x == s).expect("listed")
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("coarse_fraction", self.coarse_fraction), ("p_landmark", self.p_landmark)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for i in 0..3 {
            if self.episodes[i] > 0 && self.worlds[i] == 0 {
                return Err(Error::Config(format!("split {} has episodes but no worlds", Split::ALL[i])));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let w = &self.world;
        let kv = [
            ("nodes", w.nodes.to_string()),
            ("topology", w.topology.to_string()),
            ("k", w.k.to_string()),
            ("sigma_obs", w.sigma_obs.to_string()),
            ("spacing", w.spacing.to_string()),
            ("jitter", w.jitter.to_string()),
            ("extra_edge_prob", w.extra_edge_prob.to_string()),
            ("landmark_density", w.landmark_density.to_string()),
            ("clutter_density", w.clutter_density.to_string()),
            ("unseen_mix", w.unseen_mix.to_string()),
            ("d_v", self.d_v.to_string()),
            ("held_out_fraction", self.held_out_fraction.to_string()),
        ];
        let mut out: Vec<(String, String)> = kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (i, s) in Split::ALL.iter().enumerate() {
            out.push((format!("worlds.{s}"), self.worlds[i].to_string()));
            out.push((format!("episodes.{s}"), self.episodes[i].to_string()));
        }
        out.push(("coarse_fraction".into(), self.coarse_fraction.to_string()));
        out.push(("unambiguous".into(), self.unambiguous.to_string()));
        out.push(("p_landmark".into(), self.p_landmark.to_string()));
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        let w = &mut self.world;
        match key {
            "nodes" => w.nodes = num(key, value)?,
            "topology" => w.topology = value.parse::<Topology>()?,
            "k" => w.k = num(key, value)?,
            "sigma_obs" => w.sigma_obs = num(key, value)?,
            "spacing" => w.spacing = num(key, value)?,
            "jitter" => w.jitter = num(key, value)?,
            "extra_edge_prob" => w.extra_edge_prob = num(key, value)?,
            "landmark_density" => w.landmark_density = num(key, value)?,
            "clutter_density" => w.clutter_density = num(key, value)?,
            "unseen_mix" => w.unseen_mix = num(key, value)?,
            "d_v" => self.d_v = num(key, value)?,
            "held_out_fraction" => self.held_out_fraction = num(key, value)?,
            "coarse_fraction" => self.coarse_fraction = num(key, value)?,
            "unambiguous" => self.unambiguous = num(key, value)?,
            "p_landmark" => self.p_landmark = num(key, value)?,
            _ => {
                let (field, split) = key
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown corpus setting {key:?}")))?;
                let i = split_index(split.parse()?);
                match field {
                    "worlds" => self.worlds[i] = num(key, value)?,
                    "episodes" => self.episodes[i] = num(key, value)?,
                    _ => return Err(Error::Config(format!("unknown corpus setting {key:?}"))),
                }
            }
        }
        Ok(())
    }
}

/// Which imaginations an evaluation hands the agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImaginationPolicy {
    Correct,
    /// The correct tokens, all masked out.
    Null,
    /// Another instruction's imaginations.
    Wrong,
    GoalOnly,
    /// No imagination tokens at all.
    Absent,
}

impl ImaginationPolicy {
    pub const ALL: [ImaginationPolicy; 5] = [
        ImaginationPolicy::Correct,
        ImaginationPolicy::Null,
        ImaginationPolicy::Wrong,
        ImaginationPolicy::GoalOnly,
        ImaginationPolicy::Absent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ImaginationPolicy::Correct => "correct",
            ImaginationPolicy::Null => "null",
            ImaginationPolicy::Wrong => "wrong",
            ImaginationPolicy::GoalOnly => "goal_only",
            ImaginationPolicy::Absent => "none",
        }
    }
}

impl fmt::Display for ImaginationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImaginationPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown imagination policy {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub library: LandmarkLibrary,
    pub templates: TemplateSet,
    pub lexicon: FilterLexicon,
    pub vocab: Vocab,
    /// Indexed by world id.
    pub worlds: Vec<World>,
    /// Ordered by id; ids are unique across splits.
    pub episodes: Vec<Episode>,
    /// One per episode, with the episode's id.
    pub instructions: Vec<Instruction>,
    token_ids: Vec<Vec<usize>>,
    kept: BTreeMap<usize, Vec<SubInstruction>>,
}

impl Dataset {
    /// Assembles a dataset from its parts and checks cross references.
    pub fn from_parts(
        library: LandmarkLibrary,
        worlds: Vec<World>,
        episodes: Vec<Episode>,
        instructions: Vec<Instruction>,
    ) -> Result<Self> {
        let templates = TemplateSet::default_set();
        let lexicon = FilterLexicon::default_with(&library)?;
        let vocab = Vocab::build(&templates, &library);
        for (i, w) in worlds.iter().enumerate() {
            if w.id != i {
                return Err(Error::Format(format!("world at position {i} has id {}", w.id)));
            }
        }
        if instructions.len() != episodes.len() {
            return Err(Error::Format(format!("{} episodes but {} instructions", episodes.len(), instructions.len())));
        }
        for (e, ins) in episodes.iter().zip(&instructions) {
            if e.world >= worlds.len() {
                return Err(Error::Format(format!("episode {} refers to missing world {}", e.id, e.world)));
            }
            if ins.episode != e.id || ins.id != e.id {
                return Err(Error::Format(format!("instruction {} does not match episode {}", ins.id, e.id)));
            }
        }
        let token_ids = instructions.iter().map(|i| vocab.encode_for_agent(&i.tokens)).collect::<Result<Vec<_>>>()?;
        let kept = instructions
            .iter()
            .map(|i| {
                let subs = instructions::sub_instructions(i, &templates, &lexicon);
                (i.id, instructions::filter_sub_instructions(&subs, &lexicon))
            })
            .collect();
        Ok(Self { library, templates, lexicon, vocab, worlds, episodes, instructions, token_ids, kept })
    }

    /// Generates a corpus. Deterministic in `(config, seed)`.
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let library = LandmarkLibrary::generate(
            &parse_phrases(DEFAULT_PHRASES),
            config.d_v,
            config.held_out_fraction,
            rng::derive(seed, "library", 0),
        )?;
        let templates = TemplateSet::default_set();
        let vocab = Vocab::build(&templates, &library);
        let generator = InstructionGenerator { templates: &templates, vocab: &vocab, library: &library, p_landmark: config.p_landmark };
        let mut worlds = Vec::new();
        let mut episodes = Vec::new();
        let mut instructions = Vec::new();
        for (si, &split) in Split::ALL.iter().enumerate() {
            let n_worlds = config.worlds[si];
            let mut wc = config.world.clone();
            wc.split = split;
            for wi in 0..n_worlds {
                let id = worlds.len();
                let w = world::generate_world(&wc, &library, id, rng::derive(seed, "world", id as u64))?;
                let count = config.episodes[si] / n_worlds + usize::from(wi < config.episodes[si] % n_worlds);
                let coarse = (config.coarse_fraction * count as f64).round() as usize;
                let eseed = rng::derive(seed, "episodes", id as u64);
                let mut eps = world::sample_episodes(&w, Mode::Fine, count - coarse, episodes.len(), config.unambiguous, eseed)?;
                let first = episodes.len() + eps.len();
                eps.extend(world::sample_episodes(&w, Mode::Coarse, coarse, first, false, rng::derive(eseed, "coarse", 0))?);
                for e in &eps {
                    instructions.push(generator.generate(e, &w, e.id, rng::derive(seed, "instructions", 0))?);
                }
                episodes.extend(eps);
                worlds.push(w);
            }
        }
        Self::from_parts(library, worlds, episodes, instructions)
    }

    pub fn world(&self, id: usize) -> Result<&World> {
        self.worlds.get(id).ok_or_else(|| Error::Lookup(format!("world {id}")))
    }

    /// Positions (into `episodes`) of a split's episodes.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&i| self.worlds[self.episodes[i].world].split == split).collect()
    }

    pub fn kept(&self) -> &BTreeMap<usize, Vec<SubInstruction>> {
        &self.kept
    }

    /// Kept sub-instructions of a subset of instructions.
    pub fn kept_for(&self, split: Split) -> BTreeMap<usize, Vec<SubInstruction>> {
        self.split_indices(split).into_iter().map(|i| (self.instructions[i].id, self.kept[&self.instructions[i].id].clone())).collect()
    }

    /// Imaginations for every kept sub-instruction of every split.
    pub fn imagine(&self, config: &imagination::ImaginationConfig, seed: u64) -> Result<ImaginationSet> {
        imagination::imagine_dataset(&self.kept, &self.library, config, seed)
    }

    fn noun_positions(&self, instr: usize, subs: &[usize]) -> Result<Vec<Vec<usize>>> {
        let kept = &self.kept[&instr];
        subs.iter()
            .map(|&s| {
                kept.iter()
                    .find(|k| k.index == s)
                    .map(|k| k.noun_token_positions(&self.lexicon))
                    .ok_or_else(|| Error::Lookup(format!("instruction {instr} has no kept sub-instruction {s}")))
            })
            .collect()
    }

    /// Agent inputs for a split under an imagination policy. `seed` drives
    /// the wrong-imagination derangement and the observation noise.
    pub fn inputs(
        &self,
        split: Split,
        set: &ImaginationSet,
        policy: ImaginationPolicy,
        seed: u64,
    ) -> Result<Vec<EpisodeInput<'_>>> {
        let idx = self.split_indices(split);
        let own: ImaginationSet = idx
            .iter()
            .map(|&i| {
                let id = self.instructions[i].id;
                (id, set.get(&id).cloned().unwrap_or_default())
            })
            .collect();
        let swapped = match policy {
            ImaginationPolicy::Wrong => Some(imagination::shuffle_wrong(&own, rng::derive(seed, "wrong", 0))?),
            _ => None,
        };
        idx.iter()
            .map(|&i| {
                let ep = &self.episodes[i];
                let id = self.instructions[i].id;
                let world = &self.worlds[ep.world];
                let mut input = EpisodeInput::bare(world, ep, &self.token_ids[i], seed);
                let list = &own[&id];
                let (chosen, positions) = match policy {
                    ImaginationPolicy::Absent => (Vec::new(), Vec::new()),
                    ImaginationPolicy::Correct | ImaginationPolicy::Null => {
                        let subs: Vec<usize> = list.iter().map(|im| im.sub_index).collect();
                        (list.clone(), self.noun_positions(id, &subs)?)
                    }
                    ImaginationPolicy::GoalOnly => {
                        let g = imagination::goal_only(list);
                        let subs: Vec<usize> = g.iter().map(|im| im.sub_index).collect();
                        let pos = self.noun_positions(id, &subs)?;
                        (g, pos)
                    }
                    // Borrowed imaginations have no phrases in this
                    // instruction.
                    ImaginationPolicy::Wrong => (swapped.as_ref().expect("built above")[&id].clone(), Vec::new()),
                };
                input.mask = vec![policy != ImaginationPolicy::Null; chosen.len()];
                input.imaginations = chosen.iter().map(|im| im.feature.iter().map(|&x| x as f32).collect()).collect();
                input.noun_positions = positions;
                Ok(input)
            })
            .collect()
    }
}
