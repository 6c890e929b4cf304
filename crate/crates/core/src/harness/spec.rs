use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::agent::AgentConfig;
use crate::dataset::{CorpusConfig, ImaginationPolicy};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RADIUS;
use crate::imagination::ImaginationConfig;
use crate::sections;
use crate::training::{AuxLoss, Schedule, TrainConfig};
use crate::world::Split;

/// One cell of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Baseline,
    Imagine,
    NullTest,
    WrongTest,
    GoalOnly,
    TextOnly,
    NoAux,
    InfoNce,
    TransformerEncoder,
    VisualConcat,
    LateFusion,
}

/// A trained agent variant; several conditions can share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Imagine,
    TextOnly,
    NoAux,
    InfoNce,
    TransformerEncoder,
    VisualConcat,
    LateFusion,
}

impl Condition {
    pub const ALL: [Condition; 11] = [
        Condition::Baseline,
        Condition::Imagine,
        Condition::NullTest,
        Condition::WrongTest,
        Condition::GoalOnly,
        Condition::TextOnly,
        Condition::NoAux,
        Condition::InfoNce,
        Condition::TransformerEncoder,
        Condition::VisualConcat,
        Condition::LateFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Imagine => "imagine",
            Condition::NullTest => "null_test",
            Condition::WrongTest => "wrong_test",
            Condition::GoalOnly => "goal_only",
            Condition::TextOnly => "text_only",
            Condition::NoAux => "no_aux",
            Condition::InfoNce => "infonce",
            Condition::TransformerEncoder => "transformer_encoder",
            Condition::VisualConcat => "visual_concat",
            Condition::LateFusion => "late_fusion",
        }
    }

    /// Test-time conditions evaluate the imagine checkpoint under a
    /// different imagination policy.
    pub fn is_test_time(self) -> bool {
        matches!(self, Condition::NullTest | Condition::WrongTest | Condition::GoalOnly)
    }

    pub fn variant(self) -> Variant {
        match self {
            Condition::Baseline => Variant::Baseline,
            Condition::Imagine | Condition::NullTest | Condition::WrongTest | Condition::GoalOnly => Variant::Imagine,
            Condition::TextOnly => Variant::TextOnly,
            Condition::NoAux => Variant::NoAux,
            Condition::InfoNce => Variant::InfoNce,
            Condition::TransformerEncoder => Variant::TransformerEncoder,
            Condition::VisualConcat => Variant::VisualConcat,
            Condition::LateFusion => Variant::LateFusion,
        }
    }

    pub fn policy(self) -> ImaginationPolicy {
        match self {
            Condition::Baseline => ImaginationPolicy::Absent,
            Condition::NullTest => ImaginationPolicy::Null,
            Condition::WrongTest => ImaginationPolicy::Wrong,
            Condition::GoalOnly => ImaginationPolicy::GoalOnly,
            _ => ImaginationPolicy::Correct,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::Imagine,
        Variant::TextOnly,
        Variant::NoAux,
        Variant::InfoNce,
        Variant::TransformerEncoder,
        Variant::VisualConcat,
        Variant::LateFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Imagine => "imagine",
            Variant::TextOnly => "text_only",
            Variant::NoAux => "no_aux",
            Variant::InfoNce => "infonce",
            Variant::TransformerEncoder => "transformer_encoder",
            Variant::VisualConcat => "visual_concat",
            Variant::LateFusion => "late_fusion",
        }
    }

    /// Adjusts the shared agent and finetuning settings for this variant.
    pub fn apply(self, agent: &mut AgentConfig, train: &mut TrainConfig) {
        use crate::agent::{ConcatTarget, EncoderKind, Fusion, SlotSource};
        match self {
            Variant::Baseline => train.aux_loss = AuxLoss::None,
            Variant::Imagine => {}
            Variant::TextOnly => {
                agent.slot_source = SlotSource::TextMean;
                // The slots are the alignment targets themselves.
                train.aux_loss = AuxLoss::None;
            }
            Variant::NoAux => train.aux_loss = AuxLoss::None,
            Variant::InfoNce => train.aux_loss = AuxLoss::InfoNce,
            Variant::TransformerEncoder => agent.encoder = EncoderKind::Transformer,
            Variant::VisualConcat => agent.concat_target = ConcatTarget::Visual,
            Variant::LateFusion => agent.fusion = Fusion::Late,
        }
    }

    /// Whether training rollouts carry imaginations.
    pub fn uses_imaginations(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// A complete ablation: corpus, agent, the two training phases, the
/// condition matrix and the seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub corpus: CorpusConfig,
    pub imagination: ImaginationConfig,
    /// `[agent]` settings applied on top of the defaults; K, d_v and the
    /// vocabulary size always come from the corpus.
    pub agent: Vec<(String, String)>,
    /// Imagination-free training of the shared base agent.
    pub pretrain: TrainConfig,
    /// Finetuning of every variant, base agent included.
    pub train: TrainConfig,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub splits: Vec<Split>,
    /// Split whose means the hypothesis verdicts use.
    pub verdict_split: Split,
    pub radius: f64,
    pub max_steps: usize,
}

const AGENT_DERIVED: [&str; 3] = ["k", "d_v", "vocab"];

impl Default for ExperimentSpec {
    fn default() -> Self {
        let pretrain = TrainConfig {
            iterations: 2000,
            aux_loss: AuxLoss::None,
            schedule: Schedule::Constant(3e-3),
            ..TrainConfig::default()
        };
        Self {
            name: "ablation".into(),
            corpus: CorpusConfig::default(),
            imagination: ImaginationConfig::default(),
            agent: Vec::new(),
            pretrain,
            train: TrainConfig::default(),
            conditions: vec![Condition::Baseline, Condition::Imagine],
            seeds: vec![0],
            splits: vec![Split::ValSeen, Split::ValUnseen],
            verdict_split: Split::ValUnseen,
            radius: DEFAULT_RADIUS,
            max_steps: crate::agent::DEFAULT_MAX_STEPS,
        }
    }
}

fn list<T: FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentSpec {
    /// Agent configuration for a corpus with `vocab` words.
    pub fn agent_config(&self, vocab: usize) -> Result<AgentConfig> {
        let mut cfg = AgentConfig::new(32, self.corpus.world.k, self.corpus.d_v, vocab);
        for (k, v) in &self.agent {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an ablation needs at least one seed".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("an ablation needs at least one condition".into()));
        }
        if self.splits.is_empty() {
            return Err(Error::Config("an ablation needs at least one evaluation split".into()));
        }
        if self.conditions.iter().any(|c| c.is_test_time())
            && !(self.conditions.contains(&Condition::Baseline) && self.conditions.contains(&Condition::Imagine))
        {
            return Err(Error::Config("test-time conditions require both baseline and imagine".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].contains(c) {
                return Err(Error::Config(format!("condition {c} listed twice")));
            }
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        self.corpus.validate()?;
        self.imagination.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.agent_config(1)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let at = |line: usize| move |e: Error| Error::Parse { line, msg: e.to_string() };
        for section in sections::parse(text)? {
            for (line, key, value) in sections::key_values(&section)? {
                let key = key.as_str();
                let value = value.as_str();
                match section.name.as_str() {
                    "experiment" => match key {
                        "name" => spec.name = value.to_string(),
                        "splits" => spec.splits = list(value).map_err(at(line))?,
                        "verdict_split" => spec.verdict_split = value.parse().map_err(at(line))?,
                        "radius" => {
                            spec.radius = value.parse().map_err(|_| Error::Parse { line, msg: format!("bad radius {value:?}") })?
                        }
                        "max_steps" => {
                            spec.max_steps =
                                value.parse().map_err(|_| Error::Parse { line, msg: format!("bad max_steps {value:?}") })?
                        }
                        _ => return Err(Error::Parse { line, msg: format!("unknown experiment setting {key:?}") }),
                    },
                    "corpus" => spec.corpus.set(key, value).map_err(at(line))?,
                    "imagination" => {
                        let v: f64 =
                            value.parse().map_err(|_| Error::Parse { line, msg: format!("bad value {value:?} for {key}") })?;
                        match key {
                            "sigma_gen" => spec.imagination.sigma_gen = v,
                            "fidelity" => spec.imagination.fidelity = v,
                            _ => return Err(Error::Parse { line, msg: format!("unknown imagination setting {key:?}") }),
                        }
                    }
                    "agent" => {
                        if AGENT_DERIVED.contains(&key) {
                            return Err(Error::Parse { line, msg: format!("agent setting {key:?} is fixed by the corpus") });
                        }
                        AgentConfig::new(32, 12, 32, 1).set(key, value).map_err(at(line))?;
                        spec.agent.push((key.to_string(), value.to_string()));
                    }
                    "pretrain" => spec.pretrain.set(key, value).map_err(at(line))?,
                    "train" => spec.train.set(key, value).map_err(at(line))?,
                    "ablation" => match key {
                        "conditions" => spec.conditions = list(value).map_err(at(line))?,
                        "seeds" => {
                            spec.seeds = value
                                .split(',')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(|s| s.parse().map_err(|_| Error::Parse { line, msg: format!("bad seed {s:?}") }))
                                .collect::<Result<_>>()?
                        }
                        _ => return Err(Error::Parse { line, msg: format!("unknown ablation setting {key:?}") }),
                    },
                    other => return Err(Error::Parse { line, msg: format!("unknown section [{other}]") }),
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// The spec as a config file that parses back to an equal spec.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, kv: Vec<(String, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        section(
            "experiment",
            vec![
                ("name".into(), self.name.clone()),
                ("splits".into(), join(&self.splits)),
                ("verdict_split".into(), self.verdict_split.to_string()),
                ("radius".into(), self.radius.to_string()),
                ("max_steps".into(), self.max_steps.to_string()),
            ],
        );
        section("corpus", self.corpus.to_kv());
        section(
            "imagination",
            vec![
                ("sigma_gen".into(), self.imagination.sigma_gen.to_string()),
                ("fidelity".into(), self.imagination.fidelity.to_string()),
            ],
        );
        section("agent", self.agent.clone());
        section("pretrain", self.pretrain.to_kv());
        section("train", self.train.to_kv());
        section("ablation", vec![("conditions".into(), join(&self.conditions)), ("seeds".into(), join(&self.seeds))]);
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }
}
