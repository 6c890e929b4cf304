use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sections;
use crate::world::LandmarkLibrary;

pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.txt");
pub const LANDMARK_SLOT: &str = "{landmark}";

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub landmark: Vec<Vec<String>>,
    pub straight: Vec<Vec<String>>,
    pub left: Vec<Vec<String>>,
    pub right: Vec<Vec<String>>,
    pub coarse: Vec<Vec<String>>,
    /// Segment terminators. The first one also ends the instruction.
    pub delimiters: Vec<String>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self> {
        let secs = sections::parse(text)?;
        let get = |name: &str| -> Vec<Vec<String>> {
            sections::lines(&secs, name).map(|l| l.split_whitespace().map(|w| w.to_lowercase()).collect()).collect()
        };
        let set = Self {
            landmark: get("landmark"),
            straight: get("straight"),
            left: get("left"),
            right: get("right"),
            coarse: get("coarse"),
            delimiters: sections::lines(&secs, "delimiter").map(str::to_string).collect(),
        };
        for (name, list) in [
            ("landmark", &set.landmark),
            ("straight", &set.straight),
            ("left", &set.left),
            ("right", &set.right),
            ("coarse", &set.coarse),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("template section [{name}] is empty")));
            }
        }
        for t in set.landmark.iter().chain(&set.coarse) {
            if !t.iter().any(|w| w == LANDMARK_SLOT) {
                return Err(Error::Config(format!("landmark template {:?} lacks {LANDMARK_SLOT}", t.join(" "))));
            }
        }
        if set.delimiters.is_empty() {
            return Err(Error::Config("no delimiters defined".into()));
        }
        Ok(set)
    }

    pub fn default_set() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }

    pub fn is_delimiter(&self, w: &str) -> bool {
        self.delimiters.iter().any(|d| d == w)
    }

    fn all(&self) -> impl Iterator<Item = &Vec<String>> {
        self.landmark.iter().chain(&self.straight).chain(&self.left).chain(&self.right).chain(&self.coarse)
    }
}

/// Placeholder for words the agent has no trained embedding for.
pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Closed vocabulary: `<unk>` first, then the words in sorted order.
///
/// Words that only occur in held-out landmark phrases are in the vocabulary
/// (instructions for unseen worlds must be representable) but are not
/// *known*: the agent sees them as `<unk>`, the usual out-of-vocabulary
/// treatment for words absent from training text.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    known: Vec<bool>,
}

impl Vocab {
    /// All template words, delimiters and landmark words.
    pub fn build(templates: &TemplateSet, library: &LandmarkLibrary) -> Self {
        let mut known = BTreeSet::new();
        for t in templates.all() {
            known.extend(t.iter().filter(|w| *w != LANDMARK_SLOT).cloned());
        }
        known.extend(templates.delimiters.iter().cloned());
        let mut all = known.clone();
        for c in &library.classes {
            all.extend(c.phrase.iter().cloned());
            if !c.held_out {
                known.extend(c.phrase.iter().cloned());
            }
        }
        let mut v = Self::from_words(all.into_iter().collect());
        for (i, w) in v.words.iter().enumerate().skip(1) {
            v.known[i] = known.contains(w);
        }
        v
    }

    /// A vocabulary in which every word is known.
    pub fn from_words(mut words: Vec<String>) -> Self {
        words.retain(|w| w != UNK);
        words.sort();
        words.dedup();
        words.insert(UNK_ID, UNK.to_string());
        let known = vec![true; words.len()];
        Self { words, known }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        if w == UNK {
            return Some(UNK_ID);
        }
        self.words[1..].binary_search_by(|x| x.as_str().cmp(w)).ok().map(|i| i + 1)
    }

    pub fn is_known(&self, w: &str) -> bool {
        self.id(w).is_some_and(|i| self.known[i])
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t).ok_or_else(|| Error::Vocabulary(format!("unknown token {t:?}")))).collect()
    }

    /// Token ids as the agent sees them: unknown words become `<unk>`.
    pub fn encode_for_agent(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let ids = self.encode(tokens)?;
        Ok(ids.into_iter().map(|i| if self.known[i] { i } else { UNK_ID }).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
}

/// Classifies the heading change from `incoming` to `outgoing` (radians,
/// counter-clockwise positive). Within 45 degrees counts as straight.
pub fn classify_turn(incoming: f64, outgoing: f64) -> Turn {
    let tau = std::f64::consts::TAU;
    let mut d = (outgoing - incoming).rem_euclid(tau);
    if d > std::f64::consts::PI {
        d -= tau;
    }
    if d.abs() <= std::f64::consts::FRAC_PI_4 {
        Turn::Straight
    } else if d > 0.0 {
        Turn::Left
    } else {
        Turn::Right
    }
}

pub(crate) fn render(template: &[String], phrase: Option<&[String]>) -> Vec<String> {
    let mut out = Vec::with_capacity(template.len() + 2);
    for w in template {
        if w == LANDMARK_SLOT {
            out.extend(phrase.expect("landmark template needs a phrase").iter().cloned());
        } else {
            out.push(w.clone());
        }
    }
    out
}

pub(crate) fn pick<'a, R: Rng + ?Sized>(list: &'a [Vec<String>], rng: &mut R) -> &'a [String] {
    list.choose(rng).expect("validated nonempty")
}
