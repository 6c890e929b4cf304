use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_PHRASES: &str = include_str!("../../data/landmarks.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkClass {
    pub id: usize,
    pub phrase: Vec<String>,
    pub prototype: Vec<f64>,
    pub held_out: bool,
}

impl LandmarkClass {
    pub fn phrase_text(&self) -> String {
        self.phrase.join(" ")
    }
}

/// The closed set of landmark classes shared by every world in a dataset,
/// plus the feature shown by views without a landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkLibrary {
    pub d_v: usize,
    pub classes: Vec<LandmarkClass>,
    pub background: Vec<f64>,
}

/// Parses a phrase list: one phrase per line, `#` starts a comment.
pub fn parse_phrases(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.split_whitespace().map(|w| w.to_lowercase()).collect())
        .collect()
}

pub(crate) fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl LandmarkLibrary {
    /// Draws random unit prototypes for `phrases` and reserves
    /// `round(held_out_fraction * n)` classes for unseen worlds.
    pub fn generate(phrases: &[Vec<String>], d_v: usize, held_out_fraction: f64, seed: u64) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::Config("landmark library is empty".into()));
        }
        if d_v < 8 {
            return Err(Error::Config(format!("d_v must be at least 8, got {d_v}")));
        }
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::Config(format!("held-out fraction {held_out_fraction} outside [0, 1)")));
        }
        let mut seen = std::collections::HashSet::new();
        for p in phrases {
            if p.is_empty() || !seen.insert(p.join(" ")) {
                return Err(Error::Config(format!("empty or duplicate landmark phrase {:?}", p.join(" "))));
            }
        }
        let mut proto_rng = rng::stream(seed, "prototypes", 0);
        let background = random_unit(&mut proto_rng, d_v);
        let mut classes: Vec<LandmarkClass> = phrases
            .iter()
            .enumerate()
            .map(|(id, phrase)| LandmarkClass {
                id,
                phrase: phrase.clone(),
                prototype: random_unit(&mut proto_rng, d_v),
                held_out: false,
            })
            .collect();
        let n_held = (held_out_fraction * classes.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.shuffle(&mut rng::stream(seed, "held-out", 0));
        for &i in &order[..n_held] {
            classes[i].held_out = true;
        }
        Ok(Self { d_v, classes, background })
    }

    pub fn default_with(d_v: usize, seed: u64) -> Result<Self> {
        Self::generate(&parse_phrases(DEFAULT_PHRASES), d_v, 0.2, seed)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, id: usize) -> Result<&LandmarkClass> {
        self.classes.get(id).ok_or_else(|| Error::Lookup(format!("landmark class {id}")))
    }

    pub fn by_phrase(&self, phrase: &str) -> Option<&LandmarkClass> {
        self.classes.iter().find(|c| c.phrase_text() == phrase)
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| !c.held_out).map(|c| c.id).collect()
    }

    pub fn held_out_ids(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.held_out).map(|c| c.id).collect()
    }

    /// Class whose prototype has the highest cosine similarity with
    /// `feature`; ties go to the lower id.
    pub fn nearest(&self, feature: &[f64]) -> usize {
        let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut best = (0, f64::NEG_INFINITY);
        for c in &self.classes {
            let cos = c.prototype.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>() / norm;
            if cos > best.1 {
                best = (c.id, cos);
            }
        }
        best.0
    }
}
