//! Imagination oracle: stands in for a text-to-image model by emitting the
//! prototype of the referenced landmark (or, with probability 1 − fidelity,
//! of a random other landmark) plus isotropic noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::instructions::{SubInstruction, Verdict};
use crate::rng;
use crate::world::LandmarkLibrary;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImaginationConfig {
    pub sigma_gen: f64,
    pub fidelity: f64,
}

impl Default for ImaginationConfig {
    fn default() -> Self {
        Self { sigma_gen: 0.05, fidelity: 0.95 }
    }
}

impl ImaginationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fidelity) {
            return Err(Error::Config(format!("fidelity must be in [0, 1], got {}", self.fidelity)));
        }
        if !(self.sigma_gen >= 0.0 && self.sigma_gen.is_finite()) {
            return Err(Error::Config(format!("sigma_gen must be non-negative, got {}", self.sigma_gen)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imagination {
    pub feature: Vec<f64>,
    pub sub_index: usize,
    pub true_class: usize,
    pub emitted_class: usize,
}

impl Imagination {
    pub fn corrupted(&self) -> bool {
        self.emitted_class != self.true_class
    }
}

/// Imaginations grouped by instruction id, each list in sub-instruction
/// order.
pub type ImaginationSet = BTreeMap<usize, Vec<Imagination>>;

pub fn imagine<R: Rng + ?Sized>(
    sub: &SubInstruction,
    library: &LandmarkLibrary,
    config: &ImaginationConfig,
    rng: &mut R,
) -> Result<Imagination> {
    if sub.verdict != Verdict::Kept {
        return Err(Error::Contract(format!("sub-instruction {} was filtered ({})", sub.index, sub.verdict)));
    }
    let true_class = sub
        .landmark_class
        .ok_or_else(|| Error::Contract(format!("sub-instruction {} has no landmark class", sub.index)))?;
    library.class(true_class)?;
    let n = library.len();
    // Draw order is fixed (corruption coin, replacement class, noise) so
    // streams stay aligned across fidelity settings.
    let hit = rng.random::<f64>() < config.fidelity;
    let emitted_class = if hit || n < 2 {
        true_class
    } else {
        let k = rng.random_range(0..n - 1);
        if k >= true_class { k + 1 } else { k }
    };
    let proto = &library.class(emitted_class)?.prototype;
    let feature = if config.sigma_gen == 0.0 {
        proto.clone()
    } else {
        let normal = Normal::new(0.0, config.sigma_gen).map_err(|e| Error::Config(e.to_string()))?;
        proto.iter().map(|&x| x + normal.sample(rng)).collect()
    };
    Ok(Imagination { feature, sub_index: sub.index, true_class, emitted_class })
}

/// One imagination per kept sub-instruction. `kept` maps instruction id to
/// its kept sub-instructions.
pub fn imagine_dataset(
    kept: &BTreeMap<usize, Vec<SubInstruction>>,
    library: &LandmarkLibrary,
    config: &ImaginationConfig,
    seed: u64,
) -> Result<ImaginationSet> {
    config.validate()?;
    let mut out = ImaginationSet::new();
    for (&id, subs) in kept {
        let mut r = rng::stream(seed, "imagine", id as u64);
        let list = subs.iter().map(|s| imagine(s, library, config, &mut r)).collect::<Result<Vec<_>>>()?;
        out.insert(id, list);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityReport {
    /// Share of imaginations whose nearest prototype is the true class.
    pub detected: f64,
    /// Share of instructions (with at least one imagination) whose every
    /// imagination is detected.
    pub all_detected: f64,
    pub imaginations: usize,
}

pub fn fidelity_check(set: &ImaginationSet, library: &LandmarkLibrary) -> Result<FidelityReport> {
    let mut total = 0usize;
    let mut hits = 0usize;
    let mut groups = 0usize;
    let mut full = 0usize;
    for list in set.values().filter(|l| !l.is_empty()) {
        groups += 1;
        let mut all = true;
        for im in list {
            total += 1;
            if library.nearest(&im.feature) == im.true_class {
                hits += 1;
            } else {
                all = false;
            }
        }
        full += all as usize;
    }
    if total == 0 {
        return Err(Error::Input("imagination set is empty".into()));
    }
    Ok(FidelityReport { detected: hits as f64 / total as f64, all_detected: full as f64 / groups as f64, imaginations: total })
}

/// Keeps only the final imagination.
pub fn goal_only(list: &[Imagination]) -> Vec<Imagination> {
    list.last().cloned().into_iter().collect()
}

/// Hands every instruction with imaginations the full list of a different
/// such instruction (a uniformly random derangement).
pub fn shuffle_wrong(set: &ImaginationSet, seed: u64) -> Result<ImaginationSet> {
    let eligible: Vec<usize> = set.iter().filter(|(_, l)| !l.is_empty()).map(|(&k, _)| k).collect();
    if eligible.len() < 2 {
        return Err(Error::Input(format!("need at least 2 instructions with imaginations, got {}", eligible.len())));
    }
    let mut r = rng::stream(seed, "wrong", 0);
    let mut perm: Vec<usize> = (0..eligible.len()).collect();
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let mut out = set.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.insert(eligible[i], set[&eligible[p]].clone());
    }
    Ok(out)
}
