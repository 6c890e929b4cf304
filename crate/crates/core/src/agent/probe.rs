use super::rollout::Trajectory;
use crate::error::{Error, Result};
use crate::world::World;

/// Indices of the `k` largest values, largest first; equal values keep
/// index order. `k` is clamped to the row length.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Step at which the probe was taken.
    pub step: usize,
    /// Instruction positions the imagination attends to most.
    pub text: Vec<usize>,
    /// Views whose tokens attend most to the imagination.
    pub views: Vec<usize>,
}

/// Reads the attention of imagination slot `slot` at the first step whose
/// node shows landmark `class`: its context row over the instruction tokens,
/// and the visual tokens' weights on it at `layer`, both for `head`.
pub fn attention_probe(
    traj: &Trajectory,
    world: &World,
    layer: usize,
    head: usize,
    slot: usize,
    class: usize,
    k: usize,
) -> Result<ProbeResult> {
    let att = traj.attention.as_ref().ok_or_else(|| Error::Lookup("trajectory carries no attention records".into()))?;
    if slot >= att.slots || att.rows != att.text_len + att.slots {
        return Err(Error::Lookup(format!("imagination slot {slot} is not a context row")));
    }
    if head >= att.heads {
        return Err(Error::Lookup(format!("head {head} of {}", att.heads)));
    }
    let step = traj
        .visited
        .iter()
        .take(att.cross.len())
        .position(|&n| world.placements[n].iter().any(|&(_, c)| c == class))
        .ok_or_else(|| Error::Lookup(format!("landmark {class} never visible along the trajectory")))?;
    let layers = &att.cross[step];
    let w = layers.get(layer).ok_or_else(|| Error::Lookup(format!("layer {layer} of {}", layers.len())))?;
    let rows = att.rows;
    let key = att.text_len + slot;
    let ctx_row = &att.context[(head * rows + key) * rows..(head * rows + key) * rows + att.text_len];
    let q = att.queries_per_step;
    let view_col: Vec<f32> = (0..world.k).map(|j| w[(head * q + j) * rows + key]).collect();
    Ok(ProbeResult { step, text: top_k(ctx_row, k), views: top_k(&view_col, k) })
}
