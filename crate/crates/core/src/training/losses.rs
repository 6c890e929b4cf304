//! Auxiliary alignment losses between encoded imaginations and the mean
//! noun-phrase embeddings of their sub-instructions.

use crate::error::{Error, Result};
use crate::numcore::{Axis, Real, Tape, Tensor, Var};

/// Mean of `1 − cos(h_i, s_i)` over row pairs. `None` when there are no
/// pairs: the term is skipped rather than divided by zero.
pub fn cosine_alignment_loss<T: Real>(tape: &mut Tape<'_, T>, h: Var, s: Var) -> Result<Option<Var>> {
    let n = tape.value(h).rows();
    if tape.value(s).shape() != tape.value(h).shape() {
        return Err(Error::Contract("imagination and phrase matrices differ in shape".into()));
    }
    if n == 0 {
        return Ok(None);
    }
    let mut sum: Option<Var> = None;
    for i in 0..n {
        let a = tape.gather(h, &[i])?;
        let b = tape.gather(s, &[i])?;
        let c = tape.cosine(a, b)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    let mean = tape.scale(sum.expect("n > 0"), 1.0 / n as f64);
    let one = tape.constant(Tensor::scalar(T::one()));
    Ok(Some(tape.sub(one, mean)?))
}

/// Contrastive alignment: each imagination must pick its own phrase
/// embedding among the phrase embeddings of other instructions in the batch.
/// `owner[i]` identifies the instruction of row `i`; rows sharing an owner
/// are not negatives for each other.
pub fn infonce_loss<T: Real>(tape: &mut Tape<'_, T>, h: Var, s: Var, owner: &[usize], tau: f64) -> Result<Option<Var>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("InfoNCE temperature must be positive, got {tau}")));
    }
    let n = tape.value(h).rows();
    if owner.len() != n || tape.value(s).shape() != tape.value(h).shape() {
        return Err(Error::Contract("InfoNCE inputs disagree in length".into()));
    }
    if n == 0 {
        return Ok(None);
    }
    let rows_h: Vec<Var> = (0..n).map(|i| tape.gather(h, &[i])).collect::<Result<_, _>>()?;
    let rows_s: Vec<Var> = (0..n).map(|i| tape.gather(s, &[i])).collect::<Result<_, _>>()?;
    let mut sum: Option<Var> = None;
    for i in 0..n {
        let mut sims = vec![tape.cosine(rows_h[i], rows_s[i])?];
        for j in 0..n {
            if owner[j] != owner[i] {
                sims.push(tape.cosine(rows_h[i], rows_s[j])?);
            }
        }
        let logits = tape.concat(&sims, Axis::Cols)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let ce = tape.cross_entropy(logits, 0)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    Ok(Some(tape.scale(sum.expect("n > 0"), 1.0 / n as f64)))
}

/// `base + λ·aux` on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<'_, T>, base: Var, aux: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("loss weight must be non-negative, got {lambda}")));
    }
    match aux {
        Some(a) => {
            let w = tape.scale(a, lambda);
            Ok(tape.add(base, w)?)
        }
        None => Ok(base),
    }
}
