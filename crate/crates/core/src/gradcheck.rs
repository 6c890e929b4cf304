//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward values are used to build the numeric estimate, so the check
//! is independent of every backward rule it verifies. Runs in `f64`.

use crate::agent::{imitation_loss, rollout_on_tape, Agent, EpisodeInput, ParamIds, RolloutMode, SlotSource};
use crate::error::{Error, Result};
use crate::numcore::{NumError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::training::{alignable, cosine_alignment_loss, total_loss};

/// Comparison floor for relative errors: entries whose analytic and numeric
/// values are both below it are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
    /// Probes left out because the loss is not smooth within ±h there.
    pub skipped: usize,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.entries += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", what());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.entries += other.entries;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks gradients with respect to input tensors. `f` builds a scalar from
/// input vars on a fresh tape.
pub fn check_inputs<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NumError>,
{
    probe_inputs(store, inputs, h, false, f)
}

/// [`check_inputs`] with the smoothness guard of [`check_params_smooth`].
pub fn check_inputs_smooth<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NumError>,
{
    probe_inputs(store, inputs, h, true, f)
}

fn probe_inputs<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, guard: bool, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NumError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumError> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradReport::default();
    let mut xs = inputs.to_vec();
    let central = |xs: &mut Vec<Tensor<f64>>, t: usize, e: usize, step: f64| -> Result<f64, NumError> {
        let orig = xs[t].data()[e];
        xs[t].data_mut()[e] = orig + step;
        let up = eval(xs)?;
        xs[t].data_mut()[e] = orig - step;
        let down = eval(xs)?;
        xs[t].data_mut()[e] = orig;
        Ok((up - down) / (2.0 * step))
    };
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[t].rows(), inputs[t].cols()));
        for e in 0..inputs[t].len() {
            let numeric = central(&mut xs, t, e, h)?;
            if guard && relative_error(numeric, central(&mut xs, t, e, h / 10.0)?) > KINK_TOL {
                report.skipped += 1;
                continue;
            }
            report.record(|| format!("input {t}[{e}]"), analytic.data()[e], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to parameters. At most `per_param` entries
/// of each parameter are probed (evenly strided) to bound the cost.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, only: Option<&[ParamId]>, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, NumError>,
{
    probe_params(store, h, per_param, only, false, f)
}

/// Like [`check_params`], for losses with ReLU kinks or sharp curvature.
/// Each probe is also estimated with step h/10; when the two numeric
/// estimates disagree by more than [`KINK_TOL`], the central difference at h
/// does not resolve the derivative there (a kink inside ±h, or truncation
/// error at the tolerance) and the probe is counted as skipped. The guard
/// compares numeric estimates only, so it cannot hide a wrong analytic
/// gradient; callers bound the skipped fraction.
pub fn check_params_smooth<F>(store: &ParamStore<f64>, h: f64, per_param: usize, only: Option<&[ParamId]>, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, NumError>,
{
    probe_params(store, h, per_param, only, true, f)
}

/// Relative disagreement between the h and h/10 estimates that marks a
/// probe as non-smooth.
pub const KINK_TOL: f64 = 1e-4;

fn probe_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, only: Option<&[ParamId]>, guard: bool, f: F) -> Result<GradReport, NumError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, NumError>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let grads = tape.backward(out)?;
    let mut report = GradReport::default();
    let mut probe = store.clone();
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let central = |probe: &mut ParamStore<f64>, id: ParamId, e: usize, step: f64| -> Result<f64, NumError> {
        let orig = store.get(id).value.data()[e];
        let mut at = |x: f64| -> Result<f64, NumError> {
            probe.get_mut(id).value.data_mut()[e] = x;
            let mut t = Tape::new(probe);
            let o = f(&mut t)?;
            Ok(t.value(o).item())
        };
        let up = at(orig + step)?;
        let down = at(orig - step)?;
        probe.get_mut(id).value.data_mut()[e] = orig;
        Ok((up - down) / (2.0 * step))
    };
    for id in ids {
        let len = store.get(id).value.len();
        let zero = Tensor::zeros(store.get(id).value.rows(), store.get(id).value.cols());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        let stride = (len / per_param.max(1)).max(1);
        for e in (0..len).step_by(stride).take(per_param) {
            let numeric = central(&mut probe, id, e, h)?;
            if guard && relative_error(numeric, central(&mut probe, id, e, h / 10.0)?) > KINK_TOL {
                report.skipped += 1;
                continue;
            }
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{e}]"), analytic.data()[e], numeric);
        }
    }
    Ok(report)
}

fn num(e: Error) -> NumError {
    match e {
        Error::Numeric(n) => n,
        other => NumError::Contract(other.to_string()),
    }
}

/// Checks parameter gradients of one episode's full teacher-forced training
/// loss (imitation, grounding on coarse episodes, and `lambda` times the
/// cosine alignment of the live imagination slots) on an `f64` copy of the
/// agent. Dropout is active with a fixed mask stream; probes at ReLU kinks
/// are skipped as in [`check_params_smooth`].
pub fn check_agent(agent: &Agent, input: &EpisodeInput<'_>, lambda: f64, h: f64, per_param: usize) -> Result<GradReport> {
    let cfg = &agent.config;
    let store = agent.params.cast::<f64>();
    let ids = ParamIds::resolve(cfg, &store)?;
    let loss = |tape: &mut Tape<'_, f64>| -> Result<Var> {
        let mut dropout = rng::seeded(1);
        let r = rollout_on_tape(tape, cfg, &ids, input, RolloutMode::Teacher, usize::MAX, true, &mut dropout)?;
        let mut base = imitation_loss(tape, &r.logits, &r.targets)?;
        if let (Some(g), Some(t)) = (r.ground_logits, r.ground_target) {
            let ce = tape.cross_entropy(g, t)?;
            base = tape.add(base, ce)?;
        }
        let aux = match (cfg.slot_source, r.context.slots, r.context.noun_means) {
            (SlotSource::Imagination, Some(hs), Some(ss)) => {
                let live: Vec<usize> = (0..input.mask.len())
                    .filter(|&i| input.mask[i] && alignable(tape.value(hs).row(i), tape.value(ss).row(i)))
                    .collect();
                if live.is_empty() {
                    return total_loss(tape, base, None, lambda);
                }
                let hs = tape.gather(hs, &live)?;
                let ss = tape.gather(ss, &live)?;
                cosine_alignment_loss(tape, hs, ss)?
            }
            _ => None,
        };
        total_loss(tape, base, aux, lambda)
    };
    Ok(check_params_smooth(&store, h, per_param, None, |tape| loss(tape).map_err(num))?)
}
