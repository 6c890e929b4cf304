use super::{NumError, ParamGroup, ParamStore, Real};

/// Learning rate per parameter group. A rate of zero freezes the group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub imagination_encoder: f64,
    pub type_embedding: f64,
    pub base: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self { imagination_encoder: lr, type_embedding: lr, base: lr }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::ImaginationEncoder => self.imagination_encoder,
            ParamGroup::TypeEmbedding => self.type_embedding,
            ParamGroup::Base => self.base,
        }
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.get(*g) == 0.0).collect()
    }
}

/// Adam with bias correction and a per-parameter step count, so a group that
/// starts training late gets a properly corrected first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
    pub(crate) steps: Vec<u32>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |len| vec![T::zero(); len];
        Self {
            beta1,
            beta2,
            eps,
            m: store.iter().map(|(_, p)| zeros(p.value.len())).collect(),
            v: store.iter().map(|(_, p)| zeros(p.value.len())).collect(),
            steps: vec![0; store.len()],
        }
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn from_parts(m: Vec<Vec<T>>, v: Vec<Vec<T>>, steps: Vec<u32>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, steps }
    }

    /// One update. Groups with a zero rate are skipped entirely: neither the
    /// parameters nor their moments change.
    pub fn step(&mut self, store: &mut ParamStore<T>, rates: &GroupRates) -> Result<(), NumError> {
        if self.m.len() != store.len() {
            return Err(NumError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (idx, p) in store.iter_mut().enumerate() {
            let lr = rates.get(p.group);
            if lr == 0.0 || !p.requires_grad {
                continue;
            }
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| NumError::Contract(format!("parameter `{}` has no gradient", p.name)))?;
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g.f64();
                let mn = self.beta1 * mi.f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * vi.f64() + (1.0 - self.beta2) * g * g;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - update);
            }
        }
        Ok(())
    }
}
