use crate::{ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the order of the
/// [`ParamStore`] it was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            config,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(
        config: AdamConfig,
        steps: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        params: &ParamStore,
    ) -> Result<Self, TensorError> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(TensorError::StateMismatch(format!(
                "optimizer holds {} / {} moments for {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for (i, (_, p)) in params.iter().enumerate() {
            if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
                return Err(TensorError::StateMismatch(format!(
                    "moment shape for parameter `{}`",
                    params.name(i)
                )));
            }
        }
        Ok(Self { config, steps, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// but still age the step counter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &ps);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut ps, &[Some(g)]);
        let w = ps.get("w").unwrap().data();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }
}
