use super::{NumericsError, Tensor};

/// Adam hyperparameters. Defaults: lr 1e-4, β1 0.9, β2 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first_moment: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::zeros(s)).collect();
        Self { config, second_moment: first_moment.clone(), first_moment, step_count: 0 }
    }

    /// Rebuild a state from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
        step_count: u64,
    ) -> Result<Self, NumericsError> {
        if first_moment.len() != second_moment.len()
            || first_moment.iter().zip(&second_moment).any(|(m, v)| m.shape() != v.shape())
        {
            return Err(NumericsError::Shape { op: "adam_state", detail: "moment shapes disagree".into() });
        }
        Ok(Self { config, first_moment, second_moment, step_count })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NumericsError::Shape {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.first_moment.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "param {i}: {:?}, grad {:?}, moment {:?}",
                        p.shape(),
                        g.shape(),
                        self.first_moment[i].shape()
                    ),
                });
            }
        }
        let t = self.step_count.checked_add(1).ok_or(NumericsError::StepOverflow)?;
        let exponent = i32::try_from(t).unwrap_or(i32::MAX);
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bias1 = 1.0 - beta1.powi(exponent);
        let bias2 = 1.0 - beta2.powi(exponent);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((theta, &grad), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * grad;
                *v = beta2 * *v + (1.0 - beta2) * grad * grad;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        self.step_count = t;
        Ok(())
    }
}
