//! Adam with decoupled weight decay.
//!
//! Decay is applied directly to the parameters instead of being mixed into
//! the gradient, so it never touches the moment estimates. The temperature
//! scalar is updated by the same moment machinery but is exempt from decay:
//! pulling log(1/tau) toward zero would drag the temperature toward 1,
//! which is not regularization, just a bias.

use crate::encoders::EncoderSet;
use crate::{Error, Result};

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    temp_first: f64,
    temp_second: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Option<Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            moments: None,
        }
    }

    /// Updates taken since construction or the last `reset`.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops all moment estimates and the step counter. Must be called when
    /// the parameter set changes shape, which happens at the stage boundary
    /// when the symbol tower splits off.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments = None;
    }

    /// Applies one update from the gradients accumulated in the parameter
    /// set, plus the given temperature gradient, then advances the step
    /// counter. Gradients are left in place; callers zero them.
    pub fn step(&mut self, set: &mut EncoderSet, temperature_grad: f64) -> Result<()> {
        let mut params = set.params_mut();
        let moments = match &mut self.moments {
            Some(m) => {
                if m.first.len() != params.len()
                    || m.first
                        .iter()
                        .zip(params.iter())
                        .any(|(m, p)| m.len() != p.data.len())
                {
                    return Err(Error::InvalidArgument(
                        "optimizer moments do not match the parameter set; call reset() after changing stages"
                            .to_string(),
                    ));
                }
                m
            }
            None => self.moments.insert(Moments {
                first: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
                second: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
                temp_first: 0.0,
                temp_second: 0.0,
            }),
        };

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);

        for (p, (m, v)) in params
            .iter_mut()
            .zip(moments.first.iter_mut().zip(moments.second.iter_mut()))
        {
            for j in 0..p.data.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data[j] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * p.data[j]);
            }
        }

        let g = temperature_grad;
        moments.temp_first = self.beta1 * moments.temp_first + (1.0 - self.beta1) * g;
        moments.temp_second = self.beta2 * moments.temp_second + (1.0 - self.beta2) * g * g;
        let m_hat = moments.temp_first / c1;
        let v_hat = moments.temp_second / c2;
        set.temperature.log_inverse_tau -=
            self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);

        Ok(())
    }
}
