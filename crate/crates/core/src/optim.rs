use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor in place and clears its gradient.
    ///
    /// Nothing is written unless every gradient and every updated value is
    /// finite, so a failed step leaves the parameters untouched.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer bound to a different parameter set"
        );
        for (i, p) in params.iter().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p
                .grad()
                .ok_or_else(|| Error::MissingGrad(format!("#{i}")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
            }
        }

        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut staged = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if !p.requires_grad {
                staged.push(None);
                continue;
            }
            let g = p.grad().expect("checked above");
            let mut m = self.m[i].clone();
            let mut v = self.v[i].clone();
            let mut next = p.data().to_vec();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                next[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("updated parameter #{i}")));
            }
            staged.push(Some((m, v, next)));
        }

        for (i, (p, s)) in params.iter_mut().zip(staged).enumerate() {
            if let Some((m, v, next)) = s {
                p.data_mut().copy_from_slice(&next);
                self.m[i] = m;
                self.v[i] = v;
            }
            p.clear_grad();
        }
        self.step += 1;
        Ok(())
    }
}
