use super::{GradError, Result, Scalar};

/// Adam with bias-corrected moments. State is allocated lazily on the first
/// step and then pinned to the parameter layout.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    steps: i32,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(GradError::InvalidLearningRate(lr));
        }
        Ok(Self {
            lr: S::of(lr),
            beta1: S::of(beta1),
            beta2: S::of(beta2),
            eps: S::of(eps),
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.as_f64()
    }

    /// Change the step size, keeping the moment estimates. Zero is allowed.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(GradError::InvalidLearningRate(lr));
        }
        self.lr = S::of(lr);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// Update every parameter in place against its gradient.
    pub fn step(&mut self, params: Vec<&mut [S]>, grads: &[Vec<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GradError::StateMismatch {
                index: params.len().min(grads.len()),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(GradError::StateMismatch { index: self.first.len() });
        }
        self.steps += 1;
        let c1 = S::one() - self.beta1.powi(self.steps);
        let c2 = S::one() - self.beta2.powi(self.steps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first[i].len() != p.len() {
                return Err(GradError::StateMismatch { index: i });
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
