use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// Heavy-ball SGD with L2 weight decay folded into the gradient.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl UpdateRule {
    pub fn lr(&self) -> f64 {
        match *self {
            UpdateRule::SgdMomentum { lr, .. } | UpdateRule::Adam { lr, .. } => lr,
        }
    }
}

/// Applies an [`UpdateRule`], keeping momentum / moment estimates per
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: UpdateRule,
    lr: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(rule: UpdateRule) -> Result<Self, AutodiffError> {
        let lr = rule.lr();
        if lr < 0.0 || lr.is_nan() {
            return Err(AutodiffError::NegativeLearningRate(lr));
        }
        Ok(Optimizer {
            rule,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Overrides the learning rate, e.g. for a step schedule.
    pub fn set_lr(&mut self, lr: f64) -> Result<(), AutodiffError> {
        if lr < 0.0 || lr.is_nan() {
            return Err(AutodiffError::NegativeLearningRate(lr));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::InvalidShape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(s, p)| s.shape() != p.shape())
        {
            return Err(AutodiffError::InvalidShape(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        self.steps += 1;
        let lr = self.lr;

        match self.rule {
            UpdateRule::SgdMomentum {
                momentum,
                weight_decay,
                ..
            } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, gi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(v.data_mut().iter_mut())
                    {
                        let d = gi + weight_decay * *pi;
                        *vi = momentum * *vi + d;
                        *pi -= lr * *vi;
                    }
                }
            }
            UpdateRule::Adam {
                beta1, beta2, eps, ..
            } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pi, gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *pi -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
