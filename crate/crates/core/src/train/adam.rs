use crate::config::{TrainConfig, WeightDecay};
use crate::tensor::{ParamTensor, Parameters};

/// Optimizer hyper-parameters, usually taken from [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            betas: c.betas,
            eps: c.eps,
            weight_decay: c.weight_decay,
            decay: c.decay,
            clip_norm: c.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global L2 norm of the gradient before clipping.
    pub grad_norm: f64,
    pub max_abs_grad: f64,
    pub clipped: bool,
}

/// Adam with bias correction. Moments are laid out in the parameter
/// visiting order, so the same optimizer must always see the same model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Gradient statistics over the trainable parameters.
    pub fn grad_stats<P: Parameters + ?Sized>(params: &P) -> StepStats {
        let mut sq = 0.0;
        let mut max_abs: f64 = 0.0;
        params.visit(&mut |_, p| {
            if p.requires_grad() {
                for &g in p.grad() {
                    sq += g * g;
                    max_abs = max_abs.max(g.abs());
                }
            }
        });
        StepStats {
            grad_norm: sq.sqrt(),
            max_abs_grad: max_abs,
            clipped: false,
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) -> StepStats {
        let mut stats = Self::grad_stats(params);
        let c = self.config;
        let scale = if c.clip_norm > 0.0 && stats.grad_norm > c.clip_norm {
            stats.clipped = true;
            c.clip_norm / stats.grad_norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.betas[0].powi(t);
        let bc2 = 1.0 - c.betas[1].powi(t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        params.visit_mut(&mut |_, p: &mut ParamTensor| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.numel()]);
                vs.push(vec![0.0; p.numel()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            if !p.requires_grad() {
                return;
            }
            let grad: Vec<f64> = p.grad().to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                let mut g = grad[i] * scale;
                match c.decay {
                    WeightDecay::Decoupled => data[i] -= c.lr * c.weight_decay * data[i],
                    WeightDecay::Coupled => g += c.weight_decay * data[i],
                }
                m[i] = c.betas[0] * m[i] + (1.0 - c.betas[0]) * g;
                v[i] = c.betas[1] * v[i] + (1.0 - c.betas[1]) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
        stats
    }
}
