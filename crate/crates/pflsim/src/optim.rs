//! Client-side SGD step and the three server optimizers.
//!
//! The server consumes a pseudo-gradient (the negated aggregated client
//! delta) through one of: plain averaging (a bare SGD step), Adam with bias
//! correction, or server-side momentum. `server_apply` is pure: it returns
//! the updated parameters and the advanced optimizer state, leaving its
//! inputs untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;

pub const DEFAULT_ADAM_BETA1: f64 = 0.9;
pub const DEFAULT_ADAM_BETA2: f64 = 0.99;
pub const DEFAULT_ADAM_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ServerOptKind {
    /// `values - lr * pseudo_grad`; lr = 1 recovers unweighted model averaging.
    Avg,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    FedAvgM {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    DEFAULT_ADAM_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_ADAM_BETA2
}
fn default_epsilon() -> f64 {
    DEFAULT_ADAM_EPSILON
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerOptSpec {
    #[serde(flatten)]
    pub kind: ServerOptKind,
    pub lr: f64,
}

impl ServerOptSpec {
    pub fn avg(lr: f64) -> Self {
        ServerOptSpec { kind: ServerOptKind::Avg, lr }
    }

    pub fn adam(lr: f64) -> Self {
        ServerOptSpec {
            kind: ServerOptKind::Adam {
                beta1: DEFAULT_ADAM_BETA1,
                beta2: DEFAULT_ADAM_BETA2,
                epsilon: DEFAULT_ADAM_EPSILON,
            },
            lr,
        }
    }

    pub fn fedavgm(lr: f64) -> Self {
        ServerOptSpec { kind: ServerOptKind::FedAvgM { momentum: DEFAULT_MOMENTUM }, lr }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("server lr must be positive and finite"));
        }
        match self.kind {
            ServerOptKind::Avg => Ok(()),
            ServerOptKind::Adam { beta1, beta2, epsilon } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("adam betas must lie in [0, 1)"));
                }
                if !(epsilon > 0.0) {
                    return Err(Error::config("adam epsilon must be positive"));
                }
                Ok(())
            }
            ServerOptKind::FedAvgM { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("momentum must lie in [0, 1)"));
                }
                Ok(())
            }
        }
    }
}

/// Server optimizer state. Buffers are sized to the model the first time the
/// state is created and advance once per applied round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerOptState {
    pub spec: ServerOptSpec,
    /// First-moment estimate (Adam).
    m: Vec<f64>,
    /// Second-moment estimate (Adam).
    v: Vec<f64>,
    /// Number of Adam steps taken.
    t: u64,
    /// Momentum buffer (FedAvgM).
    buffer: Vec<f64>,
}

impl ServerOptState {
    pub fn new(spec: ServerOptSpec, dim: usize) -> Result<Self> {
        spec.validate()?;
        Ok(ServerOptState {
            spec,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            buffer: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One plain SGD step: `params - lr * grad`.
pub fn sgd_step(params: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams> {
    if grad.len() != params.len() {
        return Err(Error::shape(format!(
            "gradient of length {} against {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config("sgd lr must be positive and finite"));
    }
    let values = params
        .values
        .iter()
        .zip(grad)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ModelParams { arch: params.arch, values })
}

/// Apply one server update for the given pseudo-gradient. Returns the new
/// parameters and the advanced state.
pub fn server_apply(
    state: &ServerOptState,
    current: &ModelParams,
    pseudo_grad: &[f64],
) -> Result<(ModelParams, ServerOptState)> {
    if pseudo_grad.len() != current.len() || state.dim() != current.len() {
        return Err(Error::shape(format!(
            "server update: state dim {}, params {}, pseudo-gradient {}",
            state.dim(),
            current.len(),
            pseudo_grad.len()
        )));
    }
    let lr = state.spec.lr;
    let mut next = state.clone();
    let mut values = current.values.clone();

    match state.spec.kind {
        ServerOptKind::Avg => {
            for (p, g) in values.iter_mut().zip(pseudo_grad) {
                *p -= lr * g;
            }
        }
        ServerOptKind::Adam { beta1, beta2, epsilon } => {
            next.t = state.t + 1;
            let bc1 = 1.0 - beta1.powi(next.t as i32);
            let bc2 = 1.0 - beta2.powi(next.t as i32);
            for i in 0..values.len() {
                let g = pseudo_grad[i];
                next.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                next.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let m_hat = next.m[i] / bc1;
                let v_hat = next.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        ServerOptKind::FedAvgM { momentum } => {
            for i in 0..values.len() {
                next.buffer[i] = momentum * state.buffer[i] + pseudo_grad[i];
                values[i] -= lr * next.buffer[i];
            }
        }
    }

    Ok((ModelParams { arch: current.arch, values }, next))
}
