use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, QNetwork};

/// A parameter update rule.
pub trait Optimizer {
    fn step(&mut self, params: &mut QNetwork, grads: &Gradients) -> Result<(), NnError>;
}

fn check_finite(grads: &Gradients) -> Result<(), NnError> {
    for (group, values) in grads.groups() {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient { group, index, value });
        }
    }
    Ok(())
}

/// Plain gradient descent: `theta <- theta - lr * grad`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut QNetwork, grads: &Gradients) -> Result<(), NnError> {
        check_finite(grads)?;
        for ((_, p), (_, g)) in params.groups_mut().into_iter().zip(grads.groups()) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.learning_rate * g);
        }
        Ok(())
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: i32,
    m: Option<QNetwork>,
    v: Option<QNetwork>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: None,
            v: None,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut QNetwork, grads: &Gradients) -> Result<(), NnError> {
        check_finite(grads)?;
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.steps = self.steps.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .groups_mut()
            .into_iter()
            .zip(grads.groups())
            .zip(m.groups_mut().into_iter().zip(v.groups_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Selects an [`Optimizer`] by name.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn build(self, learning_rate: f64) -> Box<dyn Optimizer + Send> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd { learning_rate }),
            OptimizerKind::Adam => Box::new(Adam::new(learning_rate)),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [OptimizerKind::Sgd, OptimizerKind::Adam]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown optimizer `{s}` (expected sgd or adam)"))
    }
}
