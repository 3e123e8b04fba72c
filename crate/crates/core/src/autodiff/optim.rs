use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};

use super::{GradMap, Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    Adam,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Method::Sgd),
            "adam" => Ok(Method::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sgd => "sgd",
            Method::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            method: Method::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            method: Method::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// SGD or Adam with state kept across calls to [`step`](Self::step).
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one descent step. Parameters without a gradient entry are left
    /// untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dim() != g.dim() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: [p.nrows(), p.ncols()],
                    right: [g.nrows(), g.ncols()],
                });
            }
            match c.method {
                Method::Sgd => p.scaled_add(-c.lr, g),
                Method::Adam => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Array2::zeros(g.dim()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Array2::zeros(g.dim()));
                    let t = self.steps as i32;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    });
                }
            }
        }
        Ok(())
    }
}
