use serde::{Deserialize, Serialize};

use super::{ParamSet, Result, Tensor, TensorError};

/// Linear ramp to `peak` over `warmup` steps, then inverse-square-root decay.
pub fn warmup_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    let t = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (t / w).min((w / t).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Registered optimizer name: `adam` or `sgd`.
    #[serde(default = "default_kind")]
    pub kind: String,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_kind() -> String {
    "adam".into()
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Serializable optimizer state: step counter plus named slot tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<(String, Tensor)>,
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update from the gradients stored in `params`.
    ///
    /// Any non-finite gradient aborts the step before a single weight moves.
    fn step(&mut self, params: &mut ParamSet) -> Result<()>;

    /// Number of completed steps.
    fn steps_taken(&self) -> u64;

    fn export(&self) -> OptimizerState;

    fn import(&mut self, state: OptimizerState) -> Result<()>;
}

type Factory = fn(&OptimConfig, &ParamSet) -> Box<dyn Optimizer>;

const REGISTRY: &[(&str, Factory)] = &[
    ("adam", |cfg, params| Box::new(Adam::new(cfg.clone(), params))),
    ("sgd", |cfg, _| Box::new(Sgd::new(cfg.peak_lr))),
];

pub fn optimizer_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

impl OptimConfig {
    pub fn build(&self, params: &ParamSet) -> Result<Box<dyn Optimizer>> {
        REGISTRY
            .iter()
            .find(|(n, _)| *n == self.kind)
            .map(|(_, f)| f(self, params))
            .ok_or_else(|| TensorError::UnknownOptimizer(self.kind.clone()))
    }
}

fn check_finite(params: &ParamSet) -> Result<()> {
    for p in params.iter().filter(|p| !p.frozen) {
        if !p.grad.is_finite() {
            return Err(TensorError::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// First/second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            state: AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn lr(&self, step: u64) -> f64 {
        warmup_lr(self.cfg.peak_lr, self.cfg.warmup_steps, step)
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        check_finite(params)?;
        let t = self.state.t + 1;
        let lr = self.lr(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let g = p.grad.data();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.state.t = t;
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.state.t
    }

    fn export(&self) -> OptimizerState {
        let mut slots = Vec::with_capacity(2 * self.state.m.len());
        for (i, (m, v)) in self.state.m.iter().zip(&self.state.v).enumerate() {
            slots.push((format!("m.{i}"), m.clone()));
            slots.push((format!("v.{i}"), v.clone()));
        }
        OptimizerState {
            step: self.state.t,
            slots,
        }
    }

    fn import(&mut self, state: OptimizerState) -> Result<()> {
        let n = self.state.m.len();
        if state.slots.len() != 2 * n {
            return Err(TensorError::InvalidShape {
                op: "adam import",
                detail: format!("expected {} slots, got {}", 2 * n, state.slots.len()),
            });
        }
        let mut slots = state.slots.into_iter();
        for i in 0..n {
            let (_, m) = slots.next().unwrap();
            let (_, v) = slots.next().unwrap();
            if m.shape() != self.state.m[i].shape() || v.shape() != self.state.v[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam import",
                    left: self.state.m[i].shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
            self.state.m[i] = m;
            self.state.v[i] = v;
        }
        self.state.t = state.step;
        Ok(())
    }
}

/// Plain gradient descent with a constant learning rate.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    t: u64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, t: 0 }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        check_finite(params)?;
        for p in params.iter_mut().filter(|p| !p.frozen) {
            let g = p.grad.data().to_vec();
            for (w, gi) in p.value.data_mut().iter_mut().zip(g) {
                *w -= self.lr * gi;
            }
        }
        self.t += 1;
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }

    fn export(&self) -> OptimizerState {
        OptimizerState {
            step: self.t,
            slots: Vec::new(),
        }
    }

    fn import(&mut self, state: OptimizerState) -> Result<()> {
        self.t = state.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peak_and_decay() {
        assert_eq!(warmup_lr(1e-3, 200, 200), 1e-3);
        assert!((warmup_lr(1e-3, 200, 800) - 5e-4).abs() < 1e-18);
        assert!((warmup_lr(1e-3, 200, 100) - 5e-4).abs() < 1e-18);
    }

    /// Independent scalar Adam, written out longhand.
    fn scalar_adam(x0: f64, g: f64, steps: u64, cfg: &OptimConfig) -> Vec<f64> {
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for t in 1..=steps {
            let lr = cfg.peak_lr
                * f64::min(t as f64 / cfg.warmup_steps as f64, (cfg.warmup_steps as f64 / t as f64).sqrt());
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powf(t as f64));
            let vh = v / (1.0 - cfg.beta2.powf(t as f64));
            x -= lr * mh / (vh.sqrt() + cfg.eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let cfg = OptimConfig {
            peak_lr: 0.1,
            warmup_steps: 2,
            ..OptimConfig::default()
        };
        let mut set = ParamSet::new("p");
        let id = set.add("x", Tensor::scalar(1.0));
        let mut opt = cfg.build(&set).unwrap();
        let expected = scalar_adam(1.0, 0.5, 3, &cfg);
        for want in expected {
            set.get_mut(id).grad = Tensor::scalar(0.5);
            opt.step(&mut set).unwrap();
            assert!((set.get(id).value.item() - want).abs() < 1e-15);
        }
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut set = ParamSet::new("p");
        let a = set.add("ok", Tensor::scalar(1.0));
        let b = set.add("bad", Tensor::scalar(1.0));
        let mut opt = OptimConfig::default().build(&set).unwrap();
        set.get_mut(a).grad = Tensor::scalar(1.0);
        set.get_mut(b).grad = Tensor::scalar(f64::NAN);
        let err = opt.step(&mut set).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("bad".into()));
        assert_eq!(set.get(a).value.item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn unknown_optimizer_rejected() {
        let cfg = OptimConfig {
            kind: "lion".into(),
            ..OptimConfig::default()
        };
        assert!(cfg.build(&ParamSet::new("p")).is_err());
        assert_eq!(optimizer_names(), vec!["adam", "sgd"]);
    }

    #[test]
    fn export_import_round_trip() {
        let mut set = ParamSet::new("p");
        let id = set.add("x", Tensor::scalar(1.0));
        let cfg = OptimConfig::default();
        let mut a = cfg.build(&set).unwrap();
        set.get_mut(id).grad = Tensor::scalar(0.3);
        a.step(&mut set).unwrap();
        let mut b = cfg.build(&set).unwrap();
        b.import(a.export()).unwrap();
        let mut set_b = set.clone();
        a.step(&mut set).unwrap();
        b.step(&mut set_b).unwrap();
        assert_eq!(set.get(id).value, set_b.get(id).value);
    }
}
