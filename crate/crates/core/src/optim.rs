//! Parameter update rules: Adam, RMSProp, and hard weight clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.9;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const OPT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    #[serde(alias = "rms-prop")]
    Rmsprop,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" | "rms-prop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

fn check_grads<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ParamCount {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteUpdate(i));
        }
    }
    Ok(())
}

fn zeros_like<T: Real>(params: &[&mut Tensor<T>]) -> Vec<Tensor<T>> {
    params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(DEFAULT_LR, ADAM_BETA1, ADAM_BETA2)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: OPT_EPSILON,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        if self.m.len() != params.len() {
            return Err(Error::ParamCount {
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powf(self.t as f64));
        let c2 = T::of(1.0 - self.beta2.powf(self.t as f64));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let slots = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in slots {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// RMSProp: `acc <- ρ acc + (1 - ρ) g²`, `p <- p - lr g / (sqrt(acc) + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    t: u64,
    acc: Vec<Tensor<T>>,
}

impl<T: Real> Default for RmsProp<T> {
    fn default() -> Self {
        Self::new(DEFAULT_LR, RMSPROP_DECAY)
    }
}

impl<T: Real> RmsProp<T> {
    pub fn new(lr: f64, decay: f64) -> Self {
        RmsProp {
            lr,
            decay,
            eps: OPT_EPSILON,
            t: 0,
            acc: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.acc
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.acc.is_empty() {
            self.acc = zeros_like(params);
        }
        if self.acc.len() != params.len() {
            return Err(Error::ParamCount {
                expected: self.acc.len(),
                actual: params.len(),
            });
        }
        self.t += 1;
        let (rho, lr, eps) = (T::of(self.decay), T::of(self.lr), T::of(self.eps));
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            for ((p, &g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *a = rho * *a + (T::one() - rho) * g * g;
                *p = *p - lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamp every value into `[-c, c]`.
pub fn clip_weights<T: Real>(params: &mut [&mut Tensor<T>], c: f64) {
    let (lo, hi) = (T::of(-c), T::of(c));
    for p in params.iter_mut() {
        for v in p.data_mut() {
            *v = v.max(lo).min(hi);
        }
    }
}

/// Serializable snapshot of an optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub steps: u64,
    /// Adam: all first moments then all second moments. RMSProp: accumulators.
    pub slots: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    RmsProp(RmsProp<T>),
}

impl<T: Real> Optimizer<T> {
    /// The optimizer with its default hyperparameters.
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::default()),
            OptimizerKind::Rmsprop => Optimizer::RmsProp(RmsProp::default()),
        }
    }

    pub fn with_lr(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, ADAM_BETA1, ADAM_BETA2)),
            OptimizerKind::Rmsprop => Optimizer::RmsProp(RmsProp::new(lr, RMSPROP_DECAY)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::RmsProp(_) => OptimizerKind::Rmsprop,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::RmsProp(o) => o.step(params, grads),
        }
    }

    pub fn state(&self) -> OptimizerState<T> {
        match self {
            Optimizer::Adam(o) => OptimizerState {
                kind: OptimizerKind::Adam,
                steps: o.t,
                slots: o.m.iter().chain(&o.v).cloned().collect(),
            },
            Optimizer::RmsProp(o) => OptimizerState {
                kind: OptimizerKind::Rmsprop,
                steps: o.t,
                slots: o.acc.clone(),
            },
        }
    }

    /// Restore moments and step count; hyperparameters stay as they are.
    pub fn load_state(&mut self, state: OptimizerState<T>) -> Result<()> {
        if state.kind != self.kind() {
            return Err(Error::Incompatible(format!(
                "optimizer state is {}, optimizer is {}",
                state.kind.tag(),
                self.kind().tag()
            )));
        }
        match self {
            Optimizer::Adam(o) => {
                if state.slots.len() % 2 != 0 {
                    return Err(Error::Incompatible("adam state needs paired moments".into()));
                }
                let mut m = state.slots;
                let v = m.split_off(m.len() / 2);
                o.m = m;
                o.v = v;
                o.t = state.steps;
            }
            Optimizer::RmsProp(o) => {
                o.acc = state.slots;
                o.t = state.steps;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[v]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::<f64>::default();
        let mut p = scalar(0.7);
        adam.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p.item(), 0.7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Independent scalar oracle for step 1: m = (1-b1) g, v = (1-b2) g^2,
        // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        for g in [0.37, -2.5, 1e-3] {
            let (lr, eps) = (DEFAULT_LR, OPT_EPSILON);
            let m = (1.0 - ADAM_BETA1) * g;
            let v = (1.0 - ADAM_BETA2) * g * g;
            let expected = -lr * (m / (1.0 - ADAM_BETA1)) / ((v / (1.0 - ADAM_BETA2)).sqrt() + eps);
            let mut adam = Adam::<f64>::default();
            let mut p = scalar(0.0);
            adam.step(&mut [&mut p], &[scalar(g)]).unwrap();
            assert!((p.item() - expected).abs() < 1e-18);
            assert!((p.item().abs() - lr).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_groups_are_independent() {
        let mut adam = Adam::<f64>::default();
        let mut a = Tensor::from_f64(vec![2], &[0.1, 0.2]).unwrap();
        let mut b = a.clone();
        let g = Tensor::from_f64(vec![2], &[0.5, -0.3]).unwrap();
        for _ in 0..3 {
            adam.step(&mut [&mut a, &mut b], &[g.clone(), g.clone()]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_rejected_before_mutation() {
        let mut adam = Adam::<f64>::default();
        let mut a = scalar(1.0);
        let mut b = scalar(2.0);
        let err = adam.step(&mut [&mut a, &mut b], &[scalar(0.1), scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::NonFiniteUpdate(1))));
        assert_eq!((a.item(), b.item(), adam.steps()), (1.0, 2.0, 0));
        let mut rms = RmsProp::<f64>::default();
        assert!(rms.step(&mut [&mut a], &[scalar(f64::INFINITY)]).is_err());
    }

    #[test]
    fn rmsprop_first_step() {
        let g = 0.8;
        let mut rms = RmsProp::<f64>::default();
        let mut p = scalar(0.0);
        rms.step(&mut [&mut p], &[scalar(g)]).unwrap();
        let expected = -DEFAULT_LR * g / ((0.1 * g * g).sqrt() + OPT_EPSILON);
        assert!((p.item() - expected).abs() < 1e-18);
        assert!((p.item() + DEFAULT_LR / 0.1f64.sqrt()).abs() < 1e-9);

        let mut q = scalar(0.3);
        let mut rms = RmsProp::<f64>::default();
        rms.step(&mut [&mut q], &[scalar(0.0)]).unwrap();
        assert_eq!(q.item(), 0.3);
    }

    #[test]
    fn rmsprop_accumulator_approaches_square() {
        let mut rms = RmsProp::<f64>::default();
        let mut p = scalar(0.0);
        let mut last_gap = f64::INFINITY;
        for _ in 0..50 {
            rms.step(&mut [&mut p], &[scalar(2.0)]).unwrap();
            let gap = 4.0 - rms.accumulators()[0].item();
            assert!(gap >= 0.0 && gap < last_gap);
            last_gap = gap;
        }
    }

    #[test]
    fn clipping() {
        let mut p: Tensor<f64> = Tensor::from_f64(vec![3], &[0.5, -0.005, -3.0]).unwrap();
        clip_weights(&mut [&mut p], 0.01);
        assert_eq!(p.data(), [0.01, -0.005, -0.01]);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let grads = |i: usize| vec![Tensor::from_f64(vec![2], &[(i as f64).sin(), (i as f64 * 0.7).cos()]).unwrap()];
        for kind in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
            let mut a = Optimizer::<f64>::new(kind);
            let mut pa = Tensor::from_f64(vec![2], &[0.2, -0.4]).unwrap();
            for i in 0..5 {
                a.step(&mut [&mut pa], &grads(i)).unwrap();
            }
            let mut b = Optimizer::<f64>::new(kind);
            b.load_state(a.state()).unwrap();
            let mut pb = pa.clone();
            for i in 5..20 {
                a.step(&mut [&mut pa], &grads(i)).unwrap();
                b.step(&mut [&mut pb], &grads(i)).unwrap();
            }
            assert_eq!(pa, pb);
        }
    }
}
