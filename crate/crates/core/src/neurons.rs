//! Binary output neurons and their sigmoid-adjusted straight-through gradient.
//!
//! Both neuron kinds first compute the preactivated output `p = σ(τx)`:
//!
//! - deterministic: fire iff `p >= 0.5`
//! - stochastic: draw `v ~ U[0, 1)` and fire iff `p >= v`
//!
//! The step at zero counts as firing (`u(0) = 1`). In the backward pass the
//! binarization is skipped and the gradient of the sigmoid is used instead,
//! `upstream * τ * p * (1 - p)`, for both kinds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Factor applied to the slope after every epoch.
pub const SLOPE_ANNEAL_FACTOR: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronMode {
    Deterministic,
    Stochastic,
    /// Plain sigmoid outputs, the real-valued baseline.
    RealValued,
}

impl NeuronMode {
    pub fn is_binary(self) -> bool {
        !matches!(self, NeuronMode::RealValued)
    }

    pub fn tag(self) -> &'static str {
        match self {
            NeuronMode::Deterministic => "dbn",
            NeuronMode::Stochastic => "sbn",
            NeuronMode::RealValued => "real",
        }
    }
}

impl std::str::FromStr for NeuronMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dbn" | "deterministic" => Ok(NeuronMode::Deterministic),
            "sbn" | "stochastic" => Ok(NeuronMode::Stochastic),
            "real" | "real-valued" | "real_valued" => Ok(NeuronMode::RealValued),
            other => Err(Error::Config(format!("unknown neuron mode `{other}`"))),
        }
    }
}

/// Preactivated outputs `σ(τx)` from the last forward call, one per neuron
/// per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PreactivationRecord<T> {
    pub values: Tensor<T>,
}

/// Clamp into the open unit interval. In `f32`, `σ(x)` rounds to exactly 1
/// once `x` exceeds about 17.
fn open_unit<T: Real>(p: T) -> T {
    let half_eps = T::epsilon() / T::of(2.0);
    p.max(T::min_positive_value()).min(T::one() - half_eps)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `σ(τx)` elementwise, strictly inside (0, 1).
pub fn preactivate<T: Real>(x: &Tensor<T>, slope: f64) -> PreactivationRecord<T> {
    let tau = T::of(slope);
    PreactivationRecord {
        values: x.map(|v| open_unit(sigmoid(tau * v))),
    }
}

fn fire<T: Real>(p: T, threshold: T) -> T {
    if p >= threshold {
        T::one()
    } else {
        T::zero()
    }
}

/// Deterministic binary neuron.
pub fn dbn_forward<T: Real>(x: &Tensor<T>, slope: f64) -> (Tensor<T>, PreactivationRecord<T>) {
    let record = preactivate(x, slope);
    let half = T::of(0.5);
    (record.values.map(|p| fire(p, half)), record)
}

/// Stochastic binary neuron with one uniform draw per neuron.
pub fn sbn_forward<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    slope: f64,
    rng: &mut R,
) -> (Tensor<T>, PreactivationRecord<T>) {
    let thresholds: Vec<f64> = (0..x.len()).map(|_| rng.gen::<f64>()).collect();
    sbn_forward_with_thresholds(x, slope, &thresholds)
}

/// Stochastic binary neuron with the uniform draws supplied by the caller.
pub fn sbn_forward_with_thresholds<T: Real>(
    x: &Tensor<T>,
    slope: f64,
    thresholds: &[f64],
) -> (Tensor<T>, PreactivationRecord<T>) {
    assert_eq!(thresholds.len(), x.len(), "one threshold per neuron");
    let record = preactivate(x, slope);
    let data = record
        .values
        .data()
        .iter()
        .zip(thresholds)
        .map(|(&p, &v)| fire(p, T::of(v)))
        .collect();
    let out = Tensor::new(x.shape().to_vec(), data).expect("same shape as input");
    (out, record)
}

/// Local derivative `τ p (1 - p)` of the sigmoid surrogate.
fn surrogate_slope<T: Real>(record: &PreactivationRecord<T>, slope: f64) -> Tensor<T> {
    let tau = T::of(slope);
    record.values.map(|p| tau * p * (T::one() - p))
}

/// Sigmoid-adjusted straight-through gradient: `upstream * τ * p * (1 - p)`.
pub fn ste_backward<T: Real>(
    upstream: &Tensor<T>,
    record: &PreactivationRecord<T>,
    slope: f64,
) -> Result<Tensor<T>> {
    if upstream.shape() != record.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            lhs: upstream.shape().to_vec(),
            rhs: record.values.shape().to_vec(),
        });
    }
    let local = surrogate_slope(record, slope);
    let data = upstream
        .data()
        .iter()
        .zip(local.data())
        .map(|(&g, &d)| g * d)
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Output layer of a generator: binary neurons (or the real-valued baseline)
/// applied to the final pre-sigmoid activations.
#[derive(Clone, Debug)]
pub struct BinaryOutputLayer {
    mode: NeuronMode,
    base_slope: f64,
    anneals: i32,
    annealing: bool,
    rng: rng::Rng,
}

impl BinaryOutputLayer {
    pub fn new(mode: NeuronMode, rng: rng::Rng) -> Self {
        BinaryOutputLayer {
            mode,
            base_slope: 1.0,
            anneals: 0,
            annealing: true,
            rng,
        }
    }

    pub fn mode(&self) -> NeuronMode {
        self.mode
    }

    /// `τ = base · 1.1^k` after `k` anneal steps.
    pub fn slope(&self) -> f64 {
        self.base_slope * SLOPE_ANNEAL_FACTOR.powi(self.anneals)
    }

    pub fn set_slope(&mut self, slope: f64) -> Result<()> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::Config(format!("slope must be positive, got {slope}")));
        }
        self.base_slope = slope;
        self.anneals = 0;
        Ok(())
    }

    pub fn set_annealing(&mut self, on: bool) {
        self.annealing = on;
    }

    pub fn annealing(&self) -> bool {
        self.annealing
    }

    pub fn rng_mut(&mut self) -> &mut rng::Rng {
        &mut self.rng
    }

    /// Raise the slope by a factor of 1.1; called once per completed epoch. A no-op
    /// with annealing disabled or in real-valued mode.
    pub fn anneal_slope(&mut self) {
        if self.annealing && self.mode.is_binary() {
            self.anneals += 1;
        }
    }

    /// Binarize `logits` on the tape, drawing stochastic thresholds from the
    /// layer's own stream.
    pub fn forward<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        logits: Var,
    ) -> Result<(Var, PreactivationRecord<T>)> {
        let (mode, slope) = (self.mode, self.slope());
        forward_with(mode, slope, tape, logits, &mut self.rng)
    }

    /// Same as [`forward`](Self::forward) with an external random stream.
    pub fn forward_with_rng<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        rng: &mut R,
    ) -> Result<(Var, PreactivationRecord<T>)> {
        forward_with(self.mode, self.slope(), tape, logits, rng)
    }
}

fn forward_with<T: Real, R: Rng + ?Sized>(
    mode: NeuronMode,
    slope: f64,
    tape: &mut Tape<T>,
    logits: Var,
    rng: &mut R,
) -> Result<(Var, PreactivationRecord<T>)> {
    let x = tape.value(logits);
    let (value, record, local, name) = match mode {
        NeuronMode::Deterministic => {
            let (out, rec) = dbn_forward(x, slope);
            let local = surrogate_slope(&rec, slope);
            (out, rec, local, "binary_neuron")
        }
        NeuronMode::Stochastic => {
            let (out, rec) = sbn_forward(x, slope, rng);
            let local = surrogate_slope(&rec, slope);
            (out, rec, local, "binary_neuron")
        }
        NeuronMode::RealValued => {
            let rec = preactivate(x, 1.0);
            let local = surrogate_slope(&rec, 1.0);
            (rec.values.clone(), rec, local, "sigmoid_output")
        }
    };
    let out = tape.custom_grad(name, logits, value, local)?;
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![v.len()], v).unwrap()
    }

    #[test]
    fn dbn_thresholds_at_half() {
        let (out, rec) = dbn_forward(&t(&[3.0, -3.0, 0.0]), 1.0);
        assert_eq!(out.data(), [1.0, 0.0, 1.0]);
        assert!((rec.values.data()[0] - 0.9525741268224334).abs() < 1e-12);
        assert_eq!(rec.values.data()[2], 0.5);
    }

    #[test]
    fn dbn_is_deterministic() {
        let x = t(&[0.1, -0.2, 0.7]);
        assert_eq!(dbn_forward(&x, 1.3).0, dbn_forward(&x, 1.3).0);
    }

    #[test]
    fn sbn_saturates() {
        let mut rng = stream(0, Stream::Neurons);
        let x = Tensor::<f64>::full(vec![10_000], 20.0);
        let (out, _) = sbn_forward(&x, 1.0, &mut rng);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sbn_matches_dbn_at_half_threshold() {
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let x = t(&grid);
        let (s, _) = sbn_forward_with_thresholds(&x, 1.0, &vec![0.5; grid.len()]);
        let (d, _) = dbn_forward(&x, 1.0);
        assert_eq!(s, d);
    }

    #[test]
    fn ste_values() {
        let rec = preactivate(&t(&[0.0]), 1.0);
        assert_eq!(ste_backward(&t(&[1.0]), &rec, 1.0).unwrap().data(), [0.25]);
        let tau = 1.1 * 1.1;
        let rec = preactivate(&t(&[0.0]), tau);
        let g = ste_backward(&t(&[1.0]), &rec, tau).unwrap();
        assert!((g.data()[0] - 0.3025).abs() < 1e-15);
        let rec = preactivate(&t(&[20.0, -20.0]), 1.0);
        let g = ste_backward(&t(&[1.0, 1.0]), &rec, 1.0).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn ste_shape_mismatch() {
        let rec = preactivate(&t(&[0.0, 1.0]), 1.0);
        assert!(ste_backward(&t(&[1.0]), &rec, 1.0).is_err());
    }

    #[test]
    fn anneal_and_disable() {
        let mut layer = BinaryOutputLayer::new(NeuronMode::Deterministic, stream(0, Stream::Neurons));
        layer.anneal_slope();
        assert_eq!(layer.slope(), 1.1);
        layer.set_annealing(false);
        layer.anneal_slope();
        assert_eq!(layer.slope(), 1.1);
    }

    #[test]
    fn outputs_are_pure_and_gradient_is_surrogate() {
        for mode in [NeuronMode::Deterministic, NeuronMode::Stochastic] {
            let mut layer = BinaryOutputLayer::new(mode, stream(5, Stream::Neurons));
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_f64(vec![4], &[-2.0, -0.1, 0.3, 5.0]).unwrap(), true);
            let (y, rec) = layer.forward(&mut tape, x).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 1.0));
            let loss = tape.sum_all(y);
            let g = tape.backward(loss).unwrap();
            let expected = ste_backward(&Tensor::ones(vec![4]), &rec, 1.0).unwrap();
            assert_eq!(g.get(x).unwrap(), &expected);
        }
    }

    #[test]
    fn real_valued_stays_open() {
        let mut layer = BinaryOutputLayer::new(NeuronMode::RealValued, stream(0, Stream::Neurons));
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(vec![3], &[-200.0, 0.0, 200.0]).unwrap());
        let (y, _) = layer.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
