//! Adversarial objectives as paired generator/discriminator losses.
//!
//! Discriminator outputs are `[batch, 1]` (or `[batch]`) tape values. GAN
//! losses expect probabilities from a sigmoid head; the Wasserstein variants
//! expect raw critic scores from a linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_GP_LAMBDA: f64 = 10.0;
pub const DEFAULT_CLIP_BOUND: f64 = 0.01;

/// Offset inside the square root of the gradient norm; keeps the norm's own
/// derivative finite when a critic has zero input gradient.
pub const GRAD_NORM_EPS: f64 = 1e-16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Gan,
    Wgan,
    WganGp,
}

impl ObjectiveKind {
    pub fn tag(self) -> &'static str {
        match self {
            ObjectiveKind::Gan => "gan",
            ObjectiveKind::Wgan => "wgan",
            ObjectiveKind::WganGp => "wgan-gp",
        }
    }

    /// The discriminator head this objective requires.
    pub fn head(self) -> Head {
        match self {
            ObjectiveKind::Gan => Head::Sigmoid,
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => Head::Linear,
        }
    }

    pub fn default_n_critic(self) -> usize {
        match self {
            ObjectiveKind::Gan => 1,
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => 5,
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gan" => Ok(ObjectiveKind::Gan),
            "wgan" => Ok(ObjectiveKind::Wgan),
            "wgan-gp" | "wgangp" => Ok(ObjectiveKind::WganGp),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Sigmoid,
    Linear,
}

/// Active objective with the settings its kind uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialObjective {
    pub kind: ObjectiveKind,
    /// Weight-clipping bound `c` (WGAN only).
    pub clip_bound: f64,
    /// Penalty coefficient (WGAN-GP only). `1.0` gives the unweighted penalty.
    pub gp_lambda: f64,
    /// Discriminator updates per generator update.
    pub n_critic: usize,
}

impl AdversarialObjective {
    pub fn new(kind: ObjectiveKind) -> Self {
        AdversarialObjective {
            kind,
            clip_bound: DEFAULT_CLIP_BOUND,
            gp_lambda: DEFAULT_GP_LAMBDA,
            n_critic: kind.default_n_critic(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic == 0 {
            return Err(Error::Config("n_critic must be at least 1".into()));
        }
        if self.kind == ObjectiveKind::Wgan && !(self.clip_bound > 0.0) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.clip_bound)));
        }
        if self.kind == ObjectiveKind::WganGp && !(self.gp_lambda >= 0.0) {
            return Err(Error::Config(format!("gp lambda must be non-negative, got {}", self.gp_lambda)));
        }
        Ok(())
    }

    pub fn check_head(&self, head: Head) -> Result<()> {
        if head != self.kind.head() {
            return Err(Error::Incompatible(format!(
                "{} needs a {:?} discriminator head, got {head:?}",
                self.kind.tag(),
                self.kind.head()
            )));
        }
        Ok(())
    }
}

fn check_probabilities<T: Real>(tape: &Tape<T>, d: Var) -> Result<()> {
    let bad = tape
        .value(d)
        .data()
        .iter()
        .find(|&&p| !(p > T::zero() && p < T::one()));
    match bad {
        Some(&p) => Err(Error::Domain {
            op: "gan_losses",
            value: p.as_f64(),
            domain: "(0, 1)",
        }),
        None => Ok(()),
    }
}

/// Non-saturating GAN losses from discriminator probabilities:
/// `g = -mean(log d_fake)`, `d = -mean(log d_real) - mean(log(1 - d_fake))`.
pub fn gan_losses<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    check_probabilities(tape, d_real)?;
    check_probabilities(tape, d_fake)?;
    let log_fake = tape.log(d_fake)?;
    let m = tape.mean_all(log_fake);
    let g = tape.neg(m);

    let log_real = tape.log(d_real)?;
    let real_term = tape.mean_all(log_real);
    let one_minus = tape.affine(d_fake, -1.0, 1.0);
    let log_rest = tape.log(one_minus)?;
    let fake_term = tape.mean_all(log_rest);
    let both = tape.add(real_term, fake_term)?;
    let d = tape.neg(both);
    Ok((g, d))
}

/// The same losses computed from pre-sigmoid logits, using
/// `-log σ(l) = softplus(-l)` and `-log(1 - σ(l)) = softplus(l)`. Stays finite
/// when the sigmoid saturates.
pub fn gan_losses_from_logits<T: Real>(
    tape: &mut Tape<T>,
    l_real: Var,
    l_fake: Var,
) -> Result<(Var, Var)> {
    let neg_fake = tape.neg(l_fake);
    let sp = tape.softplus(neg_fake);
    let g = tape.mean_all(sp);

    let neg_real = tape.neg(l_real);
    let sp_real = tape.softplus(neg_real);
    let real_term = tape.mean_all(sp_real);
    let sp_fake = tape.softplus(l_fake);
    let fake_term = tape.mean_all(sp_fake);
    let d = tape.add(real_term, fake_term)?;
    Ok((g, d))
}

/// `g = -mean(d_fake)`, `d = mean(d_fake) - mean(d_real)`.
pub fn wgan_losses<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let fake = tape.mean_all(d_fake);
    let real = tape.mean_all(d_real);
    let g = tape.neg(fake);
    let d = tape.sub(fake, real)?;
    Ok((g, d))
}

/// WGAN losses with the gradient penalty added to the critic side.
pub fn wgan_gp_losses<T: Real>(
    tape: &mut Tape<T>,
    d_real: Var,
    d_fake: Var,
    penalty: Var,
) -> Result<(Var, Var)> {
    let (g, d) = wgan_losses(tape, d_real, d_fake)?;
    let d = tape.add(d, penalty)?;
    Ok((g, d))
}

/// `mean(d_real) - mean(d_fake)`, the critic's estimate of the distance.
pub fn wasserstein_estimate<T: Real>(tape: &Tape<T>, d_real: Var, d_fake: Var) -> f64 {
    let mean = |v: Var| {
        let t = tape.value(v);
        t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.len() as f64
    };
    mean(d_real) - mean(d_fake)
}

/// Random points on the segments between paired real and fake samples:
/// `x̂ = ε real + (1 - ε) fake`, one `ε ~ U[0, 1]` per sample.
pub fn sample_interpolates<T: Real, R: Rng + ?Sized>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps: Vec<f64> = (0..real.rows()).map(|_| rng.gen::<f64>()).collect();
    interpolate_with(real, fake, &eps)
}

/// [`sample_interpolates`] with the mixing weights given.
pub fn interpolate_with<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[f64]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_interpolates",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    if eps.len() != real.rows() {
        return Err(Error::ShapeMismatch {
            op: "sample_interpolates",
            lhs: real.shape().to_vec(),
            rhs: vec![eps.len()],
        });
    }
    let width = real.len() / real.rows();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = T::of(eps[i / width]);
            e * r + (T::one() - e) * f
        })
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// `λ · mean_i (‖∇_x̂ D(x̂)_i‖₂ − 1)²` with the norm taken per sample over all
/// of its values.
///
/// `xhat` must be a leaf flagged for gradients. `critic` evaluates the
/// discriminator on it. The result stays differentiable with respect to
/// every parameter the critic bound on the tape.
pub fn gradient_penalty<T, F>(tape: &mut Tape<T>, critic: F, xhat: Var, lambda: f64) -> Result<Var>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let scores = critic(tape, xhat)?;
    let total = tape.sum_all(scores);
    let grad = tape.grad_of_grad(total, xhat)?;
    let norm = tape.row_norm(grad, GRAD_NORM_EPS)?;
    let dev = tape.shift(norm, -1.0);
    let sq = tape.mul(dev, dev)?;
    let m = tape.mean_all(sq);
    Ok(tape.scale(m, lambda))
}
