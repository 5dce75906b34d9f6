//! FGSM and PGD l-infinity attacks against any gradient provider, plus the
//! batched replay attack that amortizes chain re-materialization across the
//! whole attack set.
//!
//! FGSM is literally PGD with one step of size epsilon, and both run through
//! the same loop, so the identity holds bitwise. Attacks never look at
//! anything but the true labels (untargeted ascent on cross-entropy).

use crate::data::Dataset;
use crate::ensemble::{
    ensemble_input_grad, EnsembleModel, EnsembleSource, GradientMode, Predictor, SingleModel,
};
use crate::error::{Error, Result};
use crate::losses::{predict_classes, LossKind};
use crate::tensor::{Elem, Tensor};

/// l-infinity attack parameters; pixel units on the [0, 1] scale.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    /// Perturbation budget epsilon.
    pub epsilon: f64,
    /// Step size alpha.
    pub alpha: f64,
    /// Iteration count k.
    pub iterations: usize,
    /// Valid pixel range, normally [0, 1].
    pub clip: (f64, f64),
    /// Gradient mode used when the provider is an ensemble (recorded in
    /// manifests; the provider itself carries the operative choice).
    pub gradient_mode: GradientMode,
    /// Start from a uniform random point inside the ball instead of x.
    pub random_start: bool,
    /// Seed for the random start.
    pub seed: u64,
}

impl AttackConfig {
    /// Plain PGD configuration at the conventional [0, 1] pixel range.
    pub fn pgd(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha,
            iterations,
            clip: (0.0, 1.0),
            gradient_mode: GradientMode::default(),
            random_start: false,
            seed: 0,
        }
    }

    /// The single-step configuration FGSM reduces to. A zero budget still
    /// validates (the step size floor is collapsed by the projection).
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig::pgd(epsilon, epsilon.max(f64::MIN_POSITIVE), 1)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon >= 0.0
            && self.alpha > 0.0
            && self.iterations >= 1
            && self.clip.0 < self.clip.1;
        if !ok {
            return Err(Error::Config(format!("invalid attack config: {self:?}")));
        }
        Ok(())
    }
}

/// The attack-side contract: per-example input gradient of the provider's
/// loss at (batch, labels). Output shape equals the batch shape.
pub trait GradientProvider {
    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor>;
    fn id(&self) -> String;
}

impl GradientProvider for SingleModel<'_> {
    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.network
            .grad_input(self.params, batch, &LossKind::CrossEntropy { labels })
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

impl GradientProvider for EnsembleModel<'_> {
    fn input_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
        ensemble_input_grad(self.source, batch, labels, self.mode)
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

/// Adversarial inputs with their provenance.
#[derive(Clone, Debug)]
pub struct AdversarialSet {
    /// Dataset indices of the attacked examples (positional by default).
    pub indices: Vec<usize>,
    /// Perturbed inputs, one per attacked example.
    pub adversarial: Tensor,
    /// Whether the provider misclassifies the adversarial input; filled by
    /// [`AdversarialSet::evaluate_flipped`].
    pub flipped: Vec<bool>,
    pub config: AttackConfig,
    pub provider: String,
}

impl AdversarialSet {
    /// Rebind positional indices to original dataset indices.
    pub fn with_indices(mut self, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != self.adversarial.batch() {
            return Err(Error::CountMismatch {
                images: self.adversarial.batch(),
                labels: indices.len(),
            });
        }
        self.indices = indices;
        Ok(self)
    }

    /// Mark which adversarial inputs the given predictor misclassifies.
    pub fn evaluate_flipped(&mut self, predictor: &dyn Predictor, labels: &[usize]) -> Result<()> {
        let probs = predictor.predict_probs(&self.adversarial)?;
        let preds = predict_classes(&probs);
        self.flipped = preds.iter().zip(labels).map(|(p, l)| p != l).collect();
        Ok(())
    }
}

/// Elementwise sign with sign(0) = 0: zero-gradient coordinates stay put.
pub fn sign(t: &Tensor) -> Result<Tensor> {
    t.check_finite("sign input")?;
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Clamp `x` into the epsilon ball around `orig`, then into the pixel range.
pub fn project_linf(orig: &Tensor, x: &Tensor, epsilon: f64, clip: (f64, f64)) -> Tensor {
    debug_assert_eq!(orig.shape(), x.shape());
    let eps = epsilon as Elem;
    let (lo, hi) = (clip.0 as Elem, clip.1 as Elem);
    let mut out = x.clone();
    for (v, &o) in out.data_mut().iter_mut().zip(orig.data()) {
        *v = v.max(o - eps).min(o + eps).max(lo).min(hi);
    }
    out
}

/// k steps of sign-gradient ascent, each projected back onto the ball and
/// the pixel range. Gradients are evaluated at the current iterate.
pub fn pgd<P: GradientProvider>(
    provider: &P,
    batch: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialSet> {
    config.validate()?;
    let mut x = batch.clone();
    if config.random_start {
        let mut rng = crate::rng::SplitMix64::derive(config.seed, "pgd-start");
        for v in x.data_mut() {
            *v += rng.uniform(-config.epsilon, config.epsilon) as Elem;
        }
        x = project_linf(batch, &x, config.epsilon, config.clip);
    }
    for _ in 0..config.iterations {
        let grad = provider.input_grad(&x, labels)?;
        let step = sign(&grad)?;
        let alpha = config.alpha as Elem;
        for (v, &s) in x.data_mut().iter_mut().zip(step.data()) {
            *v += alpha * s;
        }
        x = project_linf(batch, &x, config.epsilon, config.clip);
    }
    Ok(AdversarialSet {
        indices: (0..batch.batch()).collect(),
        adversarial: x,
        flipped: vec![false; batch.batch()],
        config: config.clone(),
        provider: provider.id(),
    })
}

/// Single-step sign attack: x + epsilon * sign(grad), clamped to the pixel
/// range. Exactly one provider call.
pub fn fgsm<P: GradientProvider>(
    provider: &P,
    batch: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip: (f64, f64),
) -> Result<AdversarialSet> {
    let config = AttackConfig {
        clip,
        ..AttackConfig::fgsm(epsilon)
    };
    pgd(provider, batch, labels, &config)
}

/// PGD against an ensemble with the whole attack set as one batch: each of
/// the k steps performs exactly one pass over the members (one chain replay
/// for a replayed source), so member materializations total k * K however
/// many inputs are attacked.
pub fn batched_ensemble_attack(
    source: &EnsembleSource,
    dataset: &Dataset,
    indices: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialSet> {
    if indices.is_empty() {
        return Err(Error::EmptyEligibleSet);
    }
    let (batch, labels) = dataset.batch(indices)?;
    let provider = EnsembleModel {
        source,
        mode: config.gradient_mode,
        name: format!("ensemble-k{}", source.len()),
    };
    pgd(&provider, &batch, &labels, config)?.with_indices(indices.to_vec())
}
