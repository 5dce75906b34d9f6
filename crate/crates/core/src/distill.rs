//! Dark-knowledge distillation: a student network trained to match the
//! teacher's predictive distribution on noise-perturbed minibatches, either
//! interleaved with a live posterior chain ([`run_bdk`]) or against a frozen
//! teacher ([`distill_fixed_teacher`]).
//!
//! The teacher chain inside [`run_bdk`] consumes exactly the streams a
//! standalone chain would, so the kept samples are bitwise identical to
//! running the sampler alone with the same seed; student-side randomness
//! (input perturbation, initialization) derives from the distillation seed
//! instead.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::nn::{backward_full, build_network, forward, forward_trace, Network, ParamVector};
use crate::optimizer::{adam_step, lr_at, AdamConfig, AdamState};
use crate::rng::SplitMix64;
use crate::sampler::{sgld_step, ChainRecord, NetworkModel, SamplerState, SgldConfig};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub student_adam: AdamConfig,
    /// Per-pixel Gaussian noise standard deviation applied to minibatches.
    pub sigma: f64,
    /// Seed for student initialization and input perturbation; independent
    /// of the teacher chain seed.
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(Error::Config(format!("negative sigma {}", self.sigma)));
        }
        self.student_adam.validate()
    }
}

/// Student network and optimizer state.
pub struct StudentState {
    pub network: Network,
    pub adam: AdamState,
}

impl StudentState {
    pub fn params(&self) -> &ParamVector {
        &self.adam.params
    }
}

/// x' = x + sigma * n with standard normal n per pixel, labels untouched,
/// no clipping: teacher and student both see the raw perturbed values.
/// The noise stream is consumed even for sigma = 0.
pub fn perturb_minibatch(batch: &Tensor, sigma: f64, rng: &mut SplitMix64) -> Tensor {
    let mut out = batch.clone();
    for v in out.data_mut() {
        *v += (sigma * rng.normal()) as Elem;
    }
    out
}

/// One distillation update: teacher probabilities on the perturbed batch are
/// constants; the student takes a single Adam step on the summed KL. Returns
/// the KL value. All-zero gradients short-circuit, leaving the student
/// untouched.
pub fn distill_step(
    teacher: &Network,
    teacher_params: &ParamVector,
    student: &mut StudentState,
    perturbed: &Tensor,
    config: &DistillConfig,
    epoch: u64,
) -> Result<f64> {
    let teacher_probs = losses::softmax(&forward(teacher, teacher_params, perturbed)?)?;

    let trace = forward_trace(&student.network, student.params(), perturbed)?;
    let student_probs = losses::softmax(trace.logits())?;
    let kl = losses::loss_kl(&teacher_probs, &student_probs)?;

    // d(sum KL)/dz = student_probs - teacher_probs
    let mut dlogits = student_probs;
    for (v, &t) in dlogits.data_mut().iter_mut().zip(teacher_probs.data()) {
        *v -= t;
    }
    let (grads, _) = backward_full(&student.network, student.params(), &trace, &dlogits)?;
    if !grads.all_zero() {
        adam_step(&mut student.adam, &grads, &config.student_adam, epoch)?;
    }
    Ok(kl as f64)
}

/// Jointly run the teacher chain and the student: per iteration, one SGLD
/// step, one perturbed copy of the same minibatch, one student update.
/// `on_step(iteration, kl, student_lr)` fires every iteration.
pub fn run_bdk<F>(
    teacher: &Network,
    teacher_init: &ParamVector,
    teacher_config: &SgldConfig,
    distill: &DistillConfig,
    dataset: &Dataset,
    mut on_step: F,
) -> Result<(ChainRecord, ParamVector)>
where
    F: FnMut(u64, f64, f64),
{
    teacher_config.validate()?;
    distill.validate()?;
    let model = NetworkModel {
        network: teacher,
        dataset,
    };
    let mut teacher_state = SamplerState::new(teacher_init.clone(), teacher_config)?;
    let (student_net, student_init) = build_network(teacher.spec().clone(), distill.seed)?;
    let mut student = StudentState {
        network: student_net,
        adam: AdamState::new(student_init),
    };
    let mut perturb_rng = SplitMix64::derive(distill.seed, "perturb");
    let iters_per_epoch =
        (dataset.len() as u64).div_ceil(teacher_config.batch_size as u64);

    for t in 1..=teacher_config.total_iters {
        let batch_indices = teacher_state.next_batch();
        sgld_step(&mut teacher_state, &model, &batch_indices, teacher_config, None)?;

        let (inputs, _) = dataset.batch(&batch_indices)?;
        let perturbed = perturb_minibatch(&inputs, distill.sigma, &mut perturb_rng);
        let epoch = (t - 1) / iters_per_epoch;
        let kl = distill_step(
            teacher,
            &teacher_state.params,
            &mut student,
            &perturbed,
            distill,
            epoch,
        )
        .map_err(|e| match e {
            Error::NonFiniteValue { context, .. } => Error::non_finite_at(context, t),
            other => other,
        })?;
        on_step(t, kl, lr_at(&distill.student_adam, epoch));
    }

    let record = ChainRecord {
        spec: teacher.spec().clone(),
        init_params: teacher_init.clone(),
        config: teacher_config.clone(),
        dataset_name: dataset.name.clone(),
        dataset_hash: dataset.content_hash(),
    };
    Ok((record, student.adam.params))
}

/// Distill against a frozen teacher parameter vector for `iterations`
/// minibatch steps. The sigma = 0 case is the convergence sanity check:
/// held-out KL should fall well below anything a mismatched student allows.
pub fn distill_fixed_teacher<F>(
    teacher: &Network,
    teacher_params: &ParamVector,
    dataset: &Dataset,
    distill: &DistillConfig,
    batch_size: usize,
    iterations: u64,
    mut on_step: F,
) -> Result<StudentState>
where
    F: FnMut(u64, f64, f64),
{
    distill.validate()?;
    let (student_net, student_init) = build_network(teacher.spec().clone(), distill.seed)?;
    let mut student = StudentState {
        network: student_net,
        adam: AdamState::new(student_init),
    };
    let mut stream = crate::data::MinibatchStream::with_rng(
        dataset.len(),
        batch_size,
        SplitMix64::derive(distill.seed, "fixed-teacher-batches"),
    )?;
    let mut perturb_rng = SplitMix64::derive(distill.seed, "perturb");
    let iters_per_epoch = (dataset.len() as u64).div_ceil(batch_size as u64);
    for t in 1..=iterations {
        let indices = stream.next_batch();
        let (inputs, _) = dataset.batch(&indices)?;
        let perturbed = perturb_minibatch(&inputs, distill.sigma, &mut perturb_rng);
        let epoch = (t - 1) / iters_per_epoch;
        let kl = distill_step(teacher, teacher_params, &mut student, &perturbed, distill, epoch)?;
        on_step(t, kl, lr_at(&distill.student_adam, epoch));
    }
    Ok(student)
}

/// Mean per-example KL(teacher || student) over a held-out dataset.
pub fn mean_holdout_kl(
    teacher: &Network,
    teacher_params: &ParamVector,
    student: &Network,
    student_params: &ParamVector,
    holdout: &Dataset,
) -> Result<f64> {
    let mut total = 0.0;
    let indices: Vec<usize> = (0..holdout.len()).collect();
    for chunk in indices.chunks(256) {
        let (inputs, _) = holdout.batch(chunk)?;
        let t = losses::softmax(&forward(teacher, teacher_params, &inputs)?)?;
        let s = losses::softmax(&forward(student, student_params, &inputs)?)?;
        total += losses::loss_kl(&t, &s)? as f64;
    }
    Ok(total / holdout.len() as f64)
}
