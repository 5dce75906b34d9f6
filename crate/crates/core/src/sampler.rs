//! Stochastic gradient Langevin dynamics with burn-in, thinning, and exact
//! seed replay.
//!
//! A chain consumes two independent counter-based streams, both derived from
//! the chain seed: one for minibatch shuffling, one for Langevin noise.
//! Because each stream's state is just `(key, counter)` and every floating
//! point reduction in the gradient path has a fixed order, re-running a chain
//! from its [`ChainRecord`] reproduces every kept sample bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MinibatchStream};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, ParamVector};
use crate::rng::SplitMix64;
use crate::tensor::Elem;

/// Parameter norm beyond which a chain is declared divergent.
const DIVERGENCE_NORM: f64 = 1e6;

/// Reading of the Langevin noise scale. The update injects z_t with
/// covariance eta*I by default; `StdDevEta` instead uses standard deviation
/// eta, the alternative reading of "N(0, eta I)".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseConvention {
    #[default]
    VarianceEta,
    StdDevEta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgldConfig {
    /// Step size eta.
    pub learning_rate: f64,
    /// Prior precision lambda of the zero-centered spherical Gaussian prior.
    pub prior_precision: f64,
    /// Total training-set size N (the likelihood rescaling numerator).
    pub dataset_size: usize,
    /// Minibatch size M. Short trailing epoch batches still rescale by this
    /// configured value.
    pub batch_size: usize,
    /// Iterations discarded before any sample is kept.
    pub burn_in: u64,
    /// Keep every thinning-th post-burn-in sample.
    pub thinning: u64,
    /// Total iterations T.
    pub total_iters: u64,
    /// Chain seed; all randomness derives from it.
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConvention,
    /// Optional polynomial step decay: eta_t = eta * (1 + t)^(-decay).
    /// Off by default; the benchmark recipes use a fixed rate.
    #[serde(default)]
    pub eta_decay: Option<f64>,
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.prior_precision >= 0.0
            && self.batch_size >= 1
            && self.batch_size <= self.dataset_size
            && self.thinning >= 1
            && self.total_iters > self.burn_in;
        if !ok {
            return Err(Error::Config(format!("invalid sampler config: {self:?}")));
        }
        Ok(())
    }

    /// Number of kept samples: floor((T - B) / thinning).
    pub fn kept_samples(&self) -> u64 {
        (self.total_iters - self.burn_in) / self.thinning
    }

    /// Step size at iteration t (0-based).
    pub fn eta_at(&self, t: u64) -> f64 {
        match self.eta_decay {
            None => self.learning_rate,
            Some(decay) => self.learning_rate * ((1 + t) as f64).powf(-decay),
        }
    }
}

/// Anything SGLD can sample: exposes the summed log-likelihood gradient of a
/// minibatch. The prior term is handled by the sampler itself.
pub trait SgldModel: Sync {
    fn param_count(&self) -> usize;
    fn data_len(&self) -> usize;
    /// sum over the batch of grad_theta log p(y_i | x_i, theta).
    fn batch_loglik_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<ParamVector>;
}

/// Classifier over a dataset: log-likelihood is the negated cross-entropy.
pub struct NetworkModel<'a> {
    pub network: &'a Network,
    pub dataset: &'a Dataset,
}

impl SgldModel for NetworkModel<'_> {
    fn param_count(&self) -> usize {
        self.network.param_count()
    }

    fn data_len(&self) -> usize {
        self.dataset.len()
    }

    fn batch_loglik_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let (inputs, labels) = self.dataset.batch(batch)?;
        self.network.batch_loglik_grad(params, &inputs, &labels)
    }
}

/// One-parameter conjugate toy model p(y | theta) = N(y; theta, 1), used by
/// the posterior oracle: its exact posterior is available in closed form.
pub struct GaussianMeanModel {
    pub observations: Vec<f64>,
}

impl SgldModel for GaussianMeanModel {
    fn param_count(&self) -> usize {
        1
    }

    fn data_len(&self) -> usize {
        self.observations.len()
    }

    fn batch_loglik_grad(&self, params: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
        let theta = params.as_slice()[0] as f64;
        let g: f64 = batch.iter().map(|&i| self.observations[i] - theta).sum();
        Ok(ParamVector::from_vec(vec![g as Elem]))
    }
}

/// Gradient of the log prior: -lambda * theta elementwise.
pub fn grad_log_prior(params: &ParamVector, precision: f64) -> ParamVector {
    let mut g = params.clone();
    g.scale(-(precision as Elem));
    g
}

/// In-flight chain state. Strictly sequential: each step consumes the
/// minibatch stream and noise stream in order.
pub struct SamplerState {
    pub params: ParamVector,
    /// Completed iterations.
    pub iteration: u64,
    noise_rng: SplitMix64,
    stream: MinibatchStream,
}

impl SamplerState {
    pub fn new(init: ParamVector, config: &SgldConfig) -> Result<Self> {
        config.validate()?;
        Ok(SamplerState {
            params: init,
            iteration: 0,
            noise_rng: SplitMix64::derive(config.seed, "langevin"),
            stream: MinibatchStream::with_rng(
                config.dataset_size,
                config.batch_size,
                SplitMix64::derive(config.seed, "minibatch"),
            )?,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        self.stream.next_batch()
    }
}

/// One SGLD update:
/// theta += (eta/2) * (grad log prior + (N/M) * sum grad log lik) + noise.
///
/// The noise draw always consumes the stream, so an override only rescales
/// the injected values; `Some(0.0)` gives the deterministic drift-only step.
pub fn sgld_step<M: SgldModel>(
    state: &mut SamplerState,
    model: &M,
    batch: &[usize],
    config: &SgldConfig,
    noise_scale_override: Option<f64>,
) -> Result<()> {
    let eta = config.eta_at(state.iteration);
    let scale = config.dataset_size as f64 / config.batch_size as f64;

    let mut drift = grad_log_prior(&state.params, config.prior_precision);
    let lik = model.batch_loglik_grad(&state.params, batch)?;
    drift.add_scaled(&lik, scale as Elem);

    state.params.add_scaled(&drift, (eta / 2.0) as Elem);

    let base_std = match config.noise {
        NoiseConvention::VarianceEta => eta.sqrt(),
        NoiseConvention::StdDevEta => eta,
    };
    let std = base_std * noise_scale_override.unwrap_or(1.0);
    for v in state.params.as_mut_slice() {
        *v += (std * state.noise_rng.normal()) as Elem;
    }

    state.iteration += 1;
    if !state.params.all_finite() || state.params.norm() as f64 > DIVERGENCE_NORM {
        return Err(Error::non_finite_at(
            format!(
                "divergent chain (parameter norm {:.3e}, gradient norm {:.3e})",
                state.params.norm(),
                lik.norm()
            ),
            state.iteration,
        ));
    }
    Ok(())
}

/// Run T steps, delivering the kept samples
/// (t > burn_in, (t - burn_in) % thinning == 0) to `sink` in order.
pub fn run_chain<M, F>(model: &M, init: &ParamVector, config: &SgldConfig, mut sink: F) -> Result<()>
where
    M: SgldModel,
    F: FnMut(u64, &ParamVector) -> Result<()>,
{
    config.validate()?;
    if model.param_count() != init.len() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!(
                "initial parameters ({}) do not match model ({})",
                init.len(),
                model.param_count()
            ),
        });
    }
    if model.data_len() != config.dataset_size {
        return Err(Error::Config(format!(
            "config dataset_size {} does not match data ({})",
            config.dataset_size,
            model.data_len()
        )));
    }
    let mut state = SamplerState::new(init.clone(), config)?;
    let mut kept = 0u64;
    for t in 1..=config.total_iters {
        let batch = state.next_batch();
        sgld_step(&mut state, model, &batch, config, None)?;
        if t > config.burn_in && (t - config.burn_in) % config.thinning == 0 {
            sink(kept, &state.params)?;
            kept += 1;
        }
    }
    Ok(())
}

/// Everything needed to re-materialize every kept sample: spec, starting
/// parameters, sampler config (including the seed), and the identity of the
/// training data.
#[derive(Clone, Debug)]
pub struct ChainRecord {
    pub spec: NetworkSpec,
    pub init_params: ParamVector,
    pub config: SgldConfig,
    pub dataset_name: String,
    pub dataset_hash: u64,
}

impl ChainRecord {
    pub fn kept_samples(&self) -> u64 {
        self.config.kept_samples()
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let found = dataset.content_hash();
        if found != self.dataset_hash {
            return Err(Error::DatasetMismatch {
                expected: self.dataset_hash,
                found,
            });
        }
        Ok(())
    }
}

/// Run a classifier chain over `dataset` and return the replayable record.
pub fn run_network_chain<F>(
    network: &Network,
    init: &ParamVector,
    config: &SgldConfig,
    dataset: &Dataset,
    sink: F,
) -> Result<ChainRecord>
where
    F: FnMut(u64, &ParamVector) -> Result<()>,
{
    let model = NetworkModel { network, dataset };
    run_chain(&model, init, config, sink)?;
    Ok(ChainRecord {
        spec: network.spec().clone(),
        init_params: init.clone(),
        config: config.clone(),
        dataset_name: dataset.name.clone(),
        dataset_hash: dataset.content_hash(),
    })
}

/// Sequential re-materialization of a recorded chain's kept samples.
///
/// Seeking forward reuses the in-flight state; seeking backward restarts the
/// simulation from the record.
pub struct ChainReplayer<'a> {
    network: Network,
    dataset: &'a Dataset,
    record: &'a ChainRecord,
    state: SamplerState,
    /// Completed iterations.
    step: u64,
    /// Index of the next kept sample the replayer will produce.
    next_index: u64,
}

impl<'a> ChainReplayer<'a> {
    pub fn new(record: &'a ChainRecord, dataset: &'a Dataset) -> Result<Self> {
        record.check_dataset(dataset)?;
        record.config.validate()?;
        let network = Network::new(record.spec.clone())?;
        let state = SamplerState::new(record.init_params.clone(), &record.config)?;
        Ok(ChainReplayer {
            network,
            dataset,
            record,
            state,
            step: 0,
            next_index: 0,
        })
    }

    /// Index of the next sample [`Self::next_kept`] will return.
    pub fn position(&self) -> u64 {
        self.next_index
    }

    /// Advance the simulation to the next kept sample and return it.
    pub fn next_kept(&mut self) -> Result<ParamVector> {
        let kept = self.record.kept_samples();
        if self.next_index >= kept {
            return Err(Error::IndexOutOfRange {
                index: self.next_index as usize,
                len: kept as usize,
            });
        }
        let cfg = &self.record.config;
        let target_step = cfg.burn_in + (self.next_index + 1) * cfg.thinning;
        let model = NetworkModel {
            network: &self.network,
            dataset: self.dataset,
        };
        while self.step < target_step {
            let batch = self.state.next_batch();
            sgld_step(&mut self.state, &model, &batch, cfg, None)?;
            self.step += 1;
        }
        self.next_index += 1;
        Ok(self.state.params.clone())
    }

    /// Return kept sample `k`, restarting the simulation if `k` precedes the
    /// current position.
    pub fn seek(&mut self, k: u64) -> Result<ParamVector> {
        let kept = self.record.kept_samples();
        if k >= kept {
            return Err(Error::IndexOutOfRange {
                index: k as usize,
                len: kept as usize,
            });
        }
        if k < self.next_index {
            self.state = SamplerState::new(self.record.init_params.clone(), &self.record.config)?;
            self.step = 0;
            self.next_index = 0;
        }
        let mut sample = None;
        while self.next_index <= k {
            sample = Some(self.next_kept()?);
        }
        Ok(sample.expect("loop runs at least once"))
    }
}

/// Re-materialize kept sample `k` of a recorded chain, bitwise equal to the
/// original run's k-th sink delivery.
pub fn replay_sample(record: &ChainRecord, dataset: &Dataset, k: u64) -> Result<ParamVector> {
    ChainReplayer::new(record, dataset)?.seek(k)
}

/// Configuration of the conjugate Gaussian-mean sampler oracle.
#[derive(Clone, Debug)]
pub struct PosteriorOracleConfig {
    pub n_observations: usize,
    pub true_mean: f64,
    pub prior_precision: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub burn_in: u64,
    pub thinning: u64,
    pub kept_target: u64,
    pub seed: u64,
    /// Maximum relative error accepted on posterior mean and variance.
    pub tolerance: f64,
}

impl Default for PosteriorOracleConfig {
    fn default() -> Self {
        PosteriorOracleConfig {
            n_observations: 100,
            true_mean: 2.0,
            prior_precision: 1.0,
            learning_rate: 1e-4,
            batch_size: 25,
            burn_in: 1000,
            thinning: 1000,
            kept_target: 3000,
            seed: 42,
            tolerance: 0.05,
        }
    }
}

/// Comparison of SGLD sample moments against the analytic conjugate
/// posterior N(sum(y) / (N + lambda), 1 / (N + lambda)).
#[derive(Clone, Debug)]
pub struct PosteriorOracleReport {
    pub analytic_mean: f64,
    pub analytic_var: f64,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub mean_rel_err: f64,
    pub var_rel_err: f64,
    pub kept: u64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Run SGLD on the one-parameter Gaussian-mean model and compare kept-sample
/// moments against the closed-form posterior.
pub fn posterior_oracle_check(cfg: &PosteriorOracleConfig) -> Result<PosteriorOracleReport> {
    let mut obs_rng = SplitMix64::derive(cfg.seed, "observations");
    let observations: Vec<f64> = (0..cfg.n_observations)
        .map(|_| cfg.true_mean + obs_rng.normal())
        .collect();
    let model = GaussianMeanModel {
        observations: observations.clone(),
    };

    let n = cfg.n_observations as f64;
    let sum_y: f64 = observations.iter().sum();
    let analytic_mean = sum_y / (n + cfg.prior_precision);
    let analytic_var = 1.0 / (n + cfg.prior_precision);

    let sgld = SgldConfig {
        learning_rate: cfg.learning_rate,
        prior_precision: cfg.prior_precision,
        dataset_size: cfg.n_observations,
        batch_size: cfg.batch_size,
        burn_in: cfg.burn_in,
        thinning: cfg.thinning,
        total_iters: cfg.burn_in + cfg.kept_target * cfg.thinning,
        seed: cfg.seed,
        noise: NoiseConvention::VarianceEta,
        eta_decay: None,
    };
    let init = ParamVector::from_vec(vec![0.0]);
    let mut samples: Vec<f64> = Vec::with_capacity(cfg.kept_target as usize);
    run_chain(&model, &init, &sgld, |_, p| {
        samples.push(p.as_slice()[0] as f64);
        Ok(())
    })?;

    let k = samples.len() as f64;
    let sample_mean = samples.iter().sum::<f64>() / k;
    let sample_var = samples
        .iter()
        .map(|s| (s - sample_mean) * (s - sample_mean))
        .sum::<f64>()
        / (k - 1.0);

    let mean_rel_err = (sample_mean - analytic_mean).abs() / analytic_mean.abs();
    let var_rel_err = (sample_var - analytic_var).abs() / analytic_var;
    Ok(PosteriorOracleReport {
        analytic_mean,
        analytic_var,
        sample_mean,
        sample_var,
        mean_rel_err,
        var_rel_err,
        kept: samples.len() as u64,
        tolerance: cfg.tolerance,
        pass: mean_rel_err <= cfg.tolerance && var_rel_err <= cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(seed: u64) -> SgldConfig {
        SgldConfig {
            learning_rate: 1e-3,
            prior_precision: 1.0,
            dataset_size: 10,
            batch_size: 5,
            burn_in: 4,
            thinning: 2,
            total_iters: 20,
            seed,
            noise: NoiseConvention::VarianceEta,
            eta_decay: None,
        }
    }

    fn toy_model() -> GaussianMeanModel {
        let mut rng = SplitMix64::new(100);
        GaussianMeanModel {
            observations: (0..10).map(|_| 1.5 + rng.normal()).collect(),
        }
    }

    #[test]
    fn prior_gradient_values() {
        let theta = ParamVector::from_vec(vec![0.5]);
        assert_eq!(grad_log_prior(&theta, 10.0).as_slice(), &[-5.0]);
        assert_eq!(grad_log_prior(&theta, 0.0).as_slice(), &[0.0]);
        let double = ParamVector::from_vec(vec![1.0]);
        let g1 = grad_log_prior(&theta, 3.0);
        let g2 = grad_log_prior(&double, 3.0);
        assert_eq!(g2.as_slice()[0], 2.0 * g1.as_slice()[0]);
    }

    #[test]
    fn kept_sample_arithmetic() {
        let mut cfg = toy_config(0);
        cfg.total_iters = 1000;
        cfg.burn_in = 1000;
        assert!(cfg.validate().is_err()); // T must exceed B

        cfg.total_iters = 1_000_000;
        cfg.burn_in = 1000;
        cfg.thinning = 100;
        assert_eq!(cfg.kept_samples(), 9990);

        cfg.total_iters = 20_000;
        cfg.burn_in = 2000;
        cfg.thinning = 600;
        assert_eq!(cfg.kept_samples(), 30);
    }

    #[test]
    fn zero_kept_samples_when_burn_in_consumes_chain() {
        let mut cfg = toy_config(0);
        cfg.total_iters = 10;
        cfg.burn_in = 9;
        cfg.thinning = 2;
        assert_eq!(cfg.kept_samples(), 0);
        let model = toy_model();
        let mut deliveries = 0;
        run_chain(&model, &ParamVector::from_vec(vec![0.0]), &cfg, |_, _| {
            deliveries += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(deliveries, 0);
    }

    #[test]
    fn prior_only_drift_step() {
        // Zero likelihood gradient and zero noise: theta' = theta - (eta/2) lambda theta.
        struct NullModel;
        impl SgldModel for NullModel {
            fn param_count(&self) -> usize {
                1
            }
            fn data_len(&self) -> usize {
                10
            }
            fn batch_loglik_grad(&self, _: &ParamVector, _: &[usize]) -> Result<ParamVector> {
                Ok(ParamVector::from_vec(vec![0.0]))
            }
        }
        let cfg = toy_config(1);
        let mut state = SamplerState::new(ParamVector::from_vec(vec![0.8]), &cfg).unwrap();
        let batch = state.next_batch();
        sgld_step(&mut state, &NullModel, &batch, &cfg, Some(0.0)).unwrap();
        let expect = 0.8 - (cfg.learning_rate / 2.0) * cfg.prior_precision * 0.8;
        assert_eq!(state.params.as_slice()[0], expect as Elem);
    }

    #[test]
    fn noise_free_full_batch_equals_gradient_ascent() {
        // With noise off, N = M, and lambda = 0, T steps must match an
        // independently coded ascent loop of step eta/2 exactly.
        let model = toy_model();
        let mut cfg = toy_config(3);
        cfg.prior_precision = 0.0;
        cfg.batch_size = 10;
        let mut state = SamplerState::new(ParamVector::from_vec(vec![0.2]), &cfg).unwrap();
        for _ in 0..cfg.total_iters {
            let batch = state.next_batch();
            sgld_step(&mut state, &model, &batch, &cfg, Some(0.0)).unwrap();
        }

        let mut theta = ParamVector::from_vec(vec![0.2]);
        for _ in 0..cfg.total_iters {
            let g = model
                .batch_loglik_grad(&theta, &(0..10).collect::<Vec<_>>())
                .unwrap();
            theta.add_scaled(&g, (cfg.learning_rate / 2.0) as Elem);
        }
        let diff = (state.params.as_slice()[0] - theta.as_slice()[0]).abs();
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn chains_with_same_seed_are_bitwise_identical() {
        let model = toy_model();
        let cfg = toy_config(77);
        let init = ParamVector::from_vec(vec![0.1]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_chain(&model, &init, &cfg, |_, p| {
            a.push(p.clone());
            Ok(())
        })
        .unwrap();
        run_chain(&model, &init, &cfg, |_, p| {
            b.push(p.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len() as u64, cfg.kept_samples());
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let model = toy_model();
        let mut cfg = toy_config(5);
        cfg.learning_rate = 1e9;
        let err = run_chain(&model, &ParamVector::from_vec(vec![0.5]), &cfg, |_, _| Ok(()))
            .unwrap_err();
        match err {
            Error::NonFiniteValue { iteration, .. } => assert!(iteration.is_some()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn posterior_oracle_within_tolerance() {
        let report = posterior_oracle_check(&PosteriorOracleConfig::default()).unwrap();
        assert!(
            report.pass,
            "mean err {:.4} var err {:.4}",
            report.mean_rel_err, report.var_rel_err
        );
        assert!(report.kept >= 2000);
    }

    #[test]
    fn analytic_posterior_scalings() {
        // Strong prior pulls the posterior mean toward zero. The step size
        // shrinks with the prior precision to keep the chain stable.
        let strong = PosteriorOracleConfig {
            prior_precision: 1e6,
            learning_rate: 1e-6,
            kept_target: 10,
            ..Default::default()
        };
        let report = posterior_oracle_check(&strong).unwrap();
        assert!(report.analytic_mean.abs() < 1e-3);

        // Doubling N roughly halves the analytic variance ((N + lambda) scaling).
        let base = PosteriorOracleConfig::default();
        let doubled = PosteriorOracleConfig {
            n_observations: 200,
            kept_target: 10,
            ..Default::default()
        };
        let a = 1.0 / (base.n_observations as f64 + base.prior_precision);
        let b = 1.0 / (doubled.n_observations as f64 + doubled.prior_precision);
        assert!((a / b - 2.0).abs() < 0.02);
    }
}
