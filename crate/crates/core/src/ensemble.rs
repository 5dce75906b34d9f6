//! Monte Carlo posterior predictive and streaming ensemble input gradients.
//!
//! An [`EnsembleSource`] yields posterior samples in a fixed canonical order
//! (sample index ascending) from one of three backings: parameter vectors
//! already in memory, checkpoint files loaded one at a time, or a chain
//! record replayed step by step. The streaming operations accumulate across
//! members one at a time, so a full pass holds at most two parameter vectors
//! alive regardless of ensemble size; an optional [`MemberCounter`] hook
//! asserts exactly that in tests.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{self, LossKind};
use crate::nn::{forward, forward_trace, backward_input_only, Network, NetworkSpec, ParamVector};
use crate::sampler::{ChainRecord, ChainReplayer};
use crate::tensor::{Elem, Tensor};

/// How an ensemble's input gradient is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientMode {
    /// Arithmetic mean over members of each member's own cross-entropy input
    /// gradient. The default: one gradient accumulation per member.
    #[default]
    MeanOfLossGradients,
    /// Exact gradient of -log of the averaged predictive probability,
    /// accumulated from per-member probabilities and probability gradients.
    GradOfEnsembleLoss,
}

impl GradientMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradientMode::MeanOfLossGradients => "mean",
            GradientMode::GradOfEnsembleLoss => "ensemble_loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GradientMode::MeanOfLossGradients),
            "ensemble_loss" => Ok(GradientMode::GradOfEnsembleLoss),
            other => Err(Error::Config(format!("unknown gradient mode '{other}'"))),
        }
    }
}

/// Instrumentation hook counting member materializations and the number of
/// parameter vectors simultaneously alive inside streaming operations.
#[derive(Debug, Default)]
pub struct MemberCounter {
    live: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl MemberCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(MemberCounter::default())
    }

    fn track(&self, counts_as_materialization: bool) {
        let live = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(live, Ordering::SeqCst);
        if counts_as_materialization {
            self.total.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn untrack(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    /// Members materialized so far (delivered samples).
    pub fn total_materializations(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously-live parameter vectors observed.
    pub fn peak_live(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.live.store(0, Ordering::SeqCst);
        self.peak.store(0, Ordering::SeqCst);
        self.total.store(0, Ordering::SeqCst);
    }
}

/// Decrements the live count even if a member callback errors out.
struct LiveGuard<'a> {
    counter: Option<&'a MemberCounter>,
}

impl<'a> LiveGuard<'a> {
    fn new(counter: Option<&'a MemberCounter>, counts_as_materialization: bool) -> Self {
        if let Some(c) = counter {
            c.track(counts_as_materialization);
        }
        LiveGuard { counter }
    }
}

impl Drop for LiveGuard<'_> {
    fn drop(&mut self) {
        if let Some(c) = self.counter {
            c.untrack();
        }
    }
}

enum SourceKind<'a> {
    InMemory(&'a [ParamVector]),
    OnDisk { files: Vec<PathBuf> },
    Replayed { record: &'a ChainRecord, dataset: &'a Dataset },
}

/// A posterior ensemble: K members in canonical order.
pub struct EnsembleSource<'a> {
    spec: NetworkSpec,
    kind: SourceKind<'a>,
    len: usize,
    counter: Option<Arc<MemberCounter>>,
}

impl<'a> EnsembleSource<'a> {
    /// Members already materialized in memory.
    pub fn from_members(spec: NetworkSpec, members: &'a [ParamVector]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let count = Network::new(spec.clone())?.param_count();
        for m in members {
            if m.len() != count {
                return Err(Error::ShapeMismatch {
                    layer: 0,
                    detail: format!("member length {} vs network {}", m.len(), count),
                });
            }
        }
        Ok(EnsembleSource {
            spec,
            len: members.len(),
            kind: SourceKind::InMemory(members),
            counter: None,
        })
    }

    /// Checkpoint directory with an index manifest; members are loaded one
    /// at a time during iteration.
    pub fn from_dir(spec: NetworkSpec, dir: &Path) -> Result<Self> {
        let manifest = io::load_ensemble_manifest(dir)?;
        if manifest.spec_hash != spec.content_hash() {
            return Err(Error::Config(format!(
                "ensemble at {} was built for a different network",
                dir.display()
            )));
        }
        if manifest.members.is_empty() {
            return Err(Error::Config("ensemble manifest lists no members".into()));
        }
        let files: Vec<PathBuf> = manifest.members.iter().map(|m| dir.join(&m.file)).collect();
        Ok(EnsembleSource {
            spec,
            len: files.len(),
            kind: SourceKind::OnDisk { files },
            counter: None,
        })
    }

    /// Chain record replayed against its dataset: constant storage, one
    /// full simulation per iteration pass.
    pub fn replayed(record: &'a ChainRecord, dataset: &'a Dataset) -> Result<Self> {
        record.check_dataset(dataset)?;
        let kept = record.kept_samples();
        if kept == 0 {
            return Err(Error::Config("chain record keeps no samples".into()));
        }
        Ok(EnsembleSource {
            spec: record.spec.clone(),
            len: kept as usize,
            kind: SourceKind::Replayed { record, dataset },
            counter: None,
        })
    }

    pub fn with_counter(mut self, counter: Arc<MemberCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Member count K.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One pass over all members in canonical order.
    pub fn for_each_member<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &ParamVector) -> Result<()>,
    {
        let counter = self.counter.as_deref();
        match &self.kind {
            SourceKind::InMemory(members) => {
                for (k, m) in members.iter().enumerate() {
                    let _guard = LiveGuard::new(counter, true);
                    f(k, m)?;
                }
            }
            SourceKind::OnDisk { files } => {
                let expect_hash = self.spec.content_hash();
                for (k, file) in files.iter().enumerate() {
                    let member = io::load_params(file, Some(expect_hash))?;
                    let _guard = LiveGuard::new(counter, true);
                    f(k, &member)?;
                }
            }
            SourceKind::Replayed { record, dataset } => {
                // The in-flight chain state is one live vector for the whole
                // pass; each delivered sample is a second, transient one.
                let _state_guard = LiveGuard::new(counter, false);
                let mut replayer = ChainReplayer::new(record, dataset)?;
                for k in 0..self.len {
                    let member = replayer.next_kept()?;
                    let _guard = LiveGuard::new(counter, true);
                    f(k, &member)?;
                }
            }
        }
        Ok(())
    }
}

/// Monte Carlo posterior predictive: (1/K) sum of member softmax outputs,
/// accumulated one member at a time in canonical order.
pub fn ensemble_predict(source: &EnsembleSource, batch: &Tensor) -> Result<Tensor> {
    let network = Network::new(source.spec().clone())?;
    let mut acc: Option<Tensor> = None;
    source.for_each_member(|_, params| {
        let probs = losses::softmax(&forward(&network, params, batch)?)?;
        match acc.as_mut() {
            Some(a) => a.add_in_place(&probs),
            None => acc = Some(probs),
        }
        Ok(())
    })?;
    let mut acc = acc.expect("ensemble has at least one member");
    acc.scale(1.0 / source.len() as Elem);
    Ok(acc)
}

/// Streaming ensemble input gradient in either mode; single pass, constant
/// memory in K.
pub fn ensemble_input_grad(
    source: &EnsembleSource,
    batch: &Tensor,
    labels: &[usize],
    mode: GradientMode,
) -> Result<Tensor> {
    let network = Network::new(source.spec().clone())?;
    let k = source.len() as Elem;
    match mode {
        GradientMode::MeanOfLossGradients => {
            let mut acc: Option<Tensor> = None;
            source.for_each_member(|_, params| {
                let g = network.grad_input(params, batch, &LossKind::CrossEntropy { labels })?;
                match acc.as_mut() {
                    Some(a) => a.add_in_place(&g),
                    None => acc = Some(g),
                }
                Ok(())
            })?;
            let mut acc = acc.expect("ensemble has at least one member");
            acc.scale(1.0 / k);
            Ok(acc)
        }
        GradientMode::GradOfEnsembleLoss => {
            // Accumulate sum_i p_i(y) and sum_i d p_i(y) / dx, then form
            // -grad(sum p_y) / sum p_y, the gradient of -log mean predictive.
            let mut prob_sum: Vec<Elem> = vec![0.0; batch.batch()];
            let mut grad_sum: Option<Tensor> = None;
            source.for_each_member(|_, params| {
                let trace = forward_trace(&network, params, batch)?;
                let probs = losses::softmax(trace.logits())?;
                // d p_y / dz_c = p_y ([c == y] - p_c)
                let mut dlogits = probs.clone();
                for (b, &label) in labels.iter().enumerate() {
                    let py = probs.example(b)[label];
                    let row = dlogits.example_mut(b);
                    for (c, v) in row.iter_mut().enumerate() {
                        let indicator = if c == label { 1.0 } else { 0.0 };
                        *v = py * (indicator - probs.example(b)[c]);
                    }
                    prob_sum[b] += py;
                }
                let g = backward_input_only(&network, params, &trace, &dlogits)?;
                match grad_sum.as_mut() {
                    Some(a) => a.add_in_place(&g),
                    None => grad_sum = Some(g),
                }
                Ok(())
            })?;
            let mut g = grad_sum.expect("ensemble has at least one member");
            let n = g.example_len();
            for (b, &ps) in prob_sum.iter().enumerate() {
                let denom = ps.max(1e-12);
                for v in &mut g.data_mut()[b * n..(b + 1) * n] {
                    *v = -*v / denom;
                }
            }
            g.check_finite("ensemble loss gradient")?;
            Ok(g)
        }
    }
}

/// Anything that maps a batch to class probabilities.
pub trait Predictor {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor>;
    /// Stable identity used in manifests and reports.
    fn id(&self) -> String;
}

/// A single network with fixed parameters (point estimate or student).
pub struct SingleModel<'a> {
    pub network: &'a Network,
    pub params: &'a ParamVector,
    pub name: String,
}

impl Predictor for SingleModel<'_> {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        losses::softmax(&forward(self.network, self.params, batch)?)
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

/// An ensemble source together with its gradient mode.
pub struct EnsembleModel<'a> {
    pub source: &'a EnsembleSource<'a>,
    pub mode: GradientMode,
    pub name: String,
}

impl Predictor for EnsembleModel<'_> {
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        ensemble_predict(self.source, batch)
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

/// Fraction of examples whose argmax prediction matches the label, ties
/// broken toward the lowest class index. Evaluates in fixed-size chunks.
pub fn evaluate_accuracy(predictor: &dyn Predictor, dataset: &Dataset) -> Result<f64> {
    let preds = predict_dataset_classes(predictor, dataset, None)?;
    let correct = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Predicted class per example, optionally restricted to `indices`.
pub fn predict_dataset_classes(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    indices: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let all: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let (batch, _) = dataset.batch(chunk)?;
        let probs = predictor.predict_probs(&batch)?;
        preds.extend(losses::predict_classes(&probs));
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::nn::build_network;
    use crate::rng::SplitMix64;

    fn small_setup() -> (Network, Vec<ParamVector>, Tensor, Vec<usize>) {
        let spec = NetworkSpec::mlp(3, 5, 2);
        let (net, _) = build_network(spec.clone(), 0).unwrap();
        let members: Vec<ParamVector> = (0..4)
            .map(|s| build_network(spec.clone(), 100 + s).unwrap().1)
            .collect();
        let mut rng = SplitMix64::new(1);
        let batch = Tensor::new(
            vec![3, 1, 1, 3],
            (0..9).map(|_| rng.uniform(0.0, 1.0) as Elem).collect(),
        )
        .unwrap();
        (net, members, batch, vec![0, 1, 1])
    }

    #[test]
    fn single_member_ensemble_equals_model() {
        let (net, members, batch, labels) = small_setup();
        let source = EnsembleSource::from_members(net.spec().clone(), &members[..1]).unwrap();
        let ens = ensemble_predict(&source, &batch).unwrap();
        let single = losses::softmax(&forward(&net, &members[0], &batch).unwrap()).unwrap();
        assert_eq!(ens, single);

        for mode in [GradientMode::MeanOfLossGradients, GradientMode::GradOfEnsembleLoss] {
            let g = ensemble_input_grad(&source, &batch, &labels, mode).unwrap();
            let direct = net
                .grad_input(&members[0], &batch, &LossKind::CrossEntropy { labels: &labels })
                .unwrap();
            assert!(
                g.max_abs_diff(&direct) < 1e-12,
                "mode {mode:?} differs from single model"
            );
        }
    }

    #[test]
    fn predict_averages_member_probabilities() {
        let (net, members, batch, _) = small_setup();
        let source = EnsembleSource::from_members(net.spec().clone(), &members).unwrap();
        let ens = ensemble_predict(&source, &batch).unwrap();
        // Oracle: average the separately computed member probabilities.
        let mut expect = Tensor::zeros(ens.shape());
        for m in &members {
            expect.add_in_place(&losses::softmax(&forward(&net, m, &batch).unwrap()).unwrap());
        }
        expect.scale(1.0 / members.len() as Elem);
        assert_eq!(ens, expect);
        // Rows of the average stay normalized.
        for b in 0..ens.batch() {
            let s: Elem = ens.example(b).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_mode_matches_hand_mean_of_gradients() {
        let (net, members, batch, labels) = small_setup();
        let three = &members[..3];
        let source = EnsembleSource::from_members(net.spec().clone(), three).unwrap();
        let g = ensemble_input_grad(&source, &batch, &labels, GradientMode::MeanOfLossGradients)
            .unwrap();
        let mut expect: Option<Tensor> = None;
        for m in three {
            let gi = net
                .grad_input(m, &batch, &LossKind::CrossEntropy { labels: &labels })
                .unwrap();
            match expect.as_mut() {
                Some(a) => a.add_in_place(&gi),
                None => expect = Some(gi),
            }
        }
        let mut expect = expect.unwrap();
        expect.scale(1.0 / 3.0);
        assert_eq!(g, expect);
    }

    #[test]
    fn duplicated_members_leave_mean_gradient_unchanged() {
        let (net, members, batch, labels) = small_setup();
        let source = EnsembleSource::from_members(net.spec().clone(), &members).unwrap();
        let g1 =
            ensemble_input_grad(&source, &batch, &labels, GradientMode::MeanOfLossGradients)
                .unwrap();
        let doubled: Vec<ParamVector> =
            members.iter().chain(members.iter()).cloned().collect();
        let source2 = EnsembleSource::from_members(net.spec().clone(), &doubled).unwrap();
        let g2 =
            ensemble_input_grad(&source2, &batch, &labels, GradientMode::MeanOfLossGradients)
                .unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn exact_mode_matches_finite_differences_of_mean_predictive() {
        let (net, members, batch, labels) = small_setup();
        let two = &members[..2];
        let source = EnsembleSource::from_members(net.spec().clone(), two).unwrap();
        let g = ensemble_input_grad(&source, &batch, &labels, GradientMode::GradOfEnsembleLoss)
            .unwrap();

        // FD through -log mean predictive for example 0 only.
        let one = batch.gather(&[0]).unwrap();
        let shape = one.shape().to_vec();
        let label = labels[0];
        let fd = crate::fdiff::finite_diff_grad(
            |x| {
                let xt = Tensor::new(shape.clone(), x.to_vec())?;
                let mut p = 0.0;
                for m in two {
                    let probs = losses::softmax(&forward(&net, m, &xt)?)?;
                    p += probs.example(0)[label];
                }
                Ok(-(p / 2.0).ln())
            },
            one.data(),
            1e-6,
        )
        .unwrap();
        let err = crate::fdiff::max_rel_err(&g.data()[..one.len()], &fd, 1e-8);
        assert!(err <= 1e-5, "exact-mode rel err {err}");
    }

    #[test]
    fn on_disk_source_streams_one_member_at_a_time() {
        let (net, members, batch, labels) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for (i, m) in members.iter().enumerate() {
            let file = io::member_file_name(i as u64);
            io::save_params(&dir.path().join(&file), m, net.spec().content_hash()).unwrap();
            entries.push(io::MemberEntry {
                index: i as u64,
                file,
            });
        }
        io::save_ensemble_manifest(
            dir.path(),
            &io::EnsembleManifest {
                spec_hash: net.spec().content_hash(),
                dataset_hash: 0,
                chain_seed: 0,
                members: entries,
            },
        )
        .unwrap();

        let counter = MemberCounter::new();
        let disk = EnsembleSource::from_dir(net.spec().clone(), dir.path())
            .unwrap()
            .with_counter(counter.clone());
        let g_disk =
            ensemble_input_grad(&disk, &batch, &labels, GradientMode::MeanOfLossGradients)
                .unwrap();
        assert_eq!(counter.total_materializations(), members.len());
        assert!(counter.peak_live() <= 2);

        let mem = EnsembleSource::from_members(net.spec().clone(), &members).unwrap();
        let g_mem =
            ensemble_input_grad(&mem, &batch, &labels, GradientMode::MeanOfLossGradients)
                .unwrap();
        assert_eq!(g_disk, g_mem);
    }

    #[test]
    fn accuracy_tie_break_and_perfect_predictor() {
        let ds = make_synthetic(SyntheticSpec::TwoGaussians { dim: 2, mu: 10.0 }, 20, 3).unwrap();

        struct Uniform;
        impl Predictor for Uniform {
            fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
                Ok(Tensor::new(
                    vec![batch.batch(), 2],
                    vec![0.5; batch.batch() * 2],
                )
                .unwrap())
            }
            fn id(&self) -> String {
                "uniform".into()
            }
        }
        // Uniform probabilities tie-break to class 0.
        let acc = evaluate_accuracy(&Uniform, &ds).unwrap();
        let frac0 = ds.labels.iter().filter(|&&l| l == 0).count() as f64 / ds.len() as f64;
        assert_eq!(acc, frac0);

        struct Oracle<'a>(&'a Dataset);
        impl Predictor for Oracle<'_> {
            fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
                // Labels recoverable from the coordinate mean for mu = 10.
                let mut probs = Tensor::zeros(&[batch.batch(), 2]);
                for b in 0..batch.batch() {
                    let row = batch.example(b);
                    let mean: Elem = row.iter().sum::<Elem>() / row.len() as Elem;
                    let class = usize::from(mean > 0.5);
                    probs.example_mut(b)[class] = 1.0;
                }
                Ok(probs)
            }
            fn id(&self) -> String {
                "oracle".into()
            }
        }
        let acc = evaluate_accuracy(&Oracle(&ds), &ds).unwrap();
        assert!(acc >= 0.99);
    }
}
