//! Federated probe-logit distillation.
//!
//! Each round, every node fits its local Laplace MLE, evaluates it on every
//! public probe context, dither-quantizes the resulting log-probability
//! vector and uplinks it. The hub averages the dequantized vectors per probe
//! and distills by direct logit assignment: the student row of a probed
//! context is the average of that context's aggregated probe vectors.
//! Unprobed contexts keep a uniform row. The student is broadcast back for
//! free.
//!
//! Local fits are closed-form and ignore the broadcast student, so every
//! round reproduces the first one exactly; the round loop is kept so the
//! ledger reflects the `K·T·m·B` uplink of the protocol.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ngram::{
    self, fit_local_mle, homogeneous_node, perturb_node, GroundTruth, LocalModel, LogitTable,
    NodeDistribution, PairSampler,
};
use crate::quant::{dequantize_accumulate, quantize, QuantizedPayload, QuantizerConfig};
use crate::seed::{self, role};
use crate::softmax::kl_logits;
use crate::transport::{BitLedger, Bus, Channel, NodeId};

/// Public probe contexts, drawn i.i.d. from the uniform probe marginal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    contexts: Vec<usize>,
}

impl ProbeSet {
    pub fn draw(vocab: usize, m: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            contexts: (0..m).map(|_| rng.gen_range(0..vocab)).collect(),
        }
    }

    pub fn from_contexts(vocab: usize, contexts: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = contexts.iter().find(|&&x| x >= vocab) {
            return Err(invalid(format!("probe context {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { contexts })
    }

    pub fn contexts(&self) -> &[usize] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpldConfig {
    /// Number of nodes `K`.
    pub nodes: usize,
    /// Local samples per node `n`.
    pub samples_per_node: usize,
    /// Probe set size `m`.
    pub probes: usize,
    /// Rounds `T`.
    pub rounds: usize,
    /// Local epochs `E`; the closed-form fit does not use it.
    pub local_epochs: usize,
    pub quantizer: QuantizerConfig,
    /// Laplace smoothing `β`.
    pub beta: f64,
    /// Heterogeneity level; node `i` samples from `softmax(ℓ* + drift·ε_i)`.
    pub drift: f64,
    /// Root of every random stream in the run.
    pub seed: u64,
}

impl FpldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("nodes", self.nodes),
            ("samples_per_node", self.samples_per_node),
            ("probes", self.probes),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
        ] {
            if value == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.beta > 0.0) {
            return Err(invalid("beta must be positive"));
        }
        if !(self.drift >= 0.0) || !self.drift.is_finite() {
            return Err(invalid("drift must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Global student: one logit row per context plus probe coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    logits: LogitTable,
    covered: Vec<bool>,
}

impl Student {
    pub fn logits(&self) -> &LogitTable {
        &self.logits
    }

    pub fn covered(&self) -> &[bool] {
        &self.covered
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

impl AsRef<LogitTable> for Student {
    fn as_ref(&self) -> &LogitTable {
        &self.logits
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FpldDiagnostics {
    /// Mean over probes of `KL(P*(·|x_l) || P̂(·|x_l))`.
    pub probe_kl: f64,
    /// Exact `E_{X~P*_X} KL(P*(·|X) || P̂(·|X))`, uncovered rows uniform.
    pub exact_kl: f64,
    /// Mean over probes of `KL(softmax(ℓ̄*) || softmax(ℓ̄))` in the last round.
    pub quantization_kl: f64,
    pub covered_contexts: usize,
    pub saturated_coords: u64,
    /// `KL(P* || P_i)` per node.
    pub node_kl_to_target: Vec<f64>,
    /// `(1/K) Σ_i KL(P* || P_i)`.
    pub drift_term: f64,
    /// Every round produced the same student as round one.
    pub rounds_identical: bool,
}

#[derive(Debug, Clone)]
pub struct FpldOutcome {
    pub student: Student,
    pub ledger: BitLedger,
    pub probes: ProbeSet,
    pub diagnostics: FpldDiagnostics,
}

/// Downlink message: the freshly distilled student.
pub type StudentBroadcast = Arc<Student>;

/// Coordinate-wise mean of the dequantized reports of one probe.
fn average_reports<'a>(reports: impl IntoIterator<Item = &'a QuantizedPayload>, expected: usize) -> Result<Vec<f64>> {
    let mut reports = reports.into_iter().peekable();
    let width = reports
        .peek()
        .map(|p| p.num_coords())
        .ok_or_else(|| Error::Protocol("no reports for probe".into()))?;
    let mut acc = vec![0.0; width];
    let mut count = 0usize;
    for p in reports {
        dequantize_accumulate(p, &mut acc)?;
        count += 1;
    }
    if count != expected {
        return Err(Error::Protocol(format!("expected {expected} node reports, got {count}")));
    }
    let k = count as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// `ℓ̄^{(l)} = (1/K) Σ_i ℓ̃_i^{(l)}` for every probe `l`.
///
/// `payloads[i][l]` is node `i`'s report for probe `l`. Every node must
/// report every probe.
pub fn aggregate_probe_logits(payloads: &[Vec<QuantizedPayload>]) -> Result<Vec<Vec<f64>>> {
    let k = payloads.len();
    if k == 0 {
        return Err(Error::Protocol("no nodes reported".into()));
    }
    let m = payloads[0].len();
    if let Some(i) = payloads.iter().position(|p| p.len() != m) {
        return Err(Error::Protocol(format!(
            "node {i} reported {} probes, expected {m}",
            payloads[i].len()
        )));
    }
    (0..m)
        .map(|l| average_reports(payloads.iter().map(|node| &node[l]), k))
        .collect()
}

/// Mean over probes of `KL(softmax(unquantized_l) || softmax(quantized_l))`.
pub fn measure_quantization_kl(unquantized: &[Vec<f64>], quantized: &[Vec<f64>]) -> f64 {
    assert_eq!(unquantized.len(), quantized.len(), "aggregates from different rounds");
    if unquantized.is_empty() {
        return 0.0;
    }
    unquantized
        .iter()
        .zip(quantized)
        .map(|(a, b)| kl_logits(a, b))
        .sum::<f64>()
        / unquantized.len() as f64
}

struct Node {
    dist: NodeDistribution,
    sampler: Arc<PairSampler>,
    data_seed: u64,
}

impl Node {
    /// Closed-form "fine-tuning": refit the Laplace MLE on the local data.
    fn fine_tune(&self, n: usize, beta: f64) -> Result<LocalModel> {
        fit_local_mle(&self.sampler.sample_dataset(n, self.data_seed), beta)
    }
}

fn build_nodes(cfg: &FpldConfig, gt: &GroundTruth) -> Result<Vec<Node>> {
    let shared = if cfg.drift == 0.0 {
        Some(Arc::new(PairSampler::new(gt.logits(), gt.context_marginal())?))
    } else {
        None
    };
    (0..cfg.nodes)
        .map(|i| {
            let i = i as u64;
            let (dist, sampler) = match &shared {
                Some(s) => (homogeneous_node(gt), Arc::clone(s)),
                None => {
                    let dist = perturb_node(gt, cfg.drift, seed::derive(cfg.seed, &[role::DRIFT, i]))?;
                    let sampler = Arc::new(PairSampler::new(dist.logits(), gt.context_marginal())?);
                    (dist, sampler)
                }
            };
            Ok(Node {
                dist,
                sampler,
                data_seed: seed::derive(cfg.seed, &[role::DATA, i]),
            })
        })
        .collect()
}

/// Dither seed for node `i`, probe `l`. Independent of the round, so rounds
/// with identical local fits transmit identical payloads.
fn dither_seed(root: u64, node: u64, probe: u64) -> u64 {
    seed::derive(root, &[role::DITHER, node, probe])
}

/// Run the full protocol against ground truth `gt`.
pub fn run_fpld(cfg: &FpldConfig, gt: &GroundTruth) -> Result<FpldOutcome> {
    cfg.validate()?;
    let vocab = gt.vocab();
    let k = cfg.nodes;
    let nodes = build_nodes(cfg, gt)?;
    let probes = ProbeSet::draw(vocab, cfg.probes, seed::derive(cfg.seed, &[role::PROBE]));
    let bus: Bus<QuantizedPayload, StudentBroadcast> = Bus::new(k);

    let mut first: Option<Student> = None;
    let mut rounds_identical = true;
    let mut student = None;
    let mut quantization_kl = 0.0;
    let mut saturated = 0u64;

    for round in 0..cfg.rounds {
        let locals: Vec<LocalModel> = nodes
            .par_iter()
            .map(|node| node.fine_tune(cfg.samples_per_node, cfg.beta))
            .collect::<Result<_>>()?;

        // Unquantized teacher average per context, for the quantization KL.
        let mut teacher = vec![None::<Vec<f64>>; vocab];
        let mut context_sum = vec![0.0; vocab * vocab];
        let mut multiplicity = vec![0usize; vocab];
        let mut qkl_sum = 0.0;
        saturated = 0;

        for (l, &x) in probes.contexts().iter().enumerate() {
            for (i, local) in locals.iter().enumerate() {
                let payload = quantize(
                    local.log_probs().row(x),
                    &cfg.quantizer,
                    dither_seed(cfg.seed, i as u64, l as u64),
                )?;
                saturated += payload.saturated() as u64;
                bus.uplink(i as NodeId, Channel::Training, round as u64, payload);
            }
            let envelopes = bus.drain();
            let averaged = average_reports(envelopes.iter().map(|e| &e.payload), k)?;

            let ideal = teacher[x].get_or_insert_with(|| {
                let mut mean = vec![0.0; vocab];
                for local in &locals {
                    mean.iter_mut()
                        .zip(local.log_probs().row(x))
                        .for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= k as f64);
                mean
            });
            qkl_sum += kl_logits(ideal, &averaged);

            context_sum[x * vocab..(x + 1) * vocab]
                .iter_mut()
                .zip(&averaged)
                .for_each(|(s, a)| *s += a);
            multiplicity[x] += 1;
        }
        quantization_kl = if probes.is_empty() {
            0.0
        } else {
            qkl_sum / probes.len() as f64
        };

        // Direct logit assignment; rows never probed stay uniform.
        let mut logits = LogitTable::zeros(vocab);
        for x in 0..vocab {
            if multiplicity[x] > 0 {
                let count = multiplicity[x] as f64;
                logits
                    .row_mut(x)
                    .iter_mut()
                    .zip(&context_sum[x * vocab..(x + 1) * vocab])
                    .for_each(|(o, s)| *o = s / count);
            }
        }
        let distilled = Student {
            logits,
            covered: multiplicity.iter().map(|&c| c > 0).collect(),
        };
        match &first {
            None => first = Some(distilled.clone()),
            Some(f) => rounds_identical &= *f == distilled,
        }
        let broadcast = Arc::new(distilled);
        bus.broadcast(Arc::clone(&broadcast));
        for node in 0..k {
            // Closed-form local fits do not start from the student.
            let _ = bus.recv_downlink(node as NodeId);
        }
        student = Some(broadcast);
    }

    let student = Arc::try_unwrap(student.expect("at least one round"))
        .unwrap_or_else(|shared| (*shared).clone());
    let node_kl_to_target: Vec<f64> = nodes.iter().map(|n| n.dist.kl_to_target()).collect();
    let drift_term = node_kl_to_target.iter().sum::<f64>() / k as f64;
    let diagnostics = FpldDiagnostics {
        probe_kl: ngram::mean_kl_over_contexts(gt, &student, probes.contexts()),
        exact_kl: ngram::expected_kl(gt, &student),
        quantization_kl,
        covered_contexts: student.covered_count(),
        saturated_coords: saturated,
        node_kl_to_target,
        drift_term,
        rounds_identical,
    };
    Ok(FpldOutcome {
        student,
        ledger: bus.ledger(),
        probes,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{expected_kl, generate_ground_truth, sample_dataset};
    use crate::quant::DitherMode;
    use approx::assert_abs_diff_eq;

    fn config(k: usize, bits: u8, mode: DitherMode) -> FpldConfig {
        FpldConfig {
            nodes: k,
            samples_per_node: 400,
            probes: 300,
            rounds: 1,
            local_epochs: 1,
            quantizer: QuantizerConfig::new(bits, 20.0, mode).unwrap(),
            beta: 0.5,
            drift: 0.0,
            seed: 17,
        }
    }

    #[test]
    fn single_node_high_resolution_recovers_local_fit() {
        let gt = generate_ground_truth(8, 3).unwrap();
        let cfg = config(1, 32, DitherMode::RoundNearest);
        let out = run_fpld(&cfg, &gt).unwrap();
        assert_eq!(out.student.covered_count(), 8);
        let data = sample_dataset(
            &homogeneous_node(&gt),
            gt.context_marginal(),
            cfg.samples_per_node,
            seed::derive(cfg.seed, &[role::DATA, 0]),
        )
        .unwrap();
        let local = fit_local_mle(&data, 0.5).unwrap();
        assert_abs_diff_eq!(
            expected_kl(&gt, &out.student),
            expected_kl(&gt, &local),
            epsilon = 1e-9
        );
    }

    #[test]
    fn ledger_counts_every_probe_vector() {
        let gt = generate_ground_truth(16, 4).unwrap();
        let mut cfg = config(3, 6, DitherMode::DitheredIid);
        cfg.rounds = 4;
        let out = run_fpld(&cfg, &gt).unwrap();
        let expected = 3 * 4 * 300 * 16 * 6;
        assert_eq!(out.ledger.total(Channel::Training), expected);
        assert_eq!(out.ledger.training_bits(2, 3), 300 * 16 * 6);
        assert!(out.diagnostics.rounds_identical);
    }

    #[test]
    fn aggregation_of_opposite_vectors_cancels() {
        let cfg = QuantizerConfig::new(16, 4.0, DitherMode::RoundNearest).unwrap();
        let v = vec![0.3, -1.1, 2.7];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let payloads = vec![
            vec![quantize(&v, &cfg, 1).unwrap()],
            vec![quantize(&neg, &cfg, 2).unwrap()],
        ];
        let avg = aggregate_probe_logits(&payloads).unwrap();
        for a in &avg[0] {
            assert_abs_diff_eq!(*a, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregation_of_identical_vectors_is_within_half_step() {
        let cfg = QuantizerConfig::new(8, 20.0, DitherMode::DitheredIid).unwrap();
        let v = vec![-3.0, -5.5, -0.2, -1.0];
        let payloads: Vec<Vec<QuantizedPayload>> =
            (0..4).map(|i| vec![quantize(&v, &cfg, i).unwrap()]).collect();
        let avg = aggregate_probe_logits(&payloads).unwrap();
        for (a, x) in avg[0].iter().zip(&v) {
            assert!((a - x).abs() <= cfg.step() / 2.0);
        }
    }

    #[test]
    fn aggregation_matches_independent_mean() {
        let cfg = QuantizerConfig::new(10, 8.0, DitherMode::DitheredIid).unwrap();
        let mut rng = seed::rng(5);
        let vectors: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..2).map(|_| (0..5).map(|_| rng.gen_range(-7.0..7.0)).collect()).collect())
            .collect();
        let payloads: Vec<Vec<QuantizedPayload>> = vectors
            .iter()
            .enumerate()
            .map(|(i, probes)| {
                probes
                    .iter()
                    .enumerate()
                    .map(|(l, v)| quantize(v, &cfg, (10 * i + l) as u64).unwrap())
                    .collect()
            })
            .collect();
        let avg = aggregate_probe_logits(&payloads).unwrap();
        for l in 0..2 {
            for c in 0..5 {
                let by_hand: f64 = payloads
                    .iter()
                    .map(|node| crate::quant::dequantize(&node[l]).unwrap()[c])
                    .sum::<f64>()
                    / 3.0;
                assert_abs_diff_eq!(avg[l][c], by_hand, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn missing_report_is_a_protocol_error() {
        let cfg = QuantizerConfig::new(4, 1.0, DitherMode::DitheredIid).unwrap();
        let p = quantize(&[0.1], &cfg, 0).unwrap();
        let payloads = vec![vec![p.clone(), p.clone()], vec![p]];
        assert!(matches!(aggregate_probe_logits(&payloads), Err(Error::Protocol(_))));
        assert!(aggregate_probe_logits(&[]).is_err());
    }

    #[test]
    fn quantization_kl_vanishes_without_error() {
        let rows = vec![vec![0.5, -0.5, 1.0], vec![0.0, 0.0, 0.0]];
        assert_eq!(measure_quantization_kl(&rows, &rows), 0.0);
        // Grid-aligned inputs through round_nearest reproduce themselves.
        let cfg = QuantizerConfig::new(2, 2.0, DitherMode::RoundNearest).unwrap();
        let v = vec![-1.5, 0.5, 1.5];
        let back = crate::quant::dequantize(&quantize(&v, &cfg, 0).unwrap()).unwrap();
        assert_eq!(measure_quantization_kl(&[v], &[back]), 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let gt = generate_ground_truth(4, 1).unwrap();
        let mut cfg = config(2, 8, DitherMode::DitheredIid);
        cfg.nodes = 0;
        assert!(run_fpld(&cfg, &gt).is_err());
        let mut cfg = config(2, 8, DitherMode::DitheredIid);
        cfg.drift = -1.0;
        assert!(run_fpld(&cfg, &gt).is_err());
    }

    #[test]
    fn drift_term_is_mean_node_kl() {
        let gt = generate_ground_truth(8, 9).unwrap();
        let mut cfg = config(3, 8, DitherMode::DitheredIid);
        cfg.drift = 0.5;
        let out = run_fpld(&cfg, &gt).unwrap();
        let d = &out.diagnostics;
        assert_eq!(d.node_kl_to_target.len(), 3);
        assert!(d.node_kl_to_target.iter().all(|&k| k > 0.0));
        assert_abs_diff_eq!(d.drift_term, d.node_kl_to_target.iter().sum::<f64>() / 3.0, epsilon = 1e-15);
    }
}
