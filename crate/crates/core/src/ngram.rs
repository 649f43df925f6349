//! Synthetic bigram substrate: ground truth, per-node perturbations, data
//! sampling, Laplace-smoothed local fits and exact expected KL.
//!
//! Contexts and tokens share one vocabulary of size `V` (context length one),
//! so every conditional table is a `V × V` row-major matrix of logits.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::seed;
use crate::softmax::{kl_logits, logsumexp};

/// Row-major `V × V` table of logits. Row `x` holds the logits of `P(· | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    vocab: usize,
    data: Vec<f64>,
}

impl LogitTable {
    pub fn new(vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab * vocab {
            return Err(invalid(format!(
                "table of {} entries is not {vocab}×{vocab}",
                data.len()
            )));
        }
        Ok(Self { vocab, data })
    }

    pub fn zeros(vocab: usize) -> Self {
        Self {
            vocab,
            data: vec![0.0; vocab * vocab],
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.data[context * self.vocab..(context + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        &mut self.data[context * self.vocab..(context + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Conditional distribution `softmax(row(context))`.
    pub fn probs(&self, context: usize) -> Vec<f64> {
        crate::softmax::softmax(self.row(context))
    }

    /// Same table with every row shifted to log-probabilities.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for x in 0..self.vocab {
            let row = out.row_mut(x);
            let lse = logsumexp(row);
            row.iter_mut().for_each(|l| *l -= lse);
        }
        out
    }

    /// Apply a token relabeling `perm` to both contexts and tokens.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let v = self.vocab;
        let mut out = Self::zeros(v);
        for x in 0..v {
            for y in 0..v {
                out.data[perm[x] * v + perm[y]] = self.data[x * v + y];
            }
        }
        out
    }
}

impl AsRef<LogitTable> for LogitTable {
    fn as_ref(&self) -> &LogitTable {
        self
    }
}

/// Target bigram conditional `P*` and its context marginal.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    logits: LogitTable,
    log_probs: LogitTable,
    context_marginal: Vec<f64>,
}

impl GroundTruth {
    pub fn new(logits: LogitTable, context_marginal: Vec<f64>) -> Result<Self> {
        if context_marginal.len() != logits.vocab() {
            return Err(invalid("context marginal length differs from vocabulary"));
        }
        if context_marginal.iter().any(|&p| !(p >= 0.0)) {
            return Err(invalid("context marginal has a negative or NaN entry"));
        }
        let total: f64 = context_marginal.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("context marginal sums to {total}")));
        }
        let log_probs = logits.normalized();
        Ok(Self {
            logits,
            log_probs,
            context_marginal,
        })
    }

    pub fn vocab(&self) -> usize {
        self.logits.vocab()
    }

    pub fn logits(&self) -> &LogitTable {
        &self.logits
    }

    pub fn log_probs(&self) -> &LogitTable {
        &self.log_probs
    }

    pub fn context_marginal(&self) -> &[f64] {
        &self.context_marginal
    }
}

impl AsRef<LogitTable> for GroundTruth {
    fn as_ref(&self) -> &LogitTable {
        &self.logits
    }
}

/// Draw `ℓ*` with i.i.d. standard normal entries and a uniform context
/// marginal.
pub fn generate_ground_truth(vocab: usize, seed: u64) -> Result<GroundTruth> {
    if vocab < 2 {
        return Err(invalid(format!("vocabulary size {vocab} < 2")));
    }
    let mut rng = seed::rng(seed);
    let data: Vec<f64> = (0..vocab * vocab)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let marginal = vec![1.0 / vocab as f64; vocab];
    GroundTruth::new(LogitTable::new(vocab, data)?, marginal)
}

/// A node's data-generating conditional `P_i = softmax(ℓ* + drift·ε_i)`.
#[derive(Debug, Clone)]
pub struct NodeDistribution {
    logits: LogitTable,
    drift: f64,
    kl_to_target: f64,
}

impl NodeDistribution {
    pub fn logits(&self) -> &LogitTable {
        &self.logits
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    /// `E_{X~P*_X} KL(P*(·|X) || P_i(·|X))`.
    pub fn kl_to_target(&self) -> f64 {
        self.kl_to_target
    }
}

impl AsRef<LogitTable> for NodeDistribution {
    fn as_ref(&self) -> &LogitTable {
        &self.logits
    }
}

/// The homogeneous node: `P_i = P*`.
pub fn homogeneous_node(gt: &GroundTruth) -> NodeDistribution {
    NodeDistribution {
        logits: gt.logits.clone(),
        drift: 0.0,
        kl_to_target: 0.0,
    }
}

pub fn perturb_node(gt: &GroundTruth, drift: f64, seed: u64) -> Result<NodeDistribution> {
    if !(drift >= 0.0) || !drift.is_finite() {
        return Err(invalid(format!("drift must be finite and nonnegative, got {drift}")));
    }
    if drift == 0.0 {
        return Ok(homogeneous_node(gt));
    }
    let mut rng = seed::rng(seed);
    let data: Vec<f64> = gt
        .logits
        .as_slice()
        .iter()
        .map(|&l| {
            let eps: f64 = rng.sample(StandardNormal);
            l + drift * eps
        })
        .collect();
    let logits = LogitTable::new(gt.vocab(), data)?;
    let kl_to_target = expected_kl(gt, &logits);
    Ok(NodeDistribution {
        logits,
        drift,
        kl_to_target,
    })
}

/// Pair counts `counts[x][y]` of a local sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    vocab: usize,
    counts: Vec<u32>,
    n: u64,
}

impl Dataset {
    pub fn from_counts(vocab: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != vocab * vocab {
            return Err(invalid("count table is not V×V"));
        }
        let n = counts.iter().map(|&c| c as u64).sum();
        Ok(Self { vocab, counts, n })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn row(&self, context: usize) -> &[u32] {
        &self.counts[context * self.vocab..(context + 1) * self.vocab]
    }
}

/// Inverse-CDF sampler for `(x, y)` pairs; build once, sample many nodes.
#[derive(Debug, Clone)]
pub struct PairSampler {
    vocab: usize,
    marginal_cdf: Option<Vec<f64>>,
    row_cdfs: Vec<f64>,
}

fn cdf_of(probs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = probs
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    // Guard the upper end against rounding so every u < 1 finds a bucket.
    let total = acc;
    cdf.iter_mut().for_each(|c| *c /= total);
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

#[inline]
fn search(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl PairSampler {
    pub fn new(logits: &LogitTable, marginal: &[f64]) -> Result<Self> {
        let vocab = logits.vocab();
        if marginal.len() != vocab {
            return Err(invalid("marginal length differs from vocabulary"));
        }
        let uniform = marginal.iter().all(|&p| p == marginal[0]);
        let marginal_cdf = (!uniform).then(|| cdf_of(marginal.iter().copied()));
        let mut row_cdfs = Vec::with_capacity(vocab * vocab);
        for x in 0..vocab {
            row_cdfs.extend(cdf_of(logits.probs(x).into_iter()));
        }
        Ok(Self {
            vocab,
            marginal_cdf,
            row_cdfs,
        })
    }

    pub fn sample_context<R: Rng>(&self, rng: &mut R) -> usize {
        match &self.marginal_cdf {
            None => rng.gen_range(0..self.vocab),
            Some(cdf) => search(cdf, rng.gen::<f64>()),
        }
    }

    pub fn sample_token<R: Rng>(&self, context: usize, rng: &mut R) -> usize {
        let cdf = &self.row_cdfs[context * self.vocab..(context + 1) * self.vocab];
        search(cdf, rng.gen::<f64>())
    }

    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let x = self.sample_context(rng);
        (x, self.sample_token(x, rng))
    }

    pub fn sample_dataset(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = seed::rng(seed);
        let mut counts = vec![0u32; self.vocab * self.vocab];
        for _ in 0..n {
            let (x, y) = self.sample_pair(&mut rng);
            counts[x * self.vocab + y] += 1;
        }
        Dataset {
            vocab: self.vocab,
            counts,
            n: n as u64,
        }
    }
}

/// Draw `n` i.i.d. pairs with `x ~ marginal`, `y ~ softmax(dist[x])`.
pub fn sample_dataset(
    dist: &NodeDistribution,
    marginal: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(PairSampler::new(&dist.logits, marginal)?.sample_dataset(n, seed))
}

/// Laplace-smoothed bigram MLE stored as log-probabilities.
#[derive(Debug, Clone)]
pub struct LocalModel {
    log_probs: LogitTable,
    beta: f64,
}

impl LocalModel {
    pub fn log_probs(&self) -> &LogitTable {
        &self.log_probs
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl AsRef<LogitTable> for LocalModel {
    fn as_ref(&self) -> &LogitTable {
        &self.log_probs
    }
}

/// `P̂(y|x) = (c[x][y] + β) / (c[x] + βV)`.
pub fn fit_local_mle(data: &Dataset, beta: f64) -> Result<LocalModel> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid(format!("smoothing constant must be positive, got {beta}")));
    }
    let v = data.vocab;
    // Counts per cell are small in every regime we simulate; cache ln(c + β).
    const CACHE: usize = 512;
    let ln_cache: Vec<f64> = (0..CACHE).map(|c| (c as f64 + beta).ln()).collect();
    let mut out = Vec::with_capacity(v * v);
    for x in 0..v {
        let row = data.row(x);
        let total: u64 = row.iter().map(|&c| c as u64).sum();
        let ln_denom = (total as f64 + beta * v as f64).ln();
        out.extend(row.iter().map(|&c| {
            let c = c as usize;
            let ln_num = if c < CACHE {
                ln_cache[c]
            } else {
                (c as f64 + beta).ln()
            };
            ln_num - ln_denom
        }));
    }
    Ok(LocalModel {
        log_probs: LogitTable::new(v, out)?,
        beta,
    })
}

/// Row KL `KL(P*(·|x) || softmax(model[x]))`.
pub fn row_kl(target: &GroundTruth, model: &LogitTable, context: usize) -> f64 {
    kl_logits(target.log_probs.row(context), model.row(context))
}

/// Exact `E_{X~P*_X} KL(P*(·|X) || softmax(model[X]))`.
///
/// Returns `+∞` if the model puts zero mass where the target does not.
pub fn expected_kl<M: AsRef<LogitTable>>(target: &GroundTruth, model: &M) -> f64 {
    let model = model.as_ref();
    assert_eq!(target.vocab(), model.vocab(), "table shapes differ");
    target
        .context_marginal
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(x, &w)| w * row_kl(target, model, x))
        .sum()
}

/// Mean row KL over a list of contexts (with multiplicity).
pub fn mean_kl_over_contexts<M: AsRef<LogitTable>>(
    target: &GroundTruth,
    model: &M,
    contexts: &[usize],
) -> f64 {
    let model = model.as_ref();
    if contexts.is_empty() {
        return 0.0;
    }
    contexts.iter().map(|&x| row_kl(target, model, x)).sum::<f64>() / contexts.len() as f64
}
