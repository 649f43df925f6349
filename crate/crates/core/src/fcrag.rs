//! Federated conformal inference with bandwidth-limited scores.
//!
//! At query time the hub broadcasts a context, every node scores every
//! candidate token with `min(-log P̂_i(y|x), S_max)`, quantizes its score
//! vector at `B_i` bits per score and uplinks it. The swarm score is the
//! mean of the dequantized scores, and the prediction set keeps every
//! candidate whose swarm score is at most the calibrated threshold.
//!
//! Calibration is one-shot: each node snaps its local calibration scores to
//! a `2^B_cal`-level grid over `[0, S_max]`, ships the sorted level indices,
//! and the hub reads the split-conformal quantile off the merged histogram.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ngram::LogitTable;
use crate::quant::{self, dequantize_accumulate, quantize, DitherMode, QuantizedPayload, QuantizerConfig};
use crate::seed::{self, role};
use crate::transport::{Bus, Channel, NodeId, Payload};

/// Probability floor behind the default score cap.
pub const PROBABILITY_FLOOR: f64 = 1e-6;

/// `-ln(1e-6)`.
pub const DEFAULT_S_MAX: f64 = 13.815510557964274;

/// Largest supported calibration grid.
pub const MAX_GRID_BITS: u8 = 20;

/// Score cap for a probability floor `eps`.
pub fn s_max_for_floor(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid("probability floor must lie in (0, 1)"));
    }
    Ok(-eps.ln())
}

/// `min(-log p, S_max)` from a log-probability.
pub fn truncated_score(log_prob: f64, s_max: f64) -> f64 {
    (-log_prob).clamp(0.0, s_max)
}

/// Fixed-rate score codec: `[0, S_max]` is recentred onto a quantizer of
/// half-width `S_max/2`, one score per `bits`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreCodec {
    quantizer: QuantizerConfig,
    s_max: f64,
}

impl ScoreCodec {
    pub fn new(bits: u8, s_max: f64) -> Result<Self> {
        if !(s_max > 0.0) || !s_max.is_finite() {
            return Err(invalid("S_max must be positive and finite"));
        }
        Ok(Self {
            quantizer: QuantizerConfig::new(bits, s_max / 2.0, DitherMode::DitheredIid)?,
            s_max,
        })
    }

    pub fn bits(&self) -> u8 {
        self.quantizer.bits_per_coord()
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn quantizer(&self) -> &QuantizerConfig {
        &self.quantizer
    }

    pub fn encode(&self, scores: &[f64], seed: u64) -> Result<QuantizedPayload> {
        let half = self.s_max / 2.0;
        let centred: Vec<f64> = scores.iter().map(|s| s - half).collect();
        quantize(&centred, &self.quantizer, seed)
    }

    pub fn decode(&self, payload: &QuantizedPayload) -> Result<Vec<f64>> {
        let half = self.s_max / 2.0;
        Ok(quant::dequantize(payload)?.into_iter().map(|s| s + half).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query: usize,
    pub candidate: usize,
    /// Unquantized truncated scores, one per node.
    pub per_node_scores: Vec<f64>,
    /// Mean of the dequantized node scores, clamped to `[0, S_max]`.
    pub swarm_score: f64,
}

/// The serving side of the swarm: per-node scoring tables, per-node score
/// budgets and the uplink they share.
pub struct Swarm {
    models: Vec<LogitTable>,
    codecs: Vec<ScoreCodec>,
    s_max: f64,
    seed: u64,
    bus: Bus<QuantizedPayload>,
}

impl Swarm {
    /// `models[i]` holds node `i`'s log-probabilities; `bits[i]` is `B_i`.
    pub fn new(models: Vec<LogitTable>, bits: &[u8], s_max: f64, seed: u64) -> Result<Self> {
        if models.is_empty() {
            return Err(invalid("a swarm needs at least one node"));
        }
        if models.len() != bits.len() {
            return Err(invalid(format!(
                "{} models but {} score budgets",
                models.len(),
                bits.len()
            )));
        }
        let vocab = models[0].vocab();
        if models.iter().any(|m| m.vocab() != vocab) {
            return Err(invalid("node models disagree on vocabulary size"));
        }
        let codecs = bits
            .iter()
            .map(|&b| ScoreCodec::new(b, s_max))
            .collect::<Result<_>>()?;
        Ok(Self {
            bus: Bus::new(models.len()),
            models,
            codecs,
            s_max,
            seed,
        })
    }

    pub fn nodes(&self) -> usize {
        self.models.len()
    }

    pub fn vocab(&self) -> usize {
        self.models[0].vocab()
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn bus(&self) -> &Bus<QuantizedPayload> {
        &self.bus
    }

    fn raw_scores(&self, x: usize) -> Result<Vec<Vec<f64>>> {
        let vocab = self.vocab();
        if x >= vocab {
            return Err(invalid(format!("context {x} outside vocabulary of {vocab}")));
        }
        Ok(self
            .models
            .iter()
            .map(|m| m.row(x).iter().map(|&lp| truncated_score(lp, self.s_max)).collect())
            .collect())
    }

    fn aggregate(&self, query: usize, raw: &[Vec<f64>]) -> Result<Vec<f64>> {
        for (i, (scores, codec)) in raw.iter().zip(&self.codecs).enumerate() {
            let dither = seed::derive(self.seed, &[role::SCORE_DITHER, query as u64, i as u64]);
            let payload = codec.encode(scores, dither)?;
            self.bus.uplink(i as NodeId, Channel::Inference, query as u64, payload);
        }
        let mut acc = vec![0.0; self.vocab()];
        let mut reports = 0usize;
        for env in self.bus.drain() {
            if env.tag != query as u64 {
                return Err(Error::Protocol(format!("stray report for query {}", env.tag)));
            }
            dequantize_accumulate(&env.payload, &mut acc)?;
            reports += 1;
        }
        if reports != self.nodes() {
            return Err(Error::Protocol(format!(
                "expected {} node reports, got {reports}",
                self.nodes()
            )));
        }
        let k = reports as f64;
        let half = self.s_max / 2.0;
        acc.iter_mut()
            .for_each(|a| *a = (*a / k + half).clamp(0.0, self.s_max));
        Ok(acc)
    }

    /// Swarm score of every candidate for query `x`; uplinks one payload
    /// per node.
    pub fn swarm_scores(&self, query: usize, x: usize) -> Result<Vec<f64>> {
        let raw = self.raw_scores(x)?;
        self.aggregate(query, &raw)
    }

    /// Like [`Swarm::swarm_scores`], keeping the per-node raw scores.
    pub fn score_query(&self, query: usize, x: usize) -> Result<Vec<ScoreRecord>> {
        let raw = self.raw_scores(x)?;
        let swarm = self.aggregate(query, &raw)?;
        Ok(swarm
            .into_iter()
            .enumerate()
            .map(|(y, swarm_score)| ScoreRecord {
                query,
                candidate: y,
                per_node_scores: raw.iter().map(|r| r[y]).collect(),
                swarm_score,
            })
            .collect())
    }

    /// Unquantized swarm score `(1/K) Σ_i s_i(x, y)`.
    pub fn oracle_score(&self, x: usize, y: usize) -> f64 {
        self.models
            .iter()
            .map(|m| truncated_score(m.row(x)[y], self.s_max))
            .sum::<f64>()
            / self.nodes() as f64
    }
}

/// One node's calibration summary on the `2^grid_bits`-level grid
/// `{j · S_max / (2^grid_bits - 1)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSummary {
    pub node: NodeId,
    pub grid_bits: u8,
    pub s_max: f64,
    pub counts_per_level: Vec<u32>,
}

/// Bits of `node id (16) | grid bits (8) | count (32)`.
pub const SUMMARY_HEADER_BITS: u64 = 16 + 8 + 32;

fn grid_spacing(grid_bits: u8, s_max: f64) -> f64 {
    s_max / ((1u64 << grid_bits) - 1) as f64
}

impl CalibrationSummary {
    pub fn total(&self) -> u64 {
        self.counts_per_level.iter().map(|&c| c as u64).sum()
    }

    pub fn spacing(&self) -> f64 {
        grid_spacing(self.grid_bits, self.s_max)
    }

    pub fn level(&self, index: usize) -> f64 {
        index as f64 * self.spacing()
    }

    /// Level indices in ascending order, one per calibration score.
    pub fn order_statistics(&self) -> Vec<u32> {
        self.counts_per_level
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| std::iter::repeat(j as u32).take(c as usize))
            .collect()
    }

    /// Header followed by the packed order statistics, `grid_bits` each.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.total()).map_err(|_| invalid("too many calibration scores"))?;
        let node = u16::try_from(self.node).map_err(|_| invalid("node id does not fit the wire format"))?;
        let mut out = Vec::with_capacity(7 + quant::packed_len(count as usize, self.grid_bits));
        out.extend_from_slice(&node.to_be_bytes());
        out.push(self.grid_bits);
        out.extend_from_slice(&count.to_be_bytes());
        out.extend(quant::pack_bits(&self.order_statistics(), self.grid_bits)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], s_max: f64) -> Result<Self> {
        if bytes.len() < 7 {
            return Err(Error::Decode("calibration summary shorter than its header".into()));
        }
        let node = u16::from_be_bytes([bytes[0], bytes[1]]) as NodeId;
        let grid_bits = bytes[2];
        if grid_bits == 0 || grid_bits > MAX_GRID_BITS {
            return Err(Error::Decode(format!("unsupported grid of {grid_bits} bits")));
        }
        let count = u32::from_be_bytes([bytes[3], bytes[4], bytes[5], bytes[6]]) as usize;
        let body = &bytes[7..];
        if body.len() != quant::packed_len(count, grid_bits) {
            return Err(Error::Decode("calibration body length does not match its count".into()));
        }
        let mut counts_per_level = vec![0u32; 1 << grid_bits];
        let mut previous = 0u32;
        for idx in quant::unpack_bits(body, grid_bits, count)? {
            if idx < previous {
                return Err(Error::Decode("order statistics are not sorted".into()));
            }
            previous = idx;
            counts_per_level[idx as usize] += 1;
        }
        Ok(Self {
            node,
            grid_bits,
            s_max,
            counts_per_level,
        })
    }
}

impl Payload for CalibrationSummary {
    fn payload_bits(&self) -> u64 {
        self.total() * self.grid_bits as u64
    }

    fn header_bits(&self) -> u64 {
        SUMMARY_HEADER_BITS
    }
}

/// Snap each score to the nearest grid level (ties to the larger level).
pub fn summarize_calibration(
    node: NodeId,
    local_scores: &[f64],
    grid_bits: u8,
    s_max: f64,
) -> Result<CalibrationSummary> {
    if grid_bits == 0 || grid_bits > MAX_GRID_BITS {
        return Err(invalid(format!("B_cal must be in 1..={MAX_GRID_BITS}, got {grid_bits}")));
    }
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(invalid("S_max must be positive and finite"));
    }
    let spacing = grid_spacing(grid_bits, s_max);
    let top = (1usize << grid_bits) - 1;
    let mut counts_per_level = vec![0u32; top + 1];
    for &s in local_scores {
        if !(0.0..=s_max).contains(&s) {
            return Err(invalid(format!("calibration score {s} outside [0, {s_max}]")));
        }
        let idx = ((s / spacing + 0.5).floor() as usize).min(top);
        counts_per_level[idx] += 1;
    }
    Ok(CalibrationSummary {
        node,
        grid_bits,
        s_max,
        counts_per_level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalQuantile {
    /// Threshold; `+∞` when the rank exceeds the calibration count.
    pub q_hat: f64,
    pub alpha: f64,
    pub n_cal: u64,
}

/// `⌈(1-α)(n+1)⌉`, with a relative guard so that products such as
/// `0.9 · 10` do not round up to the next integer.
pub fn conformal_rank(alpha: f64, n_cal: u64) -> u64 {
    let r = (1.0 - alpha) * (n_cal as f64 + 1.0);
    (r - 1e-9 * r.max(1.0)).ceil().max(1.0) as u64
}

/// Merge the summaries and read off the split-conformal quantile.
pub fn reconstruct_quantile(summaries: &[CalibrationSummary], alpha: f64) -> Result<ConformalQuantile> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid("alpha must lie in [0, 1)"));
    }
    let first = summaries
        .first()
        .ok_or_else(|| invalid("no calibration summaries"))?;
    if summaries
        .iter()
        .any(|s| s.grid_bits != first.grid_bits || s.s_max != first.s_max)
    {
        return Err(Error::Protocol("calibration summaries use different grids".into()));
    }
    let mut merged = vec![0u64; first.counts_per_level.len()];
    for s in summaries {
        merged
            .iter_mut()
            .zip(&s.counts_per_level)
            .for_each(|(m, &c)| *m += c as u64);
    }
    let n_cal: u64 = merged.iter().sum();
    if n_cal == 0 {
        return Err(invalid("empty calibration set"));
    }
    let rank = conformal_rank(alpha, n_cal);
    let q_hat = if rank > n_cal {
        f64::INFINITY
    } else {
        let mut seen = 0u64;
        let idx = merged
            .iter()
            .position(|&c| {
                seen += c;
                seen >= rank
            })
            .expect("rank within total");
        first.level(idx)
    };
    Ok(ConformalQuantile { q_hat, alpha, n_cal })
}

/// Each node summarizes its scores and uplinks the wire encoding on the
/// calibration channel; the hub decodes and reconstructs.
pub fn federated_calibration(
    per_node_scores: &[Vec<f64>],
    grid_bits: u8,
    alpha: f64,
    s_max: f64,
    bus: &Bus<CalibrationSummary>,
) -> Result<(ConformalQuantile, Vec<CalibrationSummary>)> {
    for (i, scores) in per_node_scores.iter().enumerate() {
        let summary = summarize_calibration(i as NodeId, scores, grid_bits, s_max)?;
        bus.uplink(i as NodeId, Channel::Calibration, 0, summary);
    }
    let summaries = bus
        .drain()
        .into_iter()
        .map(|env| CalibrationSummary::from_bytes(&env.payload.to_bytes()?, s_max))
        .collect::<Result<Vec<_>>>()?;
    Ok((reconstruct_quantile(&summaries, alpha)?, summaries))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    members: Vec<usize>,
}

impl PredictionSet {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.members.binary_search(&y).is_ok()
    }
}

/// `{y : swarm_score(x, y) ≤ q̂}`.
pub fn predict_set(q: &ConformalQuantile, scores: &[ScoreRecord]) -> PredictionSet {
    let mut members: Vec<usize> = scores
        .iter()
        .filter(|r| r.swarm_score <= q.q_hat)
        .map(|r| r.candidate)
        .collect();
    members.sort_unstable();
    PredictionSet { members }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub mean_set_size: f64,
    pub n_test: usize,
}

/// Serve every `(x, y)` test pair with a frozen quantile. Query ids are
/// the pair indices.
pub fn evaluate_coverage(swarm: &Swarm, q: &ConformalQuantile, test: &[(usize, usize)]) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(invalid("no test pairs"));
    }
    let mut covered = 0usize;
    let mut total_size = 0usize;
    for (query, &(x, y)) in test.iter().enumerate() {
        let scores = swarm.swarm_scores(query, x)?;
        covered += (scores[y] <= q.q_hat) as usize;
        total_size += scores.iter().filter(|&&s| s <= q.q_hat).count();
    }
    let n = test.len() as f64;
    Ok(CoverageReport {
        coverage: covered as f64 / n,
        mean_set_size: total_size as f64 / n,
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn table(vocab: usize, seed: u64) -> LogitTable {
        let gt = crate::ngram::generate_ground_truth(vocab, seed).unwrap();
        gt.log_probs().clone()
    }

    #[test]
    fn default_cap_matches_floor() {
        assert_abs_diff_eq!(s_max_for_floor(PROBABILITY_FLOOR).unwrap(), DEFAULT_S_MAX, epsilon = 1e-12);
        assert!(s_max_for_floor(0.0).is_err());
        assert_eq!(truncated_score(-50.0, DEFAULT_S_MAX), DEFAULT_S_MAX);
        assert_eq!(truncated_score(-1.5, DEFAULT_S_MAX), 1.5);
    }

    #[test]
    fn single_fine_node_reproduces_raw_scores() {
        let t = table(16, 2);
        let swarm = Swarm::new(vec![t.clone()], &[24], DEFAULT_S_MAX, 1).unwrap();
        let step = swarm.codecs[0].quantizer().step();
        for r in swarm.score_query(0, 5).unwrap() {
            let raw = truncated_score(t.row(5)[r.candidate], DEFAULT_S_MAX);
            assert_eq!(r.per_node_scores, vec![raw]);
            assert!((r.swarm_score - raw).abs() <= step / 2.0);
        }
    }

    #[test]
    fn swarm_score_is_mean_of_node_scores() {
        // Row of log-probabilities giving scores 1.0 and 3.0 on token 0.
        let mut a = LogitTable::zeros(2);
        let mut b = LogitTable::zeros(2);
        a.row_mut(0).copy_from_slice(&[-1.0, (1.0 - (-1.0f64).exp()).ln()]);
        b.row_mut(0).copy_from_slice(&[-3.0, (1.0 - (-3.0f64).exp()).ln()]);
        let swarm = Swarm::new(vec![a, b], &[30, 30], DEFAULT_S_MAX, 4).unwrap();
        let rec = &swarm.score_query(0, 0).unwrap()[0];
        assert_abs_diff_eq!(rec.swarm_score, 2.0, epsilon = 1e-7);
    }

    #[test]
    fn inference_ledger_is_n_test_k_v_b() {
        let models: Vec<LogitTable> = (0..3).map(|s| table(8, s)).collect();
        let swarm = Swarm::new(models, &[4, 8, 2], DEFAULT_S_MAX, 0).unwrap();
        let q = ConformalQuantile { q_hat: 5.0, alpha: 0.1, n_cal: 10 };
        let test: Vec<(usize, usize)> = (0..25).map(|j| (j % 8, (3 * j) % 8)).collect();
        evaluate_coverage(&swarm, &q, &test).unwrap();
        let ledger = swarm.bus().ledger();
        assert_eq!(ledger.total(Channel::Inference), 25 * 8 * (4 + 8 + 2));
        assert_eq!(ledger.inference_bits(1, 7), 8 * 8);
    }

    #[test]
    fn zero_grid_bits_rejected() {
        assert!(summarize_calibration(0, &[1.0], 0, DEFAULT_S_MAX).is_err());
        assert!(summarize_calibration(0, &[-0.1], 4, DEFAULT_S_MAX).is_err());
    }

    #[test]
    fn hand_snapped_four_level_grid() {
        // Levels 0, 1, 2, 3 for S_max = 3, two bits.
        let s = summarize_calibration(2, &[0.2, 0.5, 1.49, 2.51, 3.0], 2, 3.0).unwrap();
        assert_eq!(s.counts_per_level, vec![1, 2, 0, 2]);
        assert_eq!(s.total(), 5);
        assert_eq!(s.payload_bits(), 10);
    }

    #[test]
    fn fine_grid_reconstruction_is_within_resolution() {
        let mut rng = seed::rng(3);
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..DEFAULT_S_MAX)).collect();
        let s = summarize_calibration(0, &scores, 14, DEFAULT_S_MAX).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        for (idx, x) in s.order_statistics().iter().zip(&sorted) {
            assert!((s.level(*idx as usize) - x).abs() <= DEFAULT_S_MAX / (1 << 14) as f64);
        }
    }

    #[test]
    fn summary_wire_round_trip() {
        let s = summarize_calibration(7, &[0.1, 4.0, 4.0, 13.0, 2.2], 5, DEFAULT_S_MAX).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), 7 + quant::packed_len(5, 5));
        assert_eq!(CalibrationSummary::from_bytes(&bytes, DEFAULT_S_MAX).unwrap(), s);
        assert!(CalibrationSummary::from_bytes(&bytes[..bytes.len() - 1], DEFAULT_S_MAX).is_err());
    }

    #[test]
    fn rank_arithmetic() {
        assert_eq!(conformal_rank(0.1, 9), 9);
        assert_eq!(conformal_rank(0.1, 3000), 2701);
        assert_eq!(conformal_rank(0.0, 5), 6);
        assert_eq!(conformal_rank(0.5, 1), 1);
    }

    #[test]
    fn nine_scores_give_ninth_smallest() {
        let scores = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0];
        let s = summarize_calibration(0, &scores, 16, 10.0).unwrap();
        let q = reconstruct_quantile(&[s], 0.1).unwrap();
        assert!((q.q_hat - 9.0).abs() <= 10.0 / 65535.0);
        assert_eq!(q.n_cal, 9);
    }

    #[test]
    fn alpha_zero_gives_infinite_threshold_and_full_set() {
        let s = summarize_calibration(0, &[1.0, 2.0], 8, DEFAULT_S_MAX).unwrap();
        let q = reconstruct_quantile(&[s], 0.0).unwrap();
        assert_eq!(q.q_hat, f64::INFINITY);
        let records: Vec<ScoreRecord> = (0..5)
            .map(|y| ScoreRecord { query: 0, candidate: y, per_node_scores: vec![], swarm_score: DEFAULT_S_MAX })
            .collect();
        assert_eq!(predict_set(&q, &records).size(), 5);
    }

    #[test]
    fn threshold_below_every_score_gives_empty_set() {
        let records: Vec<ScoreRecord> = (0..5)
            .map(|y| ScoreRecord { query: 0, candidate: y, per_node_scores: vec![], swarm_score: 1.0 + y as f64 })
            .collect();
        let q = ConformalQuantile { q_hat: 0.5, alpha: 0.1, n_cal: 1 };
        assert_eq!(predict_set(&q, &records).size(), 0);
    }

    #[test]
    fn predict_set_matches_direct_filter() {
        let mut rng = seed::rng(8);
        for _ in 0..50 {
            let records: Vec<ScoreRecord> = (0..40)
                .map(|y| ScoreRecord { query: 0, candidate: y, per_node_scores: vec![], swarm_score: rng.gen_range(0.0..10.0) })
                .collect();
            let q = ConformalQuantile { q_hat: rng.gen_range(0.0..10.0), alpha: 0.1, n_cal: 1 };
            let set = predict_set(&q, &records);
            for r in &records {
                assert_eq!(set.contains(r.candidate), r.swarm_score <= q.q_hat);
            }
        }
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let s = summarize_calibration(0, &[], 4, DEFAULT_S_MAX).unwrap();
        assert!(reconstruct_quantile(&[s], 0.1).is_err());
        assert!(reconstruct_quantile(&[], 0.1).is_err());
    }

    #[test]
    fn permuting_calibration_scores_leaves_quantile_unchanged() {
        let mut rng = seed::rng(11);
        let mut scores: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..DEFAULT_S_MAX)).collect();
        let q = |s: &[f64]| {
            let parts: Vec<CalibrationSummary> = s
                .chunks(100)
                .enumerate()
                .map(|(i, c)| summarize_calibration(i as NodeId, c, 8, DEFAULT_S_MAX).unwrap())
                .collect();
            reconstruct_quantile(&parts, 0.1).unwrap().q_hat
        };
        let before = q(&scores);
        for _ in 0..10 {
            scores.shuffle(&mut rng);
            assert_eq!(q(&scores), before);
        }
    }

    #[test]
    fn quantile_stability_under_perturbation() {
        // Logistic CDF has density at most 1/4.
        let cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut rng = seed::rng(12);
        for _ in 0..1000 {
            let q_star: f64 = rng.gen_range(-5.0..5.0);
            let q_hat = q_star + rng.gen_range(-1.0..1.0);
            assert!((cdf(q_hat) - cdf(q_star)).abs() <= 0.25 * (q_hat - q_star).abs() + 1e-15);
        }
    }

    #[test]
    fn federated_calibration_charges_grid_bits_per_score() {
        let bus: Bus<CalibrationSummary> = Bus::new(2);
        let scores = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0]];
        let (q, summaries) = federated_calibration(&scores, 6, 0.2, DEFAULT_S_MAX, &bus).unwrap();
        assert_eq!(q.n_cal, 5);
        assert_eq!(summaries.len(), 2);
        let ledger = bus.ledger();
        assert_eq!(ledger.calibration_bits(0), 18);
        assert_eq!(ledger.calibration_bits(1), 12);
        assert_eq!(ledger.header_bits(), 2 * SUMMARY_HEADER_BITS);
    }

    #[test]
    fn tiny_instance_matches_exhaustive_recomputation() {
        let vocab = 4;
        let models: Vec<LogitTable> = (0..2).map(|s| table(vocab, 40 + s)).collect();
        let swarm = Swarm::new(models.clone(), &[30, 30], DEFAULT_S_MAX, 9).unwrap();
        let mut rng = seed::rng(13);
        let pairs: Vec<(usize, usize)> = (0..40).map(|_| (rng.gen_range(0..vocab), rng.gen_range(0..vocab))).collect();
        let (cal, test) = pairs.split_at(20);

        let cal_scores: Vec<f64> = cal
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| swarm.score_query(1000 + j, x).unwrap()[y].swarm_score)
            .collect();
        let s = summarize_calibration(0, &cal_scores, 20, DEFAULT_S_MAX).unwrap();
        let q = reconstruct_quantile(&[s], 0.2).unwrap();

        // Brute force with exact scores: 17th smallest of 20, exact filter.
        let exact = |x: usize, y: usize| {
            models
                .iter()
                .map(|m| truncated_score(m.row(x)[y], DEFAULT_S_MAX))
                .sum::<f64>()
                / 2.0
        };
        let mut sorted: Vec<f64> = cal.iter().map(|&(x, y)| exact(x, y)).collect();
        sorted.sort_by(f64::total_cmp);
        let q_exact = sorted[16];
        assert!((q.q_hat - q_exact).abs() < 1e-4);

        let report = evaluate_coverage(&swarm, &q, test).unwrap();
        let mut hits = 0;
        let mut size = 0;
        for &(x, y) in test {
            let members: Vec<usize> = (0..vocab).filter(|&c| exact(x, c) <= q.q_hat).collect();
            hits += members.contains(&y) as usize;
            size += members.len();
        }
        assert_abs_diff_eq!(report.coverage, hits as f64 / 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_set_size, size as f64 / 20.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn node_scores() -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(0.0f64..=DEFAULT_S_MAX, 1..60), 1..6)
        }

        proptest! {
            #[test]
            fn fine_grid_quantile_matches_pooled_sort(scores in node_scores(), alpha in 0.01f64..0.5) {
                let parts: Vec<CalibrationSummary> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, s)| summarize_calibration(i as NodeId, s, 16, DEFAULT_S_MAX).unwrap())
                    .collect();
                let q = reconstruct_quantile(&parts, alpha).unwrap();
                let mut pooled: Vec<f64> = scores.iter().flatten().copied().collect();
                pooled.sort_by(f64::total_cmp);
                let rank = conformal_rank(alpha, pooled.len() as u64) as usize;
                if rank > pooled.len() {
                    prop_assert!(q.q_hat.is_infinite());
                } else {
                    prop_assert!((q.q_hat - pooled[rank - 1]).abs() <= DEFAULT_S_MAX / 65535.0 / 2.0 + 1e-12);
                }
            }

            #[test]
            fn quantile_ignores_how_scores_are_split(scores in node_scores(), bits in 1u8..=12) {
                let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
                let split: Vec<CalibrationSummary> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, s)| summarize_calibration(i as NodeId, s, bits, DEFAULT_S_MAX).unwrap())
                    .collect();
                let whole = summarize_calibration(0, &pooled, bits, DEFAULT_S_MAX).unwrap();
                prop_assert_eq!(
                    reconstruct_quantile(&split, 0.1).unwrap(),
                    reconstruct_quantile(&[whole], 0.1).unwrap()
                );
            }

            #[test]
            fn summary_wire_format_round_trips(scores in proptest::collection::vec(0.0f64..=DEFAULT_S_MAX, 0..80), bits in 1u8..=MAX_GRID_BITS) {
                let s = summarize_calibration(3, &scores, bits, DEFAULT_S_MAX).unwrap();
                let bytes = s.to_bytes().unwrap();
                prop_assert_eq!(CalibrationSummary::from_bytes(&bytes, DEFAULT_S_MAX).unwrap(), s.clone());
                prop_assert_eq!(s.payload_bits(), scores.len() as u64 * bits as u64);
            }
        }
    }
}
