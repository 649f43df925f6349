//! Closed-form bound calculators.
//!
//! Everything here is a pure function of [`BoundParams`]. Envelope
//! constants `c1`, `c2` and the quantile constant `c` are configurable and
//! default to 1; the quantization constant is fixed at `clip²/6`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fcrag::DEFAULT_S_MAX;
use crate::ngram::NodeDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundParams {
    /// Nodes `K`.
    pub k: u64,
    /// Samples per node `n`.
    pub n: u64,
    /// Probes `m`.
    pub m: u64,
    pub vocab: u64,
    /// Parameter dimension `d`.
    pub d: u64,
    /// Bits per probe vector `B`; bits per coordinate is `B/V`.
    pub probe_bits: u64,
    /// Density ratio `ρ` between the context marginal and the probe marginal.
    pub rho: f64,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub clip: f64,
    pub eps_opt: f64,
    pub eps_fit: f64,
    /// `(1/K) Σ KL(P* || P_i)`, added to the Theorem 1 total.
    pub drift_term: f64,
    pub alpha: f64,
    pub n_cal: u64,
    /// Per-node score budgets `B_i`.
    pub score_bits: Vec<u32>,
    /// Calibration grid bits `B_cal`.
    pub grid_bits: u32,
    pub s_max: f64,
    pub f_max: f64,
    /// Quantile concentration constant `c`.
    pub c_quantile: f64,
    /// Training KL feeding the propagation bound.
    pub kl_bar: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            k: 4,
            n: 3000,
            m: 3000,
            vocab: 256,
            d: 256 * 255,
            probe_bits: 256 * 8,
            rho: 1.0,
            delta: 0.05,
            c1: 1.0,
            c2: 1.0,
            clip: 20.0,
            eps_opt: 0.0,
            eps_fit: 0.0,
            drift_term: 0.0,
            alpha: 0.1,
            n_cal: 3000,
            score_bits: vec![8; 4],
            grid_bits: 8,
            s_max: DEFAULT_S_MAX,
            f_max: 1.0,
            c_quantile: 1.0,
            kl_bar: 0.0,
        }
    }
}

impl BoundParams {
    pub fn bits_per_coord(&self) -> f64 {
        self.probe_bits as f64 / self.vocab as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("n", self.n),
            ("m", self.m),
            ("vocab", self.vocab),
            ("n_cal", self.n_cal),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha must lie in (0, 1)"));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("c1", self.c1),
            ("c2", self.c2),
            ("clip", self.clip),
            ("s_max", self.s_max),
            ("c_quantile", self.c_quantile),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [
            ("eps_opt", self.eps_opt),
            ("eps_fit", self.eps_fit),
            ("drift_term", self.drift_term),
            ("f_max", self.f_max),
            ("kl_bar", self.kl_bar),
        ] {
            if !(v >= 0.0) {
                return Err(invalid(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Terms {
    pub statistical: f64,
    pub probe: f64,
    pub quant: f64,
    pub total: f64,
}

/// `c1·d/(Kn) + c2·ρ·√(V log(V/δ)/m) + (clip²/6)(1/K)2^{-2B/V} + ε_opt + ε_fit`,
/// plus the drift term when it is nonzero.
pub fn theorem1_rhs(p: &BoundParams) -> Result<Theorem1Terms> {
    p.validate()?;
    let k = p.k as f64;
    let v = p.vocab as f64;
    let statistical = p.c1 * p.d as f64 / (k * p.n as f64);
    let probe = p.c2 * p.rho * (v * (v / p.delta).ln() / p.m as f64).sqrt();
    let quant = quant_constant(p.clip) / k * (-2.0 * p.bits_per_coord()).exp2();
    Ok(Theorem1Terms {
        statistical,
        probe,
        quant,
        total: statistical + probe + quant + p.eps_opt + p.eps_fit + p.drift_term,
    })
}

/// `c3 = clip²/6`.
pub fn quant_constant(clip: f64) -> f64 {
    clip * clip / 6.0
}

/// Looser bandwidth terms without the trace sharpening: the shared-dither
/// bound `(clip²/12)(V/K)2^{-2B/V}` and the cubic remainder
/// `clip·(clip²/3)·K^{-2}·2^{-3B/V}` for undithered rounding.
pub fn theorem1_alt_bounds(p: &BoundParams) -> Result<(f64, f64)> {
    p.validate()?;
    let k = p.k as f64;
    let b = p.bits_per_coord();
    let alt_a = p.clip * p.clip / 12.0 * p.vocab as f64 / k * (-2.0 * b).exp2();
    let alt_b_extra = p.clip * (p.clip * p.clip / 3.0) / (k * k) * (-3.0 * b).exp2();
    Ok((alt_a, alt_b_extra))
}

/// `(1/K) Σ_i KL(P* || P_i)`.
pub fn heterogeneity_drift(nodes: &[NodeDistribution]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    nodes.iter().map(|n| n.kl_to_target()).sum::<f64>() / nodes.len() as f64
}

/// Score-quantization variance `v(B) = (S_max²/3)·2^{-2B}`.
pub fn score_variance(bits: u32, s_max: f64) -> f64 {
    s_max * s_max / 3.0 * (-2.0 * bits as f64).exp2()
}

/// Calibration-grid error `φ(B_cal) = S_max·2^{-B_cal}`.
pub fn grid_error(grid_bits: u32, s_max: f64) -> f64 {
    s_max * (-(grid_bits as f64)).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Slacks {
    pub delta_fl: f64,
    pub delta_rag: f64,
    pub coverage_lb: f64,
}

pub fn theorem2_slacks(p: &BoundParams) -> Result<Theorem2Slacks> {
    p.validate()?;
    if p.score_bits.is_empty() {
        return Err(invalid("need at least one score budget"));
    }
    let delta_fl = p.f_max * ((2.0 / p.delta).ln() / (p.c_quantile * p.n_cal as f64)).sqrt()
        + p.f_max * grid_error(p.grid_bits, p.s_max);
    let k = p.score_bits.len() as f64;
    let var_sum: f64 = p.score_bits.iter().map(|&b| score_variance(b, p.s_max)).sum();
    let delta_rag = p.f_max * (var_sum / (k * k)).sqrt();
    let coverage_lb = 1.0 - p.alpha - 1.0 / (p.n_cal as f64 + 1.0) - delta_fl - delta_rag;
    Ok(Theorem2Slacks {
        delta_fl,
        delta_rag,
        coverage_lb,
    })
}

/// `V·(1 - α + 1/(n_cal+1) + Δ_FL + Δ_RAG)`.
pub fn efficiency_ub(p: &BoundParams) -> Result<f64> {
    let s = theorem2_slacks(p)?;
    Ok(p.vocab as f64 * (1.0 - p.alpha + 1.0 / (p.n_cal as f64 + 1.0) + s.delta_fl + s.delta_rag))
}

/// `f_max·(KL̄ + √(2·KL̄))`.
pub fn pinsker_delta_train(kl_bar: f64, f_max: f64) -> Result<f64> {
    if !(kl_bar >= 0.0) || !(f_max >= 0.0) {
        return Err(invalid("kl_bar and f_max must be nonnegative"));
    }
    Ok(f_max * (kl_bar + (2.0 * kl_bar).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub t1_statistical: f64,
    pub t1_probe: f64,
    pub t1_quant: f64,
    pub t1_total: f64,
    pub t1_quant_alt_a: f64,
    pub t1_quant_alt_b_extra: f64,
    pub drift_term: f64,
    pub delta_fl: f64,
    pub delta_rag: f64,
    pub coverage_lb: f64,
    pub setsize_ub: f64,
    pub delta_train: f64,
    pub coverage_lb_e2e: f64,
}

impl BoundReport {
    pub fn evaluate(p: &BoundParams) -> Result<Self> {
        let t1 = theorem1_rhs(p)?;
        let (alt_a, alt_b) = theorem1_alt_bounds(p)?;
        let t2 = theorem2_slacks(p)?;
        let delta_train = pinsker_delta_train(p.kl_bar, p.f_max)?;
        Ok(Self {
            t1_statistical: t1.statistical,
            t1_probe: t1.probe,
            t1_quant: t1.quant,
            t1_total: t1.total,
            t1_quant_alt_a: alt_a,
            t1_quant_alt_b_extra: alt_b,
            drift_term: p.drift_term,
            delta_fl: t2.delta_fl,
            delta_rag: t2.delta_rag,
            coverage_lb: t2.coverage_lb,
            setsize_ub: efficiency_ub(p)?,
            delta_train,
            coverage_lb_e2e: t2.coverage_lb - delta_train,
        })
    }
}

/// Minimum number of scores the histogram window must hold.
pub const FMAX_MIN_IN_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmaxEstimate {
    pub f_max: f64,
    pub in_window: usize,
    /// No score fell in the window; `f_max` is reported as 0.
    pub degenerate: bool,
}

/// Largest histogram density over `[q* - r, q* + r]` with bins of width
/// `r/10`, normalized by the full sample size.
pub fn estimate_fmax(oracle_scores: &[f64], q_star: f64, radius: f64) -> Result<FmaxEstimate> {
    if !(radius > 0.0) || !radius.is_finite() || !q_star.is_finite() {
        return Err(invalid("radius must be positive and q* finite"));
    }
    let width = radius / 10.0;
    let lo = q_star - radius;
    let mut bins = [0usize; 20];
    let mut in_window = 0;
    for &s in oracle_scores {
        if s >= lo && s <= q_star + radius {
            bins[(((s - lo) / width) as usize).min(19)] += 1;
            in_window += 1;
        }
    }
    if in_window == 0 {
        return Ok(FmaxEstimate {
            f_max: 0.0,
            in_window,
            degenerate: true,
        });
    }
    if in_window < FMAX_MIN_IN_WINDOW {
        return Err(invalid(format!(
            "only {in_window} scores in the window, need {FMAX_MIN_IN_WINDOW}; widen the radius"
        )));
    }
    let peak = *bins.iter().max().expect("nonempty");
    Ok(FmaxEstimate {
        f_max: peak as f64 / (oracle_scores.len() as f64 * width),
        in_window,
        degenerate: false,
    })
}
