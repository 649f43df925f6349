//! Seeded multi-seed experiment runner.
//!
//! Each experiment produces one [`ExperimentResult`], serialized as a single
//! JSON document (see the result schema chapter of the guide). Seeds are derived from
//! `(master seed, experiment, seed index, role)`, so every grid point of a
//! sweep sees the same ground truth and data streams for a given seed index
//! and a seed's results do not depend on how many other seeds run.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{estimate_fmax, BoundParams, BoundReport};
use crate::error::{Error, Result};
use crate::fcrag::{evaluate_coverage, federated_calibration, CalibrationSummary, Swarm, DEFAULT_S_MAX};
use crate::fpld::{run_fpld, FpldConfig};
use crate::ngram::{generate_ground_truth, homogeneous_node, perturb_node, GroundTruth, LogitTable, PairSampler};
use crate::quant::{dequantize, quantize, DitherMode, QuantizerConfig};
use crate::seed::{self, role};
use crate::transport::{Bus, Channel, LedgerSnapshot};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "FEDLM_THREADS";

/// Grids and seed counts of the published sweeps.
pub mod published {
    pub const E1_K: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
    pub const E1_N: [usize; 7] = [100, 300, 1_000, 3_000, 10_000, 30_000, 100_000];
    pub const E1_M: [usize; 6] = [100, 300, 1_000, 3_000, 10_000, 30_000];
    pub const E1_BITS: [u8; 9] = [2, 3, 4, 5, 6, 7, 8, 10, 12];
    pub const E1_VOCAB: [usize; 5] = [64, 128, 256, 512, 1024];
    pub const E1_SEEDS: usize = 40;

    pub const E1_5_K: [usize; 3] = [2, 4, 8];
    pub const E1_5_DRIFT: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0];
    pub const E1_5_SEEDS: usize = 20;

    pub const E2_N_CAL: [usize; 5] = [100, 300, 1_000, 3_000, 10_000];
    pub const E2_GRID_BITS: [u8; 9] = [1, 2, 4, 6, 8, 10, 12, 14, 16];
    pub const E2_SCORE_BITS: [u8; 6] = [1, 2, 4, 8, 16, 32];
    pub const E2_SEEDS: usize = 20;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "e1")]
    E1,
    #[serde(rename = "e1_5")]
    E1_5,
    #[serde(rename = "e2")]
    E2,
    #[serde(rename = "quant_check")]
    QuantCheck,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            Self::E1 => "e1",
            Self::E1_5 => "e1_5",
            Self::E2 => "e2",
            Self::QuantCheck => "quant_check",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::E1 => 0xe1,
            Self::E1_5 => 0xe15,
            Self::E2 => 0xe2,
            Self::QuantCheck => 0x9c,
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e1" => Ok(Self::E1),
            "e1_5" | "e1.5" => Ok(Self::E1_5),
            "e2" => Ok(Self::E2),
            "quant_check" | "quant-check" => Ok(Self::QuantCheck),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

/// How the parameter dimension `d` is derived from `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionRule {
    /// `d = V(V-1)`: free parameters of a row-normalized table.
    VTimesVMinusOne,
    /// `d = V²`.
    VSquared,
}

impl DimensionRule {
    pub fn dimension(self, vocab: usize) -> u64 {
        let v = vocab as u64;
        match self {
            Self::VTimesVMinusOne => v * (v - 1),
            Self::VSquared => v * v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E1Config {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub bits: u8,
    pub vocab: usize,
    pub clip: f64,
    pub beta: f64,
    pub rounds: usize,
    pub mode: DitherMode,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub d_rule: DimensionRule,
    pub sweep_k: Vec<usize>,
    pub sweep_n: Vec<usize>,
    pub sweep_m: Vec<usize>,
    pub sweep_bits: Vec<u8>,
    pub sweep_vocab: Vec<usize>,
}

impl E1Config {
    pub fn published() -> Self {
        Self {
            k: 4,
            n: 3_000,
            m: 3_000,
            bits: 8,
            vocab: 256,
            clip: 20.0,
            beta: 0.5,
            rounds: 1,
            mode: DitherMode::DitheredIid,
            delta: 0.05,
            c1: 1.0,
            c2: 1.0,
            d_rule: DimensionRule::VTimesVMinusOne,
            sweep_k: published::E1_K.to_vec(),
            sweep_n: published::E1_N.to_vec(),
            sweep_m: published::E1_M.to_vec(),
            sweep_bits: published::E1_BITS.to_vec(),
            sweep_vocab: published::E1_VOCAB.to_vec(),
        }
    }

    pub fn ci() -> Self {
        Self {
            sweep_k: vec![1, 4, 16],
            sweep_n: vec![300, 3_000],
            sweep_m: vec![300, 3_000],
            sweep_bits: vec![2, 8],
            sweep_vocab: vec![64, 256],
            ..Self::published()
        }
    }

    fn point(&self) -> FpldPoint {
        FpldPoint {
            k: self.k,
            n: self.n,
            m: self.m,
            bits: self.bits,
            vocab: self.vocab,
            clip: self.clip,
            beta: self.beta,
            rounds: self.rounds,
            mode: self.mode,
            drift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E15Config {
    pub n: usize,
    pub m: usize,
    pub bits: u8,
    pub vocab: usize,
    pub clip: f64,
    pub beta: f64,
    pub rounds: usize,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub d_rule: DimensionRule,
    pub sweep_k: Vec<usize>,
    pub sweep_drift: Vec<f64>,
}

impl E15Config {
    pub fn published() -> Self {
        Self {
            n: 30_000,
            m: 3_000,
            bits: 8,
            vocab: 256,
            clip: 20.0,
            beta: 0.5,
            rounds: 1,
            delta: 0.05,
            c1: 1.0,
            c2: 1.0,
            d_rule: DimensionRule::VTimesVMinusOne,
            sweep_k: published::E1_5_K.to_vec(),
            sweep_drift: published::E1_5_DRIFT.to_vec(),
        }
    }

    pub fn ci() -> Self {
        Self {
            n: 3_000,
            m: 1_000,
            sweep_k: vec![2, 4],
            sweep_drift: vec![0.0, 0.5, 1.0],
            ..Self::published()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2Config {
    pub k: usize,
    pub vocab: usize,
    pub alpha: f64,
    pub n_cal: usize,
    pub score_bits: u8,
    pub grid_bits: u8,
    /// Test queries per seed.
    pub n_test: usize,
    /// Heterogeneity of the per-node scoring models.
    pub drift: f64,
    pub s_max: f64,
    pub delta: f64,
    pub c_quantile: f64,
    /// Oracle score draws per seed for the density estimate.
    pub fmax_samples: usize,
    pub sweep_n_cal: Vec<usize>,
    pub sweep_grid_bits: Vec<u8>,
    pub sweep_score_bits: Vec<u8>,
}

impl E2Config {
    pub fn published() -> Self {
        Self {
            k: 4,
            vocab: 256,
            alpha: 0.1,
            n_cal: 3_000,
            score_bits: 8,
            grid_bits: 8,
            n_test: 1_000,
            drift: 0.0,
            s_max: DEFAULT_S_MAX,
            delta: 0.05,
            c_quantile: 1.0,
            fmax_samples: 20_000,
            sweep_n_cal: published::E2_N_CAL.to_vec(),
            sweep_grid_bits: published::E2_GRID_BITS.to_vec(),
            sweep_score_bits: published::E2_SCORE_BITS.to_vec(),
        }
    }

    pub fn ci() -> Self {
        Self {
            n_test: 200,
            fmax_samples: 5_000,
            sweep_n_cal: vec![300, 3_000],
            sweep_grid_bits: vec![1, 8],
            sweep_score_bits: vec![1, 8],
            ..Self::published()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantCheckConfig {
    /// Error samples for the moment suite.
    pub draws: usize,
    pub clip: f64,
    pub bits: u8,
    /// FPLD setting for the bandwidth-term measurement.
    pub n: usize,
    pub m: usize,
    pub vocab: usize,
    pub beta: f64,
    pub bandwidth_seeds: usize,
    pub sweep_k: Vec<usize>,
    pub sweep_bits: Vec<u8>,
    /// Multiplicative slack on the bandwidth bounds.
    pub tolerance: f64,
}

impl QuantCheckConfig {
    pub fn published() -> Self {
        Self {
            draws: 1_000_000,
            clip: 20.0,
            bits: 8,
            n: 3_000,
            m: 3_000,
            vocab: 256,
            beta: 0.5,
            bandwidth_seeds: 3,
            sweep_k: vec![1, 4, 16],
            sweep_bits: vec![4, 8],
            tolerance: 1.10,
        }
    }

    pub fn ci() -> Self {
        Self {
            draws: 100_000,
            bandwidth_seeds: 1,
            sweep_k: vec![1, 4],
            ..Self::published()
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    pub seeds: usize,
    pub master_seed: u64,
    pub full: bool,
    pub e1: E1Config,
    pub e1_5: E15Config,
    pub e2: E2Config,
    pub quant_check: QuantCheckConfig,
}

pub const DEFAULT_MASTER_SEED: u64 = 20_240_601;

impl ExperimentSpec {
    /// Reduced CI grids with two seeds, or the published grids and seed
    /// counts when `full` is set.
    pub fn new(experiment: ExperimentId, full: bool) -> Self {
        let seeds = match (full, experiment) {
            (false, _) => 2,
            (true, ExperimentId::E1) => published::E1_SEEDS,
            (true, ExperimentId::E1_5) => published::E1_5_SEEDS,
            (true, ExperimentId::E2) => published::E2_SEEDS,
            (true, ExperimentId::QuantCheck) => 1,
        };
        let (e1, e1_5, e2, quant_check) = if full {
            (E1Config::published(), E15Config::published(), E2Config::published(), QuantCheckConfig::published())
        } else {
            (E1Config::ci(), E15Config::ci(), E2Config::ci(), QuantCheckConfig::ci())
        };
        Self {
            experiment,
            seeds,
            master_seed: DEFAULT_MASTER_SEED,
            full,
            e1,
            e1_5,
            e2,
            quant_check,
        }
    }

    /// Overlay a TOML document on this spec. Keys follow the JSON field
    /// names; unknown keys are rejected.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, overlay);
        *self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("{name} must not be empty")))
            } else {
                Ok(())
            }
        };
        match self.experiment {
            ExperimentId::E1 => {
                let c = &self.e1;
                nonempty("e1.sweep_k", c.sweep_k.len())?;
                nonempty("e1.sweep_n", c.sweep_n.len())?;
                nonempty("e1.sweep_m", c.sweep_m.len())?;
                nonempty("e1.sweep_bits", c.sweep_bits.len())?;
                nonempty("e1.sweep_vocab", c.sweep_vocab.len())?;
            }
            ExperimentId::E1_5 => {
                nonempty("e1_5.sweep_k", self.e1_5.sweep_k.len())?;
                nonempty("e1_5.sweep_drift", self.e1_5.sweep_drift.len())?;
            }
            ExperimentId::E2 => {
                let c = &self.e2;
                nonempty("e2.sweep_n_cal", c.sweep_n_cal.len())?;
                nonempty("e2.sweep_grid_bits", c.sweep_grid_bits.len())?;
                nonempty("e2.sweep_score_bits", c.sweep_score_bits.len())?;
                if c.fmax_samples < crate::bounds::FMAX_MIN_IN_WINDOW {
                    return Err(Error::Config("e2.fmax_samples is too small".into()));
                }
                if c.k == 0 || c.n_test == 0 {
                    return Err(Error::Config("e2.k and e2.n_test must be positive".into()));
                }
            }
            ExperimentId::QuantCheck => {
                if self.quant_check.draws < 2 {
                    return Err(Error::Config("quant_check.draws must be at least 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Whether the sweeps of this experiment are exactly the published ones.
    pub fn uses_published_grids(&self) -> bool {
        match self.experiment {
            ExperimentId::E1 => {
                let c = &self.e1;
                c.sweep_k == published::E1_K
                    && c.sweep_n == published::E1_N
                    && c.sweep_m == published::E1_M
                    && c.sweep_bits == published::E1_BITS
                    && c.sweep_vocab == published::E1_VOCAB
            }
            ExperimentId::E1_5 => {
                self.e1_5.sweep_k == published::E1_5_K && self.e1_5.sweep_drift == published::E1_5_DRIFT
            }
            ExperimentId::E2 => {
                let c = &self.e2;
                c.sweep_n_cal == published::E2_N_CAL
                    && c.sweep_grid_bits == published::E2_GRID_BITS
                    && c.sweep_score_bits == published::E2_SCORE_BITS
            }
            ExperimentId::QuantCheck => true,
        }
    }

    /// SHA-256 of the canonical JSON encoding of the spec.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Non-finite values are written as the strings `"inf"`, `"-inf"` and
/// `"nan"`, since JSON numbers cannot hold them.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Num(x)
        } else if x.is_nan() {
            Repr::Text("nan".into())
        } else if x > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected number text {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            xs.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

/// Mean, sample standard deviation and the per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "json_f64")]
    pub mean: f64,
    #[serde(with = "json_f64")]
    pub std: f64,
    #[serde(with = "json_f64::vec")]
    pub per_seed: Vec<f64>,
}

impl Stat {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len();
        let mean = per_seed.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, per_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    /// Value of the swept parameter at this point.
    pub axis_value: f64,
    /// Full parameter tuple.
    pub params: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, Stat>,
    pub bounds: BoundReport,
    /// Named inequality checks between metrics and bounds.
    pub checks: BTreeMap<String, bool>,
    /// All checks passed.
    pub bound_holds: bool,
    /// Uplink accounting of one seed; identical across seeds.
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub name: String,
    pub axis: String,
    pub points: Vec<Point>,
}

impl Sweep {
    pub fn point(&self, axis_value: f64) -> Option<&Point> {
        self.points.iter().find(|p| p.axis_value == axis_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    #[serde(with = "json_f64")]
    pub value: f64,
    #[serde(with = "json_f64")]
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub crate_version: String,
    pub config_hash: String,
    pub seeds: usize,
    pub master_seed: u64,
    pub published_grids: bool,
    pub wall_time_secs: f64,
    pub spec: ExperimentSpec,
    pub sweeps: Vec<Sweep>,
    pub checks: Vec<CheckRecord>,
}

impl ExperimentResult {
    pub fn sweep(&self, name: &str) -> Option<&Sweep> {
        self.sweeps.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Honour [`THREADS_ENV`] for the global worker pool. Safe to call more
/// than once; later calls are ignored.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let start = Instant::now();
    let (sweeps, checks) = match spec.experiment {
        ExperimentId::E1 => (run_e1(spec)?, vec![]),
        ExperimentId::E1_5 => (run_e1_5(spec)?, vec![]),
        ExperimentId::E2 => (run_e2(spec)?, vec![]),
        ExperimentId::QuantCheck => run_quant_check(spec)?,
    };
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        experiment: spec.experiment,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: spec.config_hash(),
        seeds: spec.seeds,
        master_seed: spec.master_seed,
        published_grids: spec.uses_published_grids(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        spec: spec.clone(),
        sweeps,
        checks,
    })
}

fn seed_root(master: u64, experiment: ExperimentId, seed_index: usize) -> u64 {
    seed::derive(master, &[experiment.tag(), seed_index as u64])
}

/// One FPLD configuration, as swept by E1 and E1.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpldPoint {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub bits: u8,
    pub vocab: usize,
    pub clip: f64,
    pub beta: f64,
    pub rounds: usize,
    pub mode: DitherMode,
    pub drift: f64,
}

impl FpldPoint {
    fn key(&self) -> String {
        format!("{self:?}")
    }

    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("k".to_string(), self.k as f64),
            ("n".to_string(), self.n as f64),
            ("m".to_string(), self.m as f64),
            ("bits".to_string(), self.bits as f64),
            ("vocab".to_string(), self.vocab as f64),
            ("clip".to_string(), self.clip),
            ("beta".to_string(), self.beta),
            ("rounds".to_string(), self.rounds as f64),
            ("drift".to_string(), self.drift),
        ])
    }
}

/// Per-seed outcome of one FPLD configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpldSeedResult {
    pub kl: f64,
    pub kl_exact: f64,
    pub quantization_kl: f64,
    pub covered_contexts: f64,
    pub saturated_coords: f64,
    pub drift_term: f64,
    pub ledger: LedgerSnapshot,
}

/// Run one FPLD configuration for `seeds` seeds of `experiment`.
pub fn run_fpld_point(
    point: &FpldPoint,
    seeds: usize,
    master: u64,
    experiment: ExperimentId,
) -> Result<Vec<FpldSeedResult>> {
    let quantizer = QuantizerConfig::new(point.bits, point.clip, point.mode)?;
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let root = seed_root(master, experiment, s);
            let gt = generate_ground_truth(point.vocab, seed::derive(root, &[role::GROUND_TRUTH]))?;
            let cfg = FpldConfig {
                nodes: point.k,
                samples_per_node: point.n,
                probes: point.m,
                rounds: point.rounds,
                local_epochs: 1,
                quantizer,
                beta: point.beta,
                drift: point.drift,
                seed: root,
            };
            let out = run_fpld(&cfg, &gt)?;
            let d = out.diagnostics;
            Ok(FpldSeedResult {
                kl: d.probe_kl,
                kl_exact: d.exact_kl,
                quantization_kl: d.quantization_kl,
                covered_contexts: d.covered_contexts as f64,
                saturated_coords: d.saturated_coords as f64,
                drift_term: d.drift_term,
                ledger: out.ledger.snapshot(),
            })
        })
        .collect()
}

fn fpld_metrics(results: &[FpldSeedResult]) -> BTreeMap<String, Stat> {
    let stat = |f: fn(&FpldSeedResult) -> f64| Stat::from_values(results.iter().map(f).collect());
    BTreeMap::from([
        ("kl".to_string(), stat(|r| r.kl)),
        ("kl_exact".to_string(), stat(|r| r.kl_exact)),
        ("quantization_kl".to_string(), stat(|r| r.quantization_kl)),
        ("covered_contexts".to_string(), stat(|r| r.covered_contexts)),
        ("saturated_coords".to_string(), stat(|r| r.saturated_coords)),
        ("drift_term".to_string(), stat(|r| r.drift_term)),
    ])
}

fn training_bounds(point: &FpldPoint, delta: f64, c1: f64, c2: f64, d_rule: DimensionRule, drift_term: f64) -> Result<BoundReport> {
    BoundReport::evaluate(&BoundParams {
        k: point.k as u64,
        n: point.n as u64,
        m: point.m as u64,
        vocab: point.vocab as u64,
        d: d_rule.dimension(point.vocab),
        probe_bits: point.vocab as u64 * point.bits as u64,
        delta,
        c1,
        c2,
        clip: point.clip,
        drift_term,
        ..BoundParams::default()
    })
}

struct FpldCache<'a> {
    spec: &'a ExperimentSpec,
    done: HashMap<String, Vec<FpldSeedResult>>,
}

impl FpldCache<'_> {
    fn get(&mut self, point: &FpldPoint) -> Result<Vec<FpldSeedResult>> {
        if let Some(hit) = self.done.get(&point.key()) {
            return Ok(hit.clone());
        }
        let fresh = run_fpld_point(point, self.spec.seeds, self.spec.master_seed, self.spec.experiment)?;
        self.done.insert(point.key(), fresh.clone());
        Ok(fresh)
    }
}

pub fn run_e1(spec: &ExperimentSpec) -> Result<Vec<Sweep>> {
    let c = &spec.e1;
    let base = c.point();
    let axes: [(&str, Vec<FpldPoint>, Vec<f64>); 5] = [
        (
            "k",
            c.sweep_k.iter().map(|&k| FpldPoint { k, ..base }).collect(),
            c.sweep_k.iter().map(|&v| v as f64).collect(),
        ),
        (
            "n",
            c.sweep_n.iter().map(|&n| FpldPoint { n, ..base }).collect(),
            c.sweep_n.iter().map(|&v| v as f64).collect(),
        ),
        (
            "m",
            c.sweep_m.iter().map(|&m| FpldPoint { m, ..base }).collect(),
            c.sweep_m.iter().map(|&v| v as f64).collect(),
        ),
        (
            "bits",
            c.sweep_bits.iter().map(|&bits| FpldPoint { bits, ..base }).collect(),
            c.sweep_bits.iter().map(|&v| v as f64).collect(),
        ),
        (
            "vocab",
            c.sweep_vocab.iter().map(|&vocab| FpldPoint { vocab, ..base }).collect(),
            c.sweep_vocab.iter().map(|&v| v as f64).collect(),
        ),
    ];
    let mut cache = FpldCache {
        spec,
        done: HashMap::new(),
    };
    let mut sweeps = Vec::new();
    for (axis, points, values) in axes {
        let mut out = Vec::new();
        for (point, axis_value) in points.iter().zip(values) {
            let results = cache.get(point)?;
            let metrics = fpld_metrics(&results);
            let bounds = training_bounds(point, c.delta, c.c1, c.c2, c.d_rule, 0.0)?;
            let checks = BTreeMap::from([("kl_le_theorem1".to_string(), metrics["kl"].mean <= bounds.t1_total)]);
            out.push(Point {
                axis_value,
                params: point.params(),
                bound_holds: checks.values().all(|&b| b),
                checks,
                metrics,
                bounds,
                ledger: results[0].ledger.clone(),
            });
        }
        sweeps.push(Sweep {
            name: axis.to_string(),
            axis: axis.to_string(),
            points: out,
        });
    }
    Ok(sweeps)
}

pub fn run_e1_5(spec: &ExperimentSpec) -> Result<Vec<Sweep>> {
    let c = &spec.e1_5;
    let mut cache = FpldCache {
        spec,
        done: HashMap::new(),
    };
    let mut sweeps = Vec::new();
    for &k in &c.sweep_k {
        let base = FpldPoint {
            k,
            n: c.n,
            m: c.m,
            bits: c.bits,
            vocab: c.vocab,
            clip: c.clip,
            beta: c.beta,
            rounds: c.rounds,
            mode: DitherMode::DitheredIid,
            drift: 0.0,
        };
        let homogeneous = cache.get(&base)?;
        let mut points = Vec::new();
        for &drift in &c.sweep_drift {
            let point = FpldPoint { drift, ..base };
            let results = cache.get(&point)?;
            let mut metrics = fpld_metrics(&results);
            metrics.insert(
                "homogeneous_kl".to_string(),
                Stat::from_values(homogeneous.iter().map(|r| r.kl).collect()),
            );
            metrics.insert(
                "additive_prediction".to_string(),
                Stat::from_values(homogeneous.iter().zip(&results).map(|(h, r)| h.kl + r.drift_term).collect()),
            );
            let bounds = training_bounds(&point, c.delta, c.c1, c.c2, c.d_rule, metrics["drift_term"].mean)?;
            let checks = BTreeMap::from([
                (
                    "kl_le_additive".to_string(),
                    metrics["kl"].mean <= metrics["additive_prediction"].mean,
                ),
                ("kl_le_theorem1".to_string(), metrics["kl"].mean <= bounds.t1_total),
            ]);
            points.push(Point {
                axis_value: drift,
                params: point.params(),
                bound_holds: checks.values().all(|&b| b),
                checks,
                metrics,
                bounds,
                ledger: results[0].ledger.clone(),
            });
        }
        sweeps.push(Sweep {
            name: format!("k={k}"),
            axis: "drift".to_string(),
            points,
        });
    }
    Ok(sweeps)
}

/// Everything about an E2 seed that does not depend on the swept budgets.
struct E2Seed {
    root: u64,
    models: Vec<LogitTable>,
    calibration: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
    f_max: f64,
}

fn e2_seed(c: &E2Config, root: u64, max_n_cal: usize) -> Result<E2Seed> {
    let gt: GroundTruth = generate_ground_truth(c.vocab, seed::derive(root, &[role::GROUND_TRUTH]))?;
    let models: Vec<LogitTable> = (0..c.k)
        .map(|i| {
            let node = if c.drift == 0.0 {
                homogeneous_node(&gt)
            } else {
                perturb_node(&gt, c.drift, seed::derive(root, &[role::DRIFT, i as u64]))?
            };
            Ok(node.logits().normalized())
        })
        .collect::<Result<_>>()?;
    let sampler = PairSampler::new(gt.logits(), gt.context_marginal())?;
    let draw = |role: u64, n: usize| {
        let mut rng = seed::rng(seed::derive(root, &[role]));
        (0..n).map(|_| sampler.sample_pair(&mut rng)).collect::<Vec<_>>()
    };
    let calibration = draw(role::CALIBRATION, max_n_cal);
    let test = draw(role::TEST, c.n_test);

    // Density of the unquantized swarm score over the whole score range.
    let oracle = Swarm::new(models.clone(), &vec![32; c.k], c.s_max, 0)?;
    let oracle_scores: Vec<f64> = draw(role::FMAX, c.fmax_samples)
        .into_iter()
        .map(|(x, y)| oracle.oracle_score(x, y))
        .collect();
    let f_max = estimate_fmax(&oracle_scores, c.s_max / 2.0, c.s_max / 2.0)?.f_max;
    Ok(E2Seed {
        root,
        models,
        calibration,
        test,
        f_max,
    })
}

struct E2SeedResult {
    coverage: f64,
    set_size: f64,
    q_hat: f64,
    f_max: f64,
    calibration_scoring_bits: f64,
    ledger: LedgerSnapshot,
}

fn e2_point(c: &E2Config, s: &E2Seed, n_cal: usize, score_bits: u8, grid_bits: u8) -> Result<E2SeedResult> {
    let bits = vec![score_bits; c.k];
    let cal_swarm = Swarm::new(s.models.clone(), &bits, c.s_max, seed::derive(s.root, &[role::CALIBRATION]))?;
    let scores: Vec<f64> = s.calibration[..n_cal]
        .iter()
        .enumerate()
        .map(|(j, &(x, y))| Ok(cal_swarm.swarm_scores(j, x)?[y]))
        .collect::<Result<_>>()?;
    let per_node: Vec<Vec<f64>> = (0..c.k)
        .map(|i| scores[i * n_cal / c.k..(i + 1) * n_cal / c.k].to_vec())
        .collect();
    let summary_bus: Bus<CalibrationSummary> = Bus::new(c.k);
    let (q, _) = federated_calibration(&per_node, grid_bits, c.alpha, c.s_max, &summary_bus)?;

    let test_swarm = Swarm::new(s.models.clone(), &bits, c.s_max, seed::derive(s.root, &[role::TEST]))?;
    let report = evaluate_coverage(&test_swarm, &q, &s.test)?;

    let test_ledger = test_swarm.bus().ledger().snapshot();
    let cal_ledger = summary_bus.ledger().snapshot();
    let ledger = LedgerSnapshot {
        training_payload_bits: 0,
        inference_payload_bits: test_ledger.inference_payload_bits,
        calibration_payload_bits: cal_ledger.calibration_payload_bits,
        header_bits: test_ledger.header_bits + cal_ledger.header_bits,
        messages: test_ledger.messages + cal_ledger.messages,
        per_node_payload_bits: test_ledger
            .per_node_payload_bits
            .iter()
            .zip(cal_ledger.per_node_payload_bits.iter().chain(std::iter::repeat(&0)))
            .map(|(a, b)| a + b)
            .collect(),
    };
    Ok(E2SeedResult {
        coverage: report.coverage,
        set_size: report.mean_set_size,
        q_hat: q.q_hat,
        f_max: s.f_max,
        calibration_scoring_bits: cal_swarm.bus().ledger().total(Channel::Inference) as f64,
        ledger,
    })
}

pub fn run_e2(spec: &ExperimentSpec) -> Result<Vec<Sweep>> {
    let c = &spec.e2;
    let max_n_cal = c.sweep_n_cal.iter().copied().chain([c.n_cal]).max().expect("nonempty");
    let seeds: Vec<E2Seed> = (0..spec.seeds)
        .into_par_iter()
        .map(|s| e2_seed(c, seed_root(spec.master_seed, ExperimentId::E2, s), max_n_cal))
        .collect::<Result<_>>()?;
    let f_max = seeds.iter().map(|s| s.f_max).fold(0.0, f64::max);

    type Triple = (usize, u8, u8);
    let axes: [(&str, Vec<Triple>, Vec<f64>); 3] = [
        (
            "n_cal",
            c.sweep_n_cal.iter().map(|&n| (n, c.score_bits, c.grid_bits)).collect(),
            c.sweep_n_cal.iter().map(|&v| v as f64).collect(),
        ),
        (
            "grid_bits",
            c.sweep_grid_bits.iter().map(|&b| (c.n_cal, c.score_bits, b)).collect(),
            c.sweep_grid_bits.iter().map(|&v| v as f64).collect(),
        ),
        (
            "score_bits",
            c.sweep_score_bits.iter().map(|&b| (c.n_cal, b, c.grid_bits)).collect(),
            c.sweep_score_bits.iter().map(|&v| v as f64).collect(),
        ),
    ];
    let mut done: HashMap<Triple, Point> = HashMap::new();
    let mut sweeps = Vec::new();
    for (axis, triples, values) in axes {
        let mut points = Vec::new();
        for (&(n_cal, score_bits, grid_bits), axis_value) in triples.iter().zip(values) {
            if let Some(hit) = done.get(&(n_cal, score_bits, grid_bits)) {
                points.push(Point {
                    axis_value,
                    ..hit.clone()
                });
                continue;
            }
            let results: Vec<E2SeedResult> = seeds
                .par_iter()
                .map(|s| e2_point(c, s, n_cal, score_bits, grid_bits))
                .collect::<Result<_>>()?;
            let stat = |f: fn(&E2SeedResult) -> f64| Stat::from_values(results.iter().map(f).collect());
            let metrics = BTreeMap::from([
                ("coverage".to_string(), stat(|r| r.coverage)),
                ("set_size".to_string(), stat(|r| r.set_size)),
                ("q_hat".to_string(), stat(|r| r.q_hat)),
                ("f_max".to_string(), stat(|r| r.f_max)),
                ("calibration_scoring_bits".to_string(), stat(|r| r.calibration_scoring_bits)),
            ]);
            let bounds = BoundReport::evaluate(&BoundParams {
                k: c.k as u64,
                vocab: c.vocab as u64,
                alpha: c.alpha,
                n_cal: n_cal as u64,
                score_bits: vec![score_bits as u32; c.k],
                grid_bits: grid_bits as u32,
                s_max: c.s_max,
                f_max,
                delta: c.delta,
                c_quantile: c.c_quantile,
                ..BoundParams::default()
            })?;
            let checks = BTreeMap::from([
                ("coverage_ge_lb".to_string(), metrics["coverage"].mean >= bounds.coverage_lb),
                ("set_size_le_ub".to_string(), metrics["set_size"].mean <= bounds.setsize_ub),
            ]);
            let mut params = BTreeMap::from([
                ("n_cal".to_string(), n_cal as f64),
                ("score_bits".to_string(), score_bits as f64),
                ("grid_bits".to_string(), grid_bits as f64),
                ("k".to_string(), c.k as f64),
                ("vocab".to_string(), c.vocab as f64),
                ("alpha".to_string(), c.alpha),
                ("n_test".to_string(), c.n_test as f64),
                ("drift".to_string(), c.drift),
                ("s_max".to_string(), c.s_max),
            ]);
            params.insert("f_max".to_string(), f_max);
            let point = Point {
                axis_value,
                params,
                bound_holds: checks.values().all(|&b| b),
                checks,
                metrics,
                bounds,
                ledger: results[0].ledger.clone(),
            };
            done.insert((n_cal, score_bits, grid_bits), point.clone());
            points.push(point);
        }
        sweeps.push(Sweep {
            name: axis.to_string(),
            axis: axis.to_string(),
            points,
        });
    }
    Ok(sweeps)
}

/// Empirical moments of dithered quantization error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMoments {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub third_moment: f64,
    pub third_moment_se: f64,
    pub cross_corr: f64,
}

/// Quantize `draws / 2` two-coordinate vectors with inputs drawn uniformly
/// from the non-overloaded range and collect error moments.
pub fn error_moments(cfg: &QuantizerConfig, draws: usize, master: u64, equal_coords: bool) -> Result<ErrorMoments> {
    let pairs = draws / 2;
    let half = cfg.step() / 2.0;
    let range = cfg.clip() - half;
    let mut rng = seed::rng(seed::derive(master, &[role::INPUT]));
    let mut errs = [Vec::with_capacity(pairs), Vec::with_capacity(pairs)];
    for j in 0..pairs {
        let a = rng.gen_range(-range..range);
        let b = if equal_coords { a } else { rng.gen_range(-range..range) };
        let p = quantize(&[a, b], cfg, seed::derive(master, &[role::DITHER, j as u64]))?;
        let back = dequantize(&p)?;
        errs[0].push(back[0] - a);
        errs[1].push(back[1] - b);
    }
    let all: Vec<f64> = errs[0].iter().chain(&errs[1]).copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let variance = all.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let third_moment = all.iter().map(|e| e.powi(3)).sum::<f64>() / n;
    let sixth = all.iter().map(|e| e.powi(6)).sum::<f64>() / n;
    let third_moment_se = ((sixth - third_moment * third_moment) / n).sqrt();
    let (m0, m1) = (
        errs[0].iter().sum::<f64>() / pairs as f64,
        errs[1].iter().sum::<f64>() / pairs as f64,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in errs[0].iter().zip(&errs[1]) {
        sxy += (x - m0) * (y - m1);
        sxx += (x - m0).powi(2);
        syy += (y - m1).powi(2);
    }
    Ok(ErrorMoments {
        samples: all.len(),
        mean,
        variance,
        third_moment,
        third_moment_se,
        cross_corr: sxy / (sxx * syy).sqrt(),
    })
}

fn check(name: impl Into<String>, value: f64, threshold: f64, pass: bool, detail: impl Into<String>) -> CheckRecord {
    CheckRecord {
        name: name.into(),
        value,
        threshold,
        pass,
        detail: detail.into(),
    }
}

pub fn run_quant_check(spec: &ExperimentSpec) -> Result<(Vec<Sweep>, Vec<CheckRecord>)> {
    let c = &spec.quant_check;
    let root = seed_root(spec.master_seed, ExperimentId::QuantCheck, 0);
    let iid = QuantizerConfig::new(c.bits, c.clip, DitherMode::DitheredIid)?;
    let m = error_moments(&iid, c.draws, root, false)?;
    let target = iid.dithered_variance();
    let sigma = m.variance.sqrt();
    let mut checks = vec![
        check(
            "error_mean",
            m.mean.abs(),
            4.0 * sigma / (m.samples as f64).sqrt(),
            m.mean.abs() < 4.0 * sigma / (m.samples as f64).sqrt(),
            "|mean| < 4σ/√N",
        ),
        check(
            "error_variance_ratio",
            m.variance / target,
            1.05,
            (0.95..=1.05).contains(&(m.variance / target)),
            "variance / (Δ²/12) in [0.95, 1.05]",
        ),
        check(
            "error_cross_corr",
            m.cross_corr.abs(),
            0.01,
            m.cross_corr.abs() < 0.01,
            "|corr(e_0, e_1)| < 0.01",
        ),
        check(
            "error_third_moment",
            m.third_moment.abs(),
            4.0 * m.third_moment_se,
            m.third_moment.abs() < 4.0 * m.third_moment_se,
            "|E e³| within 4 standard errors",
        ),
    ];
    let shared = QuantizerConfig::new(c.bits, c.clip, DitherMode::DitheredShared)?;
    let ms = error_moments(&shared, c.draws.min(100_000), root, true)?;
    checks.push(check(
        "shared_dither_corr",
        ms.cross_corr,
        0.99,
        ms.cross_corr > 0.99,
        "equal coordinates under one shared dither draw",
    ));

    let mut sweeps = Vec::new();
    let mut means: BTreeMap<(usize, u8, bool), f64> = BTreeMap::new();
    for mode in [DitherMode::DitheredIid, DitherMode::DitheredShared] {
        for &bits in &c.sweep_bits {
            let mut points = Vec::new();
            for &k in &c.sweep_k {
                let point = FpldPoint {
                    k,
                    n: c.n,
                    m: c.m,
                    bits,
                    vocab: c.vocab,
                    clip: c.clip,
                    beta: c.beta,
                    rounds: 1,
                    mode,
                    drift: 0.0,
                };
                let results = run_fpld_point(&point, c.bandwidth_seeds, spec.master_seed, ExperimentId::QuantCheck)?;
                let metrics = fpld_metrics(&results);
                let bounds = training_bounds(&point, 0.05, 1.0, 1.0, DimensionRule::VTimesVMinusOne, 0.0)?;
                let measured = metrics["quantization_kl"].mean;
                let is_shared = mode == DitherMode::DitheredShared;
                let limit = c.tolerance * if is_shared { bounds.t1_quant_alt_a } else { bounds.t1_quant };
                let name = if is_shared { "quant_kl_le_alt_a" } else { "quant_kl_le_c3_term" };
                means.insert((k, bits, is_shared), measured);
                checks.push(check(
                    format!("{}_{name}_k{k}_b{bits}", mode_name(mode)),
                    measured,
                    limit,
                    measured <= limit,
                    format!("mean over {} seeds", c.bandwidth_seeds),
                ));
                let point_checks = BTreeMap::from([(name.to_string(), measured <= limit)]);
                points.push(Point {
                    axis_value: k as f64,
                    params: point.params(),
                    bound_holds: measured <= limit,
                    checks: point_checks,
                    metrics,
                    bounds,
                    ledger: results[0].ledger.clone(),
                });
            }
            sweeps.push(Sweep {
                name: format!("{}/bits={bits}", mode_name(mode)),
                axis: "k".to_string(),
                points,
            });
        }
    }
    for &bits in &c.sweep_bits {
        for &k in &c.sweep_k {
            let iid = means[&(k, bits, false)];
            let shared = means[&(k, bits, true)];
            checks.push(check(
                format!("iid_le_shared_k{k}_b{bits}"),
                iid,
                shared,
                iid <= shared,
                "dithered_iid quantization KL at most dithered_shared",
            ));
        }
    }
    Ok((sweeps, checks))
}

fn mode_name(mode: DitherMode) -> &'static str {
    match mode {
        DitherMode::DitheredIid => "dithered_iid",
        DitherMode::DitheredShared => "dithered_shared",
        DitherMode::RoundNearest => "round_nearest",
    }
}

/// Parse and check an experiment JSON document.
pub fn validate_json(text: &str) -> Result<ExperimentResult> {
    let result: ExperimentResult =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    validate_result(&result)?;
    Ok(result)
}

pub fn validate_result(r: &ExperimentResult) -> Result<()> {
    let fail = |msg: String| Err(Error::Schema(msg));
    if r.schema_version != SCHEMA_VERSION {
        return fail(format!(
            "schema version {} is not the supported {SCHEMA_VERSION}",
            r.schema_version
        ));
    }
    if r.experiment != r.spec.experiment || r.seeds != r.spec.seeds || r.master_seed != r.spec.master_seed {
        return fail("header disagrees with the embedded spec".into());
    }
    if r.config_hash != r.spec.config_hash() {
        return fail("config hash does not match the embedded spec".into());
    }
    if r.sweeps.is_empty() {
        return fail("no sweeps".into());
    }
    for sweep in &r.sweeps {
        if sweep.points.is_empty() {
            return fail(format!("sweep {} has no points", sweep.name));
        }
        for p in &sweep.points {
            if p.bound_holds != p.checks.values().all(|&b| b) {
                return fail(format!("sweep {}: bound_holds disagrees with checks", sweep.name));
            }
            for (name, stat) in &p.metrics {
                let expected_len = match r.experiment {
                    ExperimentId::QuantCheck => r.spec.quant_check.bandwidth_seeds,
                    _ => r.seeds,
                };
                if stat.per_seed.len() != expected_len {
                    return fail(format!("metric {name} has {} seeds", stat.per_seed.len()));
                }
                let recomputed = Stat::from_values(stat.per_seed.clone());
                let close = |a: f64, b: f64| (a == b) || (a - b).abs() <= 1e-9 * a.abs().max(1.0);
                if !close(recomputed.mean, stat.mean) || !close(recomputed.std, stat.std) {
                    return fail(format!("metric {name}: summary does not match per-seed values"));
                }
            }
        }
    }
    Ok(())
}
