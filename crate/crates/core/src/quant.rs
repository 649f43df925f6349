//! Subtractively dithered uniform scalar quantization and its bit-packed
//! wire format.
//!
//! A `b`-bit quantizer over `[-clip, clip]` splits the interval into `2^b`
//! cells of width `Δ = 2·clip / 2^b` and reconstructs at cell centers. With
//! dither `u ~ Unif[-Δ/2, Δ/2)` the sender transmits the cell of `x + u` and
//! the receiver, regenerating `u` from the shared dither seed, outputs
//! `center − u`. For inputs inside `[-clip + Δ/2, clip − Δ/2]` the error is
//! then exactly uniform on `[-Δ/2, Δ/2)`, independent of the input, with
//! variance `Δ²/12 = (clip²/3)·2^{-2b}`.
//!
//! Wire format (big-endian, MSB-first bit order):
//!
//! | field         | bits                  |
//! |---------------|-----------------------|
//! | `config_id`   | 16                    |
//! | `num_coords`  | 32                    |
//! | `dither_seed` | 64                    |
//! | codes         | `num_coords × bits`, zero-padded to a byte boundary |
//!
//! `config_id` carries the dither mode in its high byte and the bit depth in
//! its low byte. The clip range is protocol-level common knowledge and is
//! supplied to the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;

/// Header size in bits: `config_id` + `num_coords` + `dither_seed`.
pub const HEADER_BITS: u64 = 16 + 32 + 64;
const HEADER_BYTES: usize = (HEADER_BITS / 8) as usize;

pub const MAX_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DitherMode {
    /// Fresh dither per coordinate.
    DitheredIid,
    /// One dither draw reused by every coordinate of a vector.
    DitheredShared,
    /// Plain rounding to the nearest cell center.
    RoundNearest,
}

impl DitherMode {
    fn tag(self) -> u8 {
        match self {
            DitherMode::DitheredIid => 0,
            DitherMode::DitheredShared => 1,
            DitherMode::RoundNearest => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DitherMode::DitheredIid),
            1 => Some(DitherMode::DitheredShared),
            2 => Some(DitherMode::RoundNearest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    bits_per_coord: u8,
    clip: f64,
    mode: DitherMode,
}

impl QuantizerConfig {
    pub fn new(bits_per_coord: u8, clip: f64, mode: DitherMode) -> Result<Self> {
        if bits_per_coord == 0 || bits_per_coord > MAX_BITS {
            return Err(invalid(format!(
                "bits per coordinate must be in 1..={MAX_BITS}, got {bits_per_coord}"
            )));
        }
        if !(clip > 0.0) || !clip.is_finite() {
            return Err(invalid(format!("clip must be positive and finite, got {clip}")));
        }
        Ok(Self {
            bits_per_coord,
            clip,
            mode,
        })
    }

    pub fn bits_per_coord(&self) -> u8 {
        self.bits_per_coord
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn mode(&self) -> DitherMode {
        self.mode
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits_per_coord
    }

    /// Cell width `Δ = 2·clip / 2^bits`.
    pub fn step(&self) -> f64 {
        2.0 * self.clip / self.levels() as f64
    }

    /// Per-coordinate error variance of the dithered quantizer, `Δ²/12`.
    pub fn dithered_variance(&self) -> f64 {
        self.step().powi(2) / 12.0
    }

    pub fn id(&self) -> u16 {
        ((self.mode.tag() as u16) << 8) | self.bits_per_coord as u16
    }

    pub fn from_id(id: u16, clip: f64) -> Result<Self> {
        let mode = DitherMode::from_tag((id >> 8) as u8)
            .ok_or_else(|| Error::Decode(format!("unknown dither mode in config id {id:#06x}")))?;
        Self::new((id & 0xff) as u8, clip, mode).map_err(|e| Error::Decode(e.to_string()))
    }

    /// Cell center for `code`.
    #[inline]
    pub fn center(&self, code: u32) -> f64 {
        (code as f64 + 0.5) * self.step() - self.clip
    }
}

/// Regenerates the dither sequence for one vector from its seed.
struct Dither {
    mode: DitherMode,
    half_step: f64,
    shared: f64,
    rng: rand_chacha::ChaCha8Rng,
}

impl Dither {
    fn new(cfg: &QuantizerConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let half_step = cfg.step() / 2.0;
        let shared = match cfg.mode {
            DitherMode::DitheredShared => (2.0 * rng.gen::<f64>() - 1.0) * half_step,
            _ => 0.0,
        };
        Self {
            mode: cfg.mode,
            half_step,
            shared,
            rng,
        }
    }

    #[inline]
    fn next(&mut self) -> f64 {
        match self.mode {
            DitherMode::DitheredIid => (2.0 * self.rng.gen::<f64>() - 1.0) * self.half_step,
            DitherMode::DitheredShared => self.shared,
            DitherMode::RoundNearest => 0.0,
        }
    }
}

/// Quantized vector as it crosses the uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    config: QuantizerConfig,
    num_coords: u32,
    dither_seed: u64,
    codes: Vec<u8>,
    saturated: u32,
}

impl QuantizedPayload {
    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn num_coords(&self) -> usize {
        self.num_coords as usize
    }

    pub fn dither_seed(&self) -> u64 {
        self.dither_seed
    }

    /// Packed code bytes (no header).
    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    /// Coordinates that were clipped or whose code was clamped at encode
    /// time. Sender-side diagnostic; not part of the wire format.
    pub fn saturated(&self) -> u32 {
        self.saturated
    }

    /// Budgeted payload size, `num_coords × bits_per_coord`.
    pub fn payload_bits(&self) -> u64 {
        self.num_coords as u64 * self.config.bits_per_coord as u64
    }

    pub fn header_bits(&self) -> u64 {
        HEADER_BITS
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.codes.len());
        out.extend_from_slice(&self.config.id().to_be_bytes());
        out.extend_from_slice(&self.num_coords.to_be_bytes());
        out.extend_from_slice(&self.dither_seed.to_be_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8], clip: f64) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Decode(format!(
                "payload of {} bytes is shorter than its header",
                bytes.len()
            )));
        }
        let id = u16::from_be_bytes([bytes[0], bytes[1]]);
        let num_coords = u32::from_be_bytes(bytes[2..6].try_into().unwrap());
        let dither_seed = u64::from_be_bytes(bytes[6..14].try_into().unwrap());
        let config = QuantizerConfig::from_id(id, clip)?;
        let codes = bytes[HEADER_BYTES..].to_vec();
        let expected = packed_len(num_coords as usize, config.bits_per_coord);
        if codes.len() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} code bytes for {num_coords} coordinates, found {}",
                codes.len()
            )));
        }
        Ok(Self {
            config,
            num_coords,
            dither_seed,
            codes,
            saturated: 0,
        })
    }
}

pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// MSB-first bit writer for fixed-width codes.
struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
    bits: u32,
}

impl BitWriter {
    fn new(n: usize, bits: u8) -> Self {
        Self {
            out: Vec::with_capacity(packed_len(n, bits)),
            acc: 0,
            filled: 0,
            bits: bits as u32,
        }
    }

    #[inline]
    fn push(&mut self, code: u32) {
        self.acc = (self.acc << self.bits) | code as u64;
        self.filled += self.bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
        self.out
    }
}

/// Reader matching [`BitWriter`]; the caller checks the length up front.
struct BitReader<'a> {
    bytes: std::slice::Iter<'a, u8>,
    acc: u64,
    filled: u32,
    bits: u32,
    mask: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], bits: u8) -> Self {
        Self {
            bytes: bytes.iter(),
            acc: 0,
            filled: 0,
            bits: bits as u32,
            mask: (1u64 << bits) - 1,
        }
    }

    #[inline]
    fn next_code(&mut self) -> u32 {
        while self.filled < self.bits {
            self.acc = (self.acc << 8) | *self.bytes.next().expect("length checked") as u64;
            self.filled += 8;
        }
        self.filled -= self.bits;
        let code = ((self.acc >> self.filled) & self.mask) as u32;
        self.acc &= (1u64 << self.filled) - 1;
        code
    }
}

fn check_width(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(invalid(format!("bit width must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

/// Pack `bits`-wide codes MSB-first into bytes.
pub fn pack_bits(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    check_width(bits)?;
    let limit = 1u64 << bits;
    let mut w = BitWriter::new(codes.len(), bits);
    for &code in codes {
        if code as u64 >= limit {
            return Err(invalid(format!("code {code} does not fit in {bits} bits")));
        }
        w.push(code);
    }
    Ok(w.finish())
}

/// Inverse of [`pack_bits`]: read `n` codes of width `bits`.
pub fn unpack_bits(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u32>> {
    check_width(bits)?;
    if bytes.len() < packed_len(n, bits) {
        return Err(Error::Decode(format!(
            "{} bytes cannot hold {n} codes of {bits} bits",
            bytes.len()
        )));
    }
    let mut r = BitReader::new(bytes, bits);
    Ok((0..n).map(|_| r.next_code()).collect())
}

/// Quantize `v` under `cfg`; `seed` keys the dither stream.
pub fn quantize(v: &[f64], cfg: &QuantizerConfig, seed: u64) -> Result<QuantizedPayload> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(invalid("cannot quantize a NaN coordinate"));
    }
    let num_coords = u32::try_from(v.len()).map_err(|_| invalid("vector too long for the wire format"))?;
    let step = cfg.step();
    let top = (cfg.levels() - 1) as i64;
    let mut dither = Dither::new(cfg, seed);
    let mut saturated = 0u32;
    let mut w = BitWriter::new(v.len(), cfg.bits_per_coord);
    for &x in v {
        let clipped = x.clamp(-cfg.clip, cfg.clip);
        let t = (clipped + dither.next() + cfg.clip) / step;
        // Truncation plus correction is floor without a libm call.
        let mut cell = t as i64;
        cell -= ((cell as f64) > t) as i64;
        let code = cell.clamp(0, top);
        saturated += (clipped != x || code != cell) as u32;
        w.push(code as u32);
    }
    Ok(QuantizedPayload {
        config: *cfg,
        num_coords,
        dither_seed: seed,
        codes: w.finish(),
        saturated,
    })
}

fn decode_into(p: &QuantizedPayload, mut sink: impl FnMut(usize, f64)) -> Result<()> {
    let n = p.num_coords();
    if p.codes.len() != packed_len(n, p.config.bits_per_coord) {
        return Err(Error::Decode("payload length does not match its header".into()));
    }
    let mut r = BitReader::new(&p.codes, p.config.bits_per_coord);
    let mut dither = Dither::new(&p.config, p.dither_seed);
    for j in 0..n {
        sink(j, p.config.center(r.next_code()) - dither.next());
    }
    Ok(())
}

/// Receiver side: unpack, regenerate the dither and subtract it.
pub fn dequantize(p: &QuantizedPayload) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.num_coords()];
    decode_into(p, |j, x| out[j] = x)?;
    Ok(out)
}

/// Add the dequantized vector of `p` into `acc` without allocating.
pub fn dequantize_accumulate(p: &QuantizedPayload, acc: &mut [f64]) -> Result<()> {
    if p.num_coords() != acc.len() {
        return Err(Error::Protocol(format!(
            "payload has {} coordinates, accumulator {}",
            p.num_coords(),
            acc.len()
        )));
    }
    decode_into(p, |j, x| acc[j] += x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(bits: u8, clip: f64, mode: DitherMode) -> QuantizerConfig {
        QuantizerConfig::new(bits, clip, mode).unwrap()
    }

    #[test]
    fn rejects_bad_configs_and_nan() {
        assert!(QuantizerConfig::new(0, 1.0, DitherMode::DitheredIid).is_err());
        assert!(QuantizerConfig::new(33, 1.0, DitherMode::DitheredIid).is_err());
        assert!(QuantizerConfig::new(8, 0.0, DitherMode::DitheredIid).is_err());
        let c = cfg(8, 20.0, DitherMode::DitheredIid);
        assert!(quantize(&[0.0, f64::NAN], &c, 1).is_err());
    }

    #[test]
    fn grid_points_round_trip_exactly() {
        // clip 2, 2 bits: Δ = 1, centers at ±0.5, ±1.5.
        let c = cfg(2, 2.0, DitherMode::RoundNearest);
        let v = [-1.5, -0.5, 0.5, 1.5];
        let back = dequantize(&quantize(&v, &c, 0).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn e1_step_is_one_over_128() {
        let c = cfg(8, 20.0, DitherMode::DitheredIid);
        assert_eq!(c.step() / 2.0, 0.078125);
        let v: Vec<f64> = (0..256).map(|i| -19.0 + 38.0 * i as f64 / 255.0).collect();
        let back = dequantize(&quantize(&v, &c, 5).unwrap()).unwrap();
        for (x, y) in v.iter().zip(back) {
            assert!((x - y).abs() <= 0.078125);
        }
    }

    #[test]
    fn zero_vector_error_is_bounded() {
        for mode in [DitherMode::DitheredIid, DitherMode::DitheredShared] {
            let c = cfg(3, 1.0, mode);
            let back = dequantize(&quantize(&[0.0; 64], &c, 9).unwrap()).unwrap();
            assert!(back.iter().all(|x| x.abs() <= c.step() / 2.0));
        }
    }

    #[test]
    fn shared_dither_errors_move_together() {
        // Two coordinates holding the same value see the same dither and
        // therefore identical errors: correlation exactly one.
        let c = cfg(4, 5.0, DitherMode::DitheredShared);
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let n = 20_000;
        for s in 0..n {
            let x = [0.37, 0.37];
            let back = dequantize(&quantize(&x, &c, s).unwrap()).unwrap();
            let (a, b) = (back[0] - x[0], back[1] - x[1]);
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        let n = n as f64;
        let cov = sab / n - sa * sb / n / n;
        let corr = cov / ((saa / n - (sa / n).powi(2)) * (sbb / n - (sb / n).powi(2))).sqrt();
        assert_abs_diff_eq!(corr, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn small_monte_carlo_moments() {
        let c = cfg(8, 20.0, DitherMode::DitheredIid);
        let x = vec![1.234; 1000];
        let (mut s1, mut s2) = (0.0, 0.0);
        for seed in 0..100 {
            let back = dequantize(&quantize(&x, &c, seed).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&x) {
                let e = a - b;
                s1 += e;
                s2 += e * e;
            }
        }
        let n = 100_000.0;
        let var = s2 / n - (s1 / n).powi(2);
        let sigma = c.dithered_variance().sqrt();
        assert!((s1 / n).abs() < 4.0 * sigma / n.sqrt());
        assert!((var / c.dithered_variance() - 1.0).abs() < 0.05);
    }

    #[test]
    fn saturation_is_counted() {
        let c = cfg(4, 1.0, DitherMode::RoundNearest);
        let p = quantize(&[5.0, -5.0, 0.1], &c, 0).unwrap();
        assert_eq!(p.saturated(), 2);
        let back = dequantize(&p).unwrap();
        assert_abs_diff_eq!(back[0], 1.0 - c.step() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn packed_sizes() {
        assert_eq!(pack_bits(&[3], 2).unwrap().len(), 1);
        assert_eq!(unpack_bits(&pack_bits(&[3], 2).unwrap(), 2, 1).unwrap(), vec![3]);
        let codes: Vec<u32> = (0..256).collect();
        assert_eq!(pack_bits(&codes, 8).unwrap().len(), 256);
        assert!(pack_bits(&[4], 2).is_err());
    }

    #[test]
    fn wire_format_round_trip_and_corruption() {
        let c = cfg(5, 3.0, DitherMode::DitheredIid);
        let p = quantize(&[0.1, -2.0, 2.9, 0.0, 1.0], &c, 77).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 14 + 4);
        // Header layout: config id, coordinate count, dither seed.
        assert_eq!(&bytes[0..2], &[0x00, 0x05]);
        assert_eq!(&bytes[2..6], &[0, 0, 0, 5]);
        assert_eq!(&bytes[6..14], &77u64.to_be_bytes());
        let decoded = QuantizedPayload::from_bytes(&bytes, 3.0).unwrap();
        assert_eq!(dequantize(&decoded).unwrap(), dequantize(&p).unwrap());
        assert!(QuantizedPayload::from_bytes(&bytes[..bytes.len() - 1], 3.0).is_err());
        assert!(QuantizedPayload::from_bytes(&bytes[..10], 3.0).is_err());
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(QuantizedPayload::from_bytes(&bad, 3.0).is_err());
    }

    #[test]
    fn payload_bits_exclude_header() {
        let c = cfg(8, 20.0, DitherMode::DitheredIid);
        let p = quantize(&[0.0; 256], &c, 1).unwrap();
        assert_eq!(p.payload_bits(), 256 * 8);
        assert_eq!(p.header_bits(), 112);
        let empty = quantize(&[], &c, 1).unwrap();
        assert_eq!(empty.payload_bits(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn pack_unpack_round_trip(bits in 1u8..=32, raw in proptest::collection::vec(any::<u32>(), 0..40)) {
            let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
            let codes: Vec<u32> = raw.iter().map(|c| c & mask).collect();
            let packed = pack_bits(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_bits(&packed, bits, codes.len()).unwrap(), codes);
        }
    }

    proptest! {
        #[test]
        fn interior_error_is_at_most_half_step(
            bits in 1u8..=16,
            clip in 0.5f64..50.0,
            frac in proptest::collection::vec(-1.0f64..=1.0, 1..64),
            seed in any::<u64>(),
            mode in prop_oneof![Just(DitherMode::DitheredIid), Just(DitherMode::DitheredShared), Just(DitherMode::RoundNearest)],
        ) {
            let c = QuantizerConfig::new(bits, clip, mode).unwrap();
            // Dithered modes stay overload-free half a step inside the clip.
            let margin = if mode == DitherMode::RoundNearest { 0.0 } else { c.step() / 2.0 };
            let v: Vec<f64> = frac.iter().map(|f| f * (clip - margin)).collect();
            let back = dequantize(&quantize(&v, &c, seed).unwrap()).unwrap();
            for (x, y) in v.iter().zip(back) {
                prop_assert!((x - y).abs() <= c.step() / 2.0 * (1.0 + 1e-12));
            }
        }

        #[test]
        fn round_nearest_is_deterministic(x in -10.0f64..10.0, s1 in any::<u64>(), s2 in any::<u64>()) {
            let c = QuantizerConfig::new(6, 10.0, DitherMode::RoundNearest).unwrap();
            let a = dequantize(&quantize(&[x], &c, s1).unwrap()).unwrap();
            let b = dequantize(&quantize(&[x], &c, s2).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
