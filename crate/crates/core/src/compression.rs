//! Lossy compressors for uploaded blocks: top-k, rand-k and a QSGD-style
//! stochastic quantizer.
//!
//! Float accounting: a dense value or a sparse index each count as one
//! float-equivalent. Quantized payloads count the norm as one float plus the
//! packed sign/level bits rounded up to whole float words.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    None,
    TopK,
    RandK,
    Qsgd,
}

impl Scheme {
    pub fn tag(self) -> u8 {
        match self {
            Scheme::None => 0,
            Scheme::TopK => 1,
            Scheme::RandK => 2,
            Scheme::Qsgd => 3,
        }
    }
}

/// Width of one float-equivalent when converting packed bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatUnit {
    #[default]
    Bits64,
    Bits32,
}

impl FloatUnit {
    pub fn bits(self) -> u64 {
        match self {
            FloatUnit::Bits64 => 64,
            FloatUnit::Bits32 => 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressedPayload {
    Dense(Vec<f64>),
    Sparse {
        scheme: Scheme,
        dense_len: usize,
        /// Strictly increasing, `< dense_len`.
        indices: Vec<u32>,
        values: Vec<f64>,
    },
    Quantized {
        dense_len: usize,
        norm: f64,
        levels: u32,
        /// `sign(v_i) · ξ_i`; empty when `norm == 0`.
        signed_levels: Vec<i32>,
    },
}

impl CompressedPayload {
    pub fn scheme(&self) -> Scheme {
        match self {
            CompressedPayload::Dense(_) => Scheme::None,
            CompressedPayload::Sparse { scheme, .. } => *scheme,
            CompressedPayload::Quantized { .. } => Scheme::Qsgd,
        }
    }

    pub fn dense_len(&self) -> usize {
        match self {
            CompressedPayload::Dense(v) => v.len(),
            CompressedPayload::Sparse { dense_len, .. }
            | CompressedPayload::Quantized { dense_len, .. } => *dense_len,
        }
    }

    pub fn decode(&self) -> Vec<f64> {
        match self {
            CompressedPayload::Dense(v) => v.clone(),
            CompressedPayload::Sparse {
                dense_len,
                indices,
                values,
                ..
            } => {
                let mut out = vec![0.0; *dense_len];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
            CompressedPayload::Quantized {
                dense_len,
                norm,
                levels,
                signed_levels,
            } => {
                if signed_levels.is_empty() {
                    return vec![0.0; *dense_len];
                }
                let s = f64::from(*levels);
                signed_levels
                    .iter()
                    .map(|&l| norm * f64::from(l) / s)
                    .collect()
            }
        }
    }

    pub fn float_equivalent_count(&self, unit: FloatUnit) -> u64 {
        match self {
            CompressedPayload::Dense(v) => v.len() as u64,
            CompressedPayload::Sparse { indices, .. } => 2 * indices.len() as u64,
            CompressedPayload::Quantized {
                levels,
                signed_levels,
                ..
            } => {
                let bits = signed_levels.len() as u64 * (1 + level_bits(*levels));
                1 + bits.div_ceil(unit.bits())
            }
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            CompressedPayload::Dense(_) => Ok(()),
            CompressedPayload::Sparse {
                dense_len,
                indices,
                values,
                ..
            } => {
                if indices.len() != values.len() {
                    return Err(Error::MalformedPayload(
                        "sparse index/value counts differ".into(),
                    ));
                }
                let increasing = indices.windows(2).all(|w| w[0] < w[1]);
                let in_range = indices.last().is_none_or(|&i| (i as usize) < *dense_len);
                if !increasing || !in_range {
                    return Err(Error::MalformedPayload(
                        "sparse indices must be strictly increasing and in range".into(),
                    ));
                }
                Ok(())
            }
            CompressedPayload::Quantized {
                dense_len,
                levels,
                signed_levels,
                ..
            } => {
                if *levels == 0 {
                    return Err(Error::BadLevels(0));
                }
                if !signed_levels.is_empty() && signed_levels.len() != *dense_len {
                    return Err(Error::MalformedPayload("quantized length mismatch".into()));
                }
                if signed_levels.iter().any(|l| l.unsigned_abs() > *levels) {
                    return Err(Error::MalformedPayload("quantization level out of range".into()));
                }
                Ok(())
            }
        }
    }
}

/// Bits needed to store a level magnitude in `0..=s`.
fn level_bits(s: u32) -> u64 {
    u64::from(u32::BITS - s.leading_zeros())
}

fn check_k(k: usize, len: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::BadK { k, len });
    }
    Ok(())
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
pub fn topk_encode(v: &[f64], k: usize) -> Result<CompressedPayload> {
    check_k(k, v.len())?;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(CompressedPayload::Sparse {
        scheme: Scheme::TopK,
        dense_len: v.len(),
        indices: keep.iter().map(|&i| i as u32).collect(),
        values: keep.iter().map(|&i| v[i]).collect(),
    })
}

/// Keeps `k` uniformly chosen entries, scaled by `d/k` so the decode is unbiased.
pub fn randk_encode(v: &[f64], k: usize, seed: u64) -> Result<CompressedPayload> {
    check_k(k, v.len())?;
    let mut rng = rng_for(seed, &[]);
    let mut keep = index::sample(&mut rng, v.len(), k).into_vec();
    keep.sort_unstable();
    let scale = v.len() as f64 / k as f64;
    Ok(CompressedPayload::Sparse {
        scheme: Scheme::RandK,
        dense_len: v.len(),
        indices: keep.iter().map(|&i| i as u32).collect(),
        values: keep.iter().map(|&i| v[i] * scale).collect(),
    })
}

/// Stochastic uniform quantization onto `{0, ‖v‖/s, …, ‖v‖}` with randomized
/// rounding between adjacent levels.
pub fn qsgd_encode(v: &[f64], levels: u32, seed: u64) -> Result<CompressedPayload> {
    if levels == 0 {
        return Err(Error::BadLevels(levels));
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(CompressedPayload::Quantized {
            dense_len: v.len(),
            norm: 0.0,
            levels,
            signed_levels: Vec::new(),
        });
    }
    let s = f64::from(levels);
    let mut rng = rng_for(seed, &[]);
    let signed_levels = v
        .iter()
        .map(|&x| {
            let r = (x.abs() / norm * s).min(s);
            let lower = r.floor();
            let up = rng.random::<f64>() < r - lower;
            let level = lower as i32 + i32::from(up);
            if x < 0.0 {
                -level
            } else {
                level
            }
        })
        .collect();
    Ok(CompressedPayload::Quantized {
        dense_len: v.len(),
        norm,
        levels,
        signed_levels,
    })
}

pub fn qsgd_decode(p: &CompressedPayload) -> Vec<f64> {
    p.decode()
}

/// Compression settings applied to parameter-block deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressionConfig {
    None,
    TopK(KSelect),
    RandK(KSelect),
    Qsgd { levels: u32 },
}

/// How many coordinates a sparsifier keeps for a block of a given length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KSelect {
    Absolute(usize),
    /// `ceil(len · fraction)`, at least one.
    Fraction(f64),
}

impl KSelect {
    pub fn resolve(self, len: usize) -> usize {
        match self {
            KSelect::Absolute(k) => k.min(len).max(1),
            KSelect::Fraction(f) => ((len as f64 * f).ceil() as usize).clamp(1, len.max(1)),
        }
    }
}

impl CompressionConfig {
    pub fn encode(&self, v: &[f64], seed: u64) -> Result<CompressedPayload> {
        match *self {
            CompressionConfig::None => Ok(CompressedPayload::Dense(v.to_vec())),
            _ if v.is_empty() => Ok(CompressedPayload::Dense(Vec::new())),
            CompressionConfig::TopK(k) => topk_encode(v, k.resolve(v.len())),
            CompressionConfig::RandK(k) => randk_encode(v, k.resolve(v.len()), seed),
            CompressionConfig::Qsgd { levels } => qsgd_encode(v, levels, seed),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, CompressionConfig::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topk_examples() {
        let p = topk_encode(&[3.0, -5.0, 1.0], 1).unwrap();
        assert_eq!(p.decode(), vec![0.0, -5.0, 0.0]);
        let v = [0.5, -2.0, 7.0, 1.0];
        assert_eq!(topk_encode(&v, 4).unwrap().decode(), v.to_vec());
        // ties go to the lower index
        let p = topk_encode(&[1.0, -1.0, 1.0], 2).unwrap();
        assert_eq!(p.decode(), vec![1.0, -1.0, 0.0]);
        assert!(matches!(topk_encode(&v, 0), Err(Error::BadK { .. })));
        assert!(matches!(topk_encode(&v, 5), Err(Error::BadK { .. })));
    }

    #[test]
    fn randk_support_and_identity() {
        let v: Vec<f64> = (0..20).map(|i| i as f64 - 7.5).collect();
        for seed in 0..50 {
            let p = randk_encode(&v, 6, seed).unwrap();
            let nz = p.decode().iter().filter(|&&x| x != 0.0).count();
            assert_eq!(nz, 6);
            assert_eq!(p.float_equivalent_count(FloatUnit::Bits64), 12);
        }
        assert_eq!(randk_encode(&v, 20, 3).unwrap().decode(), v);
    }

    #[test]
    fn qsgd_zero_and_on_grid() {
        let p = qsgd_encode(&[0.0; 8], 4, 1).unwrap();
        assert_eq!(p.decode(), vec![0.0; 8]);
        assert_eq!(p.float_equivalent_count(FloatUnit::Bits64), 1);

        let v = [0.0, -3.5, 0.0];
        for s in [1, 2, 7, 16] {
            assert_eq!(qsgd_encode(&v, s, 9).unwrap().decode(), v.to_vec());
        }
        assert!(matches!(qsgd_encode(&v, 0, 1), Err(Error::BadLevels(0))));
    }

    #[test]
    fn qsgd_float_count_formula() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = qsgd_encode(&v, 16, 5).unwrap();
        // 100 coordinates × (1 sign + 5 level bits) = 600 bits
        assert_eq!(p.float_equivalent_count(FloatUnit::Bits64), 1 + 10);
        assert_eq!(p.float_equivalent_count(FloatUnit::Bits32), 1 + 19);
        assert_eq!(level_bits(1), 1);
        assert_eq!(level_bits(15), 4);
        assert_eq!(level_bits(16), 5);
    }

    proptest! {
        #[test]
        fn topk_is_idempotent_and_bounded(
            v in proptest::collection::vec(-100.0f64..100.0, 1..40),
            kf in 0.0f64..1.0,
        ) {
            let k = ((v.len() as f64 * kf) as usize).max(1);
            let p = topk_encode(&v, k).unwrap();
            let again = topk_encode(&p.decode(), k).unwrap();
            prop_assert_eq!(&again, &p);
            let err: f64 = p.decode().iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(err <= nv);
        }

        #[test]
        fn qsgd_decode_lies_on_grid(
            v in proptest::collection::vec(-10.0f64..10.0, 1..30),
            s in 1u32..32,
            seed in any::<u64>(),
        ) {
            let p = qsgd_encode(&v, s, seed).unwrap();
            p.validate().unwrap();
            if let CompressedPayload::Quantized { norm, signed_levels, .. } = &p {
                for (&l, &x) in signed_levels.iter().zip(&v) {
                    prop_assert!(l.unsigned_abs() <= s);
                    if l != 0 { prop_assert_eq!(l < 0, x < 0.0); }
                }
                let dec = p.decode();
                for (d, &l) in dec.iter().zip(signed_levels) {
                    prop_assert_eq!(*d, norm * f64::from(l) / f64::from(s));
                }
            }
        }
    }
}
