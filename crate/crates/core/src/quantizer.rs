//! Binary spherical quantization.
//!
//! A continuous token z in R^d is projected to the unit hypersphere and each
//! coordinate binarized to +-1/sqrt(d); the bit pattern doubles as the
//! codebook index, so the codebook (size 2^d) is never materialized. Training
//! passes gradients straight through the sign while keeping the analytic
//! Jacobian of the L2 normalization.

use crate::diffcore::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsqConfig {
    /// Bits per token; codebook size is 2^bits.
    pub bits: u32,
    /// Inverse temperature of the soft bit relaxation.
    pub tau: f64,
}

impl BsqConfig {
    pub fn new(bits: u32, tau: f64) -> Result<Self> {
        if !(1..=32).contains(&bits) {
            return Err(Error::Config(format!("bsq bits must be in [1, 32], got {}", bits)));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("bsq tau must be positive, got {}", tau)));
        }
        Ok(BsqConfig { bits, tau })
    }

    pub fn dim(&self) -> usize {
        self.bits as usize
    }

    pub fn codebook_size(&self) -> u64 {
        1u64 << self.bits
    }
}

/// Quantized token block: K hypersphere corners plus their integer indices.
#[derive(Clone, Debug)]
pub struct TokenCode<E> {
    /// [K, d] entries, each exactly +-1/sqrt(d).
    pub hard: Array<E>,
    /// K codebook indices in [0, 2^d).
    pub indices: Vec<u32>,
    /// [K, d] per-bit probabilities under the soft relaxation.
    pub soft_probs: Array<E>,
}

impl<E: Scalar> TokenCode<E> {
    pub fn k_tokens(&self) -> usize {
        self.indices.len()
    }
}

/// Forward mode of the quantizer inside a training graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    /// sign(z/|z|)/sqrt(d) forward, straight-through backward.
    Hard,
    /// Forward the normalized z itself (smooth surrogate used by gradient
    /// checks; shares the exact backward path of `Hard`).
    Bypass,
}

fn check_rows_nonzero<E: Scalar>(z: &Array<E>) -> Result<()> {
    let d = *z.shape().last().unwrap();
    for (i, row) in z.data().chunks(d).enumerate() {
        if row.iter().all(|&v| v == E::zero()) {
            return Err(Error::Degenerate(format!("token row {} is the zero vector", i)));
        }
    }
    Ok(())
}

/// Host-side quantization of a [K, d] (or [B, K, d]) block.
pub fn quantize<E: Scalar>(z: &Array<E>, cfg: &BsqConfig) -> Result<TokenCode<E>> {
    let d = cfg.dim();
    if *z.shape().last().unwrap() != d {
        return Err(Error::dim("quantize", format!("last axis {:?} vs d={}", z.shape(), d)));
    }
    check_rows_nonzero(z)?;
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let rows = z.numel() / d;
    let mut hard = vec![E::zero(); z.numel()];
    let mut soft = vec![E::zero(); z.numel()];
    let mut indices = Vec::with_capacity(rows);
    let tau_sqrt_d = E::from_f64(cfg.tau * (d as f64).sqrt());
    for (r, row) in z.data().chunks(d).enumerate() {
        let mut n2 = E::zero();
        for &v in row {
            n2 = n2 + v * v;
        }
        let inv = E::one() / n2.sqrt();
        let mut idx = 0u32;
        for (i, &v) in row.iter().enumerate() {
            let u = v * inv;
            // sign(0) := +1
            let bit_on = u >= E::zero();
            hard[r * d + i] = if bit_on { scale } else { -scale };
            if bit_on {
                idx |= 1 << i;
            }
            let a = tau_sqrt_d * u;
            soft[r * d + i] = E::one() / (E::one() + (-a).exp());
        }
        indices.push(idx);
    }
    Ok(TokenCode {
        hard: Array::from_vec(z.shape().to_vec(), hard),
        indices,
        soft_probs: Array::from_vec(z.shape().to_vec(), soft),
    })
}

/// In-graph quantization: returns (quantized tokens, soft bit probabilities).
pub fn quantize_vars<E: Scalar>(
    tape: &mut Tape<E>,
    z: Var,
    cfg: &BsqConfig,
    mode: QuantizeMode,
) -> Result<(Var, Var)> {
    let d = cfg.dim();
    let zshape = tape.value(z).shape().to_vec();
    if *zshape.last().unwrap() != d {
        return Err(Error::dim("quantize", format!("last axis {:?} vs d={}", zshape, d)));
    }
    let unit = tape.normalize_last(z);
    let hard = match mode {
        QuantizeMode::Hard => tape.ste_sign(unit, E::from_f64(1.0 / (d as f64).sqrt())),
        QuantizeMode::Bypass => unit,
    };
    let scaled = tape.mul_scalar(unit, E::from_f64(cfg.tau * (d as f64).sqrt()));
    let soft = tape.sigmoid(scaled);
    Ok((hard, soft))
}

/// Integer code of each +-1/sqrt(d) row; bit i (1-based) contributes 2^(i-1).
pub fn code_index<E: Scalar>(hard: &Array<E>, d: usize) -> Result<Vec<u32>> {
    if *hard.shape().last().unwrap() != d {
        return Err(Error::dim("code_index", format!("last axis {:?} vs d={}", hard.shape(), d)));
    }
    let mag = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(hard.numel() / d);
    for row in hard.data().chunks(d) {
        let mut idx = 0u32;
        for (i, &v) in row.iter().enumerate() {
            let vf = v.as_f64();
            if (vf.abs() - mag).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "code entry {} is not +-1/sqrt({}) (got {})",
                    i, d, vf
                )));
            }
            if vf > 0.0 {
                idx |= 1 << i;
            }
        }
        out.push(idx);
    }
    Ok(out)
}

/// Exact inverse of `code_index` for a single token.
pub fn index_to_code<E: Scalar>(index: u32, d: usize) -> Array<E> {
    let mag = E::from_f64(1.0 / (d as f64).sqrt());
    let row: Vec<E> = (0..d).map(|i| if index >> i & 1 == 1 { mag } else { -mag }).collect();
    Array::from_vec(vec![d], row)
}

/// Pack raw 0/1 bits into hypersphere rows, testing aid and AR-side decoder.
pub fn bits_to_code<E: Scalar>(bits: &[Vec<bool>], d: usize) -> Array<E> {
    let mag = E::from_f64(1.0 / (d as f64).sqrt());
    let mut data = Vec::with_capacity(bits.len() * d);
    for row in bits {
        for &b in row {
            data.push(if b { mag } else { -mag });
        }
    }
    Array::from_vec(vec![bits.len(), d], data)
}

/// Soft bit probabilities of a host block (matches the in-graph path).
pub fn soft_bit_probs<E: Scalar>(z: &Array<E>, cfg: &BsqConfig) -> Result<Array<E>> {
    Ok(quantize(z, cfg)?.soft_probs)
}

// Probability clamp shared with the tape's bin_entropy kernel so host and
// graph evaluations agree bit-for-bit in f64.
fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Factorized entropy objective over a batch of soft probability rows:
/// E[H(q)] - H(E[q]), in nats. Always in [-d ln 2, 0].
pub fn entropy_loss<E: Scalar>(soft_probs: &Array<E>) -> Result<f64> {
    let d = *soft_probs.shape().last().unwrap();
    let rows = soft_probs.numel() / d;
    if rows == 0 {
        return Err(Error::Contract("entropy_loss on empty batch".into()));
    }
    let mut mean_h = 0.0;
    let mut mean_p = vec![0.0f64; d];
    for row in soft_probs.data().chunks(d) {
        for (i, &p) in row.iter().enumerate() {
            mean_h += binary_entropy(p.as_f64());
            mean_p[i] += p.as_f64();
        }
    }
    mean_h /= rows as f64;
    let h_of_mean: f64 = mean_p.iter().map(|&s| binary_entropy(s / rows as f64)).sum();
    Ok(mean_h - h_of_mean)
}

/// In-graph factorized entropy objective (scalar Var).
pub fn entropy_loss_var<E: Scalar>(tape: &mut Tape<E>, soft: Var) -> Result<Var> {
    let d = *tape.value(soft).shape().last().unwrap();
    let h = tape.bin_entropy(soft);
    let mean_h_per_bit = tape.mean_all(h);
    let mean_h = tape.mul_scalar(mean_h_per_bit, E::from_f64(d as f64));
    let p_bar = tape.mean_leading(soft);
    let h_bar = tape.bin_entropy(p_bar);
    let h_of_mean = tape.sum_all(h_bar);
    tape.sub(mean_h, h_of_mean)
}

/// Aggregate code usage statistics over a dataset.
#[derive(Clone, Copy, Debug)]
pub struct CodebookStats {
    /// Distinct indices observed / 2^d.
    pub utilization: f64,
    /// Shannon entropy of the index histogram, in bits.
    pub entropy_bits: f64,
    /// Mean Hamming distance over ordered pairs (including self-pairs).
    pub mean_hamming: f64,
}

pub fn codebook_stats(indices: &[u32], d: u32) -> Result<CodebookStats> {
    if indices.is_empty() {
        return Err(Error::Contract("codebook_stats on empty index set".into()));
    }
    if d > 32 {
        return Err(Error::Contract(format!("codebook_stats requires d <= 32, got {}", d)));
    }
    let n = indices.len() as f64;
    let mut histogram = std::collections::HashMap::new();
    for &i in indices {
        *histogram.entry(i).or_insert(0usize) += 1;
    }
    let utilization = histogram.len() as f64 / 2f64.powi(d as i32);
    let entropy_bits = histogram
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    // Mean over ordered pairs decomposes per bit: 2 q (1 - q).
    let mut mean_hamming = 0.0;
    for bit in 0..d {
        let ones = indices.iter().filter(|&&i| i >> bit & 1 == 1).count() as f64;
        let q = ones / n;
        mean_hamming += 2.0 * q * (1.0 - q);
    }
    Ok(CodebookStats { utilization, entropy_bits, mean_hamming })
}

/// Brute-force nearest-corner oracle, usable for d <= 16 or so.
pub fn nearest_corner_index(z: &[f64], d: usize) -> u32 {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mag = 1.0 / (d as f64).sqrt();
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for idx in 0..(1u64 << d) as u32 {
        let mut dist = 0.0;
        for (i, &v) in z.iter().enumerate() {
            let c = if idx >> i & 1 == 1 { mag } else { -mag };
            let dd = v / norm - c;
            dist += dd * dd;
        }
        if dist < best_dist {
            best_dist = dist;
            best = idx;
        }
    }
    best
}

/// Helper shared with AR sampling: bits of `index` as a hypersphere row.
pub fn unpack_bits(index: u32, d: usize) -> Vec<bool> {
    (0..d).map(|i| index >> i & 1 == 1).collect()
}

pub fn pack_bits(bits: &[bool]) -> u32 {
    bits.iter().enumerate().fold(0u32, |acc, (i, &b)| if b { acc | 1 << i } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sign_readout_example() {
        let cfg = BsqConfig::new(4, 10.0).unwrap();
        let z = Array::from_vec(vec![1, 4], vec![0.3f64, -0.2, 0.5, -0.1]);
        let code = quantize(&z, &cfg).unwrap();
        assert_eq!(code.hard.data(), &[0.5, -0.5, 0.5, -0.5]);
        // bits (1,0,1,0) -> 1 + 4 = 5
        assert_eq!(code.indices, vec![5]);
    }

    #[test]
    fn all_positive_maxes_index() {
        let cfg = BsqConfig::new(6, 10.0).unwrap();
        let z = Array::from_vec(vec![1, 6], vec![0.2f64; 6]);
        let code = quantize(&z, &cfg).unwrap();
        assert_eq!(code.indices, vec![(1 << 6) - 1]);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let cfg = BsqConfig::new(4, 10.0).unwrap();
        let z = Array::from_vec(vec![2, 4], vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(quantize(&z, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn hard_rows_have_unit_norm() {
        let cfg = BsqConfig::new(10, 10.0).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let z = Array::from_vec(vec![8, 10], (0..80).map(|_| rng.gen::<f64>() - 0.5).collect());
        let code = quantize(&z, &cfg).unwrap();
        for row in code.hard.data().chunks(10) {
            let n2: f64 = row.iter().map(|v| v * v).sum();
            assert!((n2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_invariance() {
        let cfg = BsqConfig::new(8, 10.0).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let z: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let c: f64 = rng.gen::<f64>() * 10.0 + 0.01;
            let za = Array::from_vec(vec![1, 8], z.clone());
            let zb = Array::from_vec(vec![1, 8], z.iter().map(|v| v * c).collect());
            let ca = quantize(&za, &cfg).unwrap();
            let cb = quantize(&zb, &cfg).unwrap();
            assert_eq!(ca.indices, cb.indices);
            assert_eq!(ca.hard.data(), cb.hard.data());
        }
    }

    #[test]
    fn nearest_corner_matches_sign_quantization() {
        let mut rng = StdRng::seed_from_u64(3);
        for d in 1..=8usize {
            let cfg = BsqConfig::new(d as u32, 10.0).unwrap();
            for _ in 0..200 {
                let z: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                if z.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let idx = quantize(&Array::from_vec(vec![1, d], z.clone()), &cfg).unwrap().indices[0];
                assert_eq!(idx, nearest_corner_index(&z, d));
            }
        }
    }

    #[test]
    fn soft_probs_behave() {
        let cfg = BsqConfig::new(4, 10.0).unwrap();
        let z = Array::from_vec(vec![1, 4], vec![0.0f64, 0.5, -0.5, 1.0]);
        let p = soft_bit_probs(&z, &cfg).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);

        // tau -> infinity pushes probabilities to the hard bits.
        let sharp = BsqConfig::new(4, 1e6).unwrap();
        let ps = soft_bit_probs(&z, &sharp).unwrap();
        assert!(ps.data()[1] > 0.999999 && ps.data()[2] < 1e-6 && ps.data()[3] > 0.999999);

        // monotone in each coordinate
        let cfg2 = BsqConfig::new(2, 10.0).unwrap();
        let mut prev = -1.0;
        for step in 0..20 {
            let v = -1.0 + step as f64 * 0.1;
            let zz = Array::from_vec(vec![1, 2], vec![v, 0.7]);
            let pp = soft_bit_probs(&zz, &cfg2).unwrap().data()[0].as_f64();
            assert!(pp >= prev);
            prev = pp;
        }
    }

    #[test]
    fn entropy_loss_limits_and_bounds() {
        // all rows at p = 0.5 -> 0
        let p = Array::from_vec(vec![4, 3], vec![0.5f64; 12]);
        assert!(entropy_loss(&p).unwrap().abs() < 1e-12);

        // two confident opposite rows -> -d ln 2
        let d = 3;
        let p2 = Array::from_vec(
            vec![2, d],
            vec![1.0 - 1e-12, 1.0 - 1e-12, 1.0 - 1e-12, 1e-12, 1e-12, 1e-12],
        );
        let l = entropy_loss(&p2).unwrap();
        assert!((l + d as f64 * std::f64::consts::LN_2).abs() < 1e-4, "loss {}", l);

        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let rows = rng.gen_range(2..10);
            let data: Vec<f64> = (0..rows * 4).map(|_| rng.gen::<f64>()).collect();
            let batch = Array::from_vec(vec![rows, 4], data);
            let l = entropy_loss(&batch).unwrap();
            assert!(l <= 1e-12 && l >= -4.0 * std::f64::consts::LN_2 - 1e-12);
        }
    }

    #[test]
    fn entropy_var_matches_host() {
        let mut rng = StdRng::seed_from_u64(5);
        let z = Array::from_vec(vec![6, 4], (0..24).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
        let cfg = BsqConfig::new(4, 10.0).unwrap();
        let host = entropy_loss(&soft_bit_probs(&z, &cfg).unwrap()).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(z, false);
        let (_, soft) = quantize_vars(&mut tape, zv, &cfg, QuantizeMode::Hard).unwrap();
        let l = entropy_loss_var(&mut tape, soft).unwrap();
        assert!((tape.value(l).data()[0] - host).abs() < 1e-9);
    }

    #[test]
    fn codebook_stats_examples() {
        let s = codebook_stats(&[7, 7, 7], 4).unwrap();
        assert!((s.utilization - 1.0 / 16.0).abs() < 1e-12);
        assert_eq!(s.entropy_bits, 0.0);

        let all: Vec<u32> = (0..16).collect();
        let s2 = codebook_stats(&all, 4).unwrap();
        assert!((s2.utilization - 1.0).abs() < 1e-12);
        assert!((s2.entropy_bits - 4.0).abs() < 1e-12);

        // codes {0b00, 0b01}: ordered pairs incl. self -> mean Hamming 0.5
        let s3 = codebook_stats(&[0b00, 0b01], 2).unwrap();
        assert!((s3.mean_hamming - 0.5).abs() < 1e-12);

        assert!(matches!(codebook_stats(&[], 4), Err(Error::Contract(_))));
    }

    #[test]
    fn index_round_trip() {
        let mut rng = StdRng::seed_from_u64(17);
        let d = 18;
        for _ in 0..1000 {
            let bits: Vec<bool> = (0..d).map(|_| rng.gen()).collect();
            let code = bits_to_code::<f64>(&[bits.clone()], d);
            let idx = code_index(&code, d).unwrap()[0];
            let back = index_to_code::<f64>(idx, d);
            assert_eq!(code.data()[..d], *back.data());
        }
    }

    #[test]
    fn ste_contract_grad_matches_normalized_path() {
        // d(loss)/dz through the straight-through op equals d(loss)/d(hard)
        // pushed through the analytic Jacobian of the normalization.
        let mut rng = StdRng::seed_from_u64(23);
        let d = 6;
        let cfg = BsqConfig::new(d as u32, 10.0).unwrap();
        let z = Array::from_vec(vec![2, d], (0..2 * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
        let w = Array::from_vec(vec![d, 3], (0..3 * d).map(|_| rng.gen::<f64>() - 0.5).collect());

        // Path A: STE quantize feeding a smooth downstream loss.
        let mut ta = Tape::<f64>::new();
        let za = ta.leaf(z.clone(), true);
        let (hard, _) = quantize_vars(&mut ta, za, &cfg, QuantizeMode::Hard).unwrap();
        let wa = ta.constant(w.clone());
        let ya = ta.matmul(hard, wa).unwrap();
        let sqa = ta.square(ya);
        let la = ta.sum_all(sqa);
        ta.backward(la).unwrap();
        let grad_ste = ta.grad(za).unwrap().to_vec();

        // Path B: loss gradient at the hard values, pushed through normalize.
        let hard_host = quantize(&z, &cfg).unwrap().hard;
        let mut tb = Tape::<f64>::new();
        let hb = tb.leaf(hard_host, true);
        let wb = tb.constant(w);
        let yb = tb.matmul(hb, wb).unwrap();
        let sqb = tb.square(yb);
        let lb = tb.sum_all(sqb);
        tb.backward(lb).unwrap();
        let g_hard = tb.grad(hb).unwrap().to_vec();

        let mut tc = Tape::<f64>::new();
        let zc = tc.leaf(z, true);
        let unit = tc.normalize_last(zc);
        let seed = g_hard;
        tc.backward_seeded(vec![(unit, seed)]).unwrap();
        let grad_norm = tc.grad(zc).unwrap().to_vec();

        for (a, b) in grad_ste.iter().zip(&grad_norm) {
            assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}
