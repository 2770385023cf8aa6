//! Deterministic stand-in for a frozen text encoder's `[CLS]` output.
//!
//! `FNV-1a-64(rendered ‖ seed_le)` seeds a splitmix64 stream; consecutive pairs
//! of 53-bit uniforms in `(0, 1]` feed Box–Muller, and the vector is scaled to
//! unit L2 norm. Transcendentals come from `libm` so results are bit-exact on
//! every platform.

use super::prompt::PromptSpec;
use super::registry::{EmbeddingSource, RawEmbedding};
use crate::error::{ensure, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `(0, 1]`.
    fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub fn synth_embedding(prompt: &PromptSpec, d_text: usize, seed: u64) -> Result<RawEmbedding> {
    ensure!(d_text >= 2, Validation, "d_text must be at least 2, got {d_text}");
    let mut bytes = prompt.rendered.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_le_bytes());
    let mut rng = SplitMix64::new(fnv1a64(&bytes));

    let mut v = Vec::with_capacity(d_text);
    while v.len() < d_text {
        let u1 = rng.next_open01();
        let u2 = rng.next_open01();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        v.push(r * libm::cos(theta));
        if v.len() < d_text {
            v.push(r * libm::sin(theta));
        }
    }
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    for x in &mut v {
        *x /= norm;
    }
    Ok(RawEmbedding {
        vector: v,
        source: EmbeddingSource::Synthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::prompt::{build_prompt, MEDICAL_CATEGORIES};

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let p = build_prompt("Cardiomegaly", "CXR").unwrap();
        let a = synth_embedding(&p, 64, 3).unwrap();
        let b = synth_embedding(&p, 64, 3).unwrap();
        assert_eq!(a.vector, b.vector);
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let odd = synth_embedding(&p, 5, 3).unwrap();
        assert_eq!(odd.vector.len(), 5);
    }

    #[test]
    fn matches_independent_reference() {
        // Reference values from a standalone re-implementation.
        let p = build_prompt("Cardiomegaly", "CXR").unwrap();
        let v = synth_embedding(&p, 8, 7).unwrap().vector;
        let want = [
            0.5042659179347346,
            0.1848311477664508,
            -0.3037984320656901,
            -0.43777869846462547,
        ];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn medical_prompts_are_spread_out() {
        let vs: Vec<Vec<f64>> = MEDICAL_CATEGORIES
            .iter()
            .map(|(c, d)| {
                synth_embedding(&build_prompt(c, d).unwrap(), 64, 1)
                    .unwrap()
                    .vector
            })
            .collect();
        let mut min_c = f64::INFINITY;
        let mut max_c: f64 = 0.0;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let c = cos(&vs[i], &vs[j]).abs();
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
        }
        assert!(min_c < 0.5);
        assert!((min_c - 0.0005005303049435209).abs() < 1e-12);
        assert!((max_c - 0.3440629330545589).abs() < 1e-12);
    }

    #[test]
    fn rejects_tiny_dimension() {
        let p = build_prompt("x", "y").unwrap();
        assert!(synth_embedding(&p, 1, 0).is_err());
    }
}
