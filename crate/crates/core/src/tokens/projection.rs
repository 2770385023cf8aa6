use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::registry::TokenRegistry;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Learnable linear map `W ∈ R^{d_model × d_text}` from raw text vectors to
/// modality tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenProjection {
    pub weight: Tensor,
}

impl TokenProjection {
    /// Uniform init in `±1/√d_text`.
    pub fn init(d_model: usize, d_text: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d_text as f64).sqrt();
        let data = (0..d_model * d_text)
            .map(|_| rng.random_range(-s..s))
            .collect();
        Self {
            weight: Tensor::raw(vec![d_model, d_text], data),
        }
    }

    pub fn from_weight(weight: Tensor) -> Self {
        Self { weight }
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_text(&self) -> usize {
        self.weight.cols()
    }
}

/// `m = W · e` as a `1 × d_model` row, differentiable through `w`.
pub fn project_on_tape(tape: &mut Tape, w: Var, embedding: &[f64]) -> Result<Var> {
    let e = tape.constant(Tensor::row(embedding.to_vec()));
    let wt = tape.transpose(w);
    tape.matmul(e, wt)
}

/// Plain-value token projection for `(modality, class)`.
pub fn project_token(
    reg: &TokenRegistry,
    proj: &TokenProjection,
    modality: &str,
    class: &str,
) -> Result<Tensor> {
    let e = reg.get(modality, class)?;
    ensure!(
        proj.d_text() == reg.d_text(),
        Dimension,
        "projection expects d_text {}, registry has {}",
        proj.d_text(),
        reg.d_text()
    );
    let (dm, dt) = (proj.d_model(), proj.d_text());
    let w = proj.weight.data();
    let out = (0..dm)
        .map(|i| (0..dt).map(|j| w[i * dt + j] * e.vector[j]).sum())
        .collect();
    Ok(Tensor::row(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::registry::{EmbeddingSource, RawEmbedding};
    use rand::SeedableRng;

    fn reg(v: Vec<f64>) -> TokenRegistry {
        let n = v.len();
        TokenRegistry::from_entries(
            n,
            [(
                "CT".to_string(),
                "Nodule".to_string(),
                RawEmbedding {
                    vector: v,
                    source: EmbeddingSource::File,
                },
            )],
        )
        .unwrap()
    }

    #[test]
    fn zero_and_identity_projection() {
        let r = reg(vec![0.5, -1.0, 2.0]);
        let zero = TokenProjection::from_weight(Tensor::zeros(4, 3));
        let m = project_token(&r, &zero, "CT", "Nodule").unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let id = TokenProjection::from_weight(Tensor::identity(3));
        let m = project_token(&r, &id, "CT", "Nodule").unwrap();
        assert_eq!(m.data(), &[0.5, -1.0, 2.0]);
        assert!(project_token(&r, &id, "MRI", "Nodule").is_err());
    }

    #[test]
    fn random_projection_matches_hand_matvec_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = reg(e.clone());
        let p = TokenProjection::init(3, 5, &mut rng);
        let m = project_token(&r, &p, "CT", "Nodule").unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            for j in 0..5 {
                want += p.weight.get(i, j) * e[j];
            }
            assert!((m.data()[i] - want).abs() < 1e-15);
        }
        let mut t = Tape::new();
        let w = t.param(p.weight.clone());
        let v = project_on_tape(&mut t, w, &e).unwrap();
        assert!(t.value(v).max_abs_diff(&m) < 1e-15);
    }
}
