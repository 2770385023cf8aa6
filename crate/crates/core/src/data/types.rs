use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Result};

/// Ground-truth object: normalized `(cx, cy, w, h)` and a global class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: [f64; 4],
    pub class_id: usize,
}

impl Annotation {
    pub fn xyxy(&self) -> [f64; 4] {
        cxcywh_to_xyxy(self.bbox)
    }
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

/// Checks the normalized-box invariants: center in `[0,1]`, extent in `(0,1]`.
pub fn validate_box(b: [f64; 4]) -> Result<()> {
    ensure!(
        b.iter().all(|v| v.is_finite()),
        Validation,
        "non-finite box {b:?}"
    );
    ensure!(
        (0.0..=1.0).contains(&b[0]) && (0.0..=1.0).contains(&b[1]),
        Validation,
        "box center outside unit square: {b:?}"
    );
    ensure!(
        b[2] > 0.0 && b[2] <= 1.0 && b[3] > 0.0 && b[3] <= 1.0,
        Validation,
        "box extent outside (0,1]: {b:?}"
    );
    Ok(())
}

/// One grayscale image with its modality and objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    /// `H × W`, values in `[0, 1]`.
    pub image: Tensor,
    pub modality_id: usize,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.rows()
    }

    pub fn width(&self) -> usize {
        self.image.cols()
    }

    /// Distinct ground-truth classes, ascending.
    pub fn class_set(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self.annotations.iter().map(|a| a.class_id).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }
}

/// Global naming of modalities and classes; class ids index `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub modalities: Vec<String>,
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub modality_id: usize,
}

impl Catalog {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == name)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn classes_of(&self, modality_id: usize) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].modality_id == modality_id)
            .collect()
    }

    /// Every annotation's class must belong to the sample's modality.
    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        ensure!(
            s.modality_id < self.modalities.len(),
            Validation,
            "sample {}: modality {} undeclared",
            s.sample_id,
            s.modality_id
        );
        for a in &s.annotations {
            ensure!(
                a.class_id < self.classes.len()
                    && self.classes[a.class_id].modality_id == s.modality_id,
                Validation,
                "sample {}: class {} not declared for modality {}",
                s.sample_id,
                a.class_id,
                self.modalities[s.modality_id]
            );
        }
        Ok(())
    }

    /// `(modality, classes)` grid for building a token registry.
    pub fn token_grid(&self) -> Vec<(String, Vec<String>)> {
        (0..self.modalities.len())
            .map(|d| {
                (
                    self.modalities[d].clone(),
                    self.classes_of(d)
                        .into_iter()
                        .map(|c| self.classes[c].name.clone())
                        .collect(),
                )
            })
            .collect()
    }
}
