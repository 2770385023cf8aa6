//! Choosing and projecting the modality token for a sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::types::{Catalog, Sample};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokens::{project_on_tape, TokenProjection, TokenRegistry};

/// Which classes' raw vectors are averaged to form the token. A single entry
/// is a plain `(modality, class)` token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSelection {
    pub modality: String,
    pub classes: Vec<String>,
}

pub enum TokenMode<'a> {
    /// Uniform draw over the sample's ground-truth classes; empty images fall
    /// back to the modality mean.
    Train(&'a mut ChaCha8Rng),
    /// Mean over every class declared for the modality.
    Inference,
}

pub fn select_token(
    sample: &Sample,
    catalog: &Catalog,
    registry: &TokenRegistry,
    mode: TokenMode<'_>,
) -> Result<TokenSelection> {
    let modality = catalog
        .modalities
        .get(sample.modality_id)
        .ok_or_else(|| Error::Lookup(format!("modality id {} not in catalog", sample.modality_id)))?
        .clone();
    let declared: Vec<String> = registry
        .classes_of(&modality)?
        .into_iter()
        .map(str::to_owned)
        .collect();
    let classes = match mode {
        TokenMode::Train(rng) => {
            let gt = sample.class_set();
            if gt.is_empty() {
                declared
            } else {
                let c = gt[rng.random_range(0..gt.len())];
                vec![catalog.classes[c].name.clone()]
            }
        }
        TokenMode::Inference => declared,
    };
    Ok(TokenSelection { modality, classes })
}

/// Mean raw text vector of the selection.
pub fn selection_embedding(registry: &TokenRegistry, sel: &TokenSelection) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; registry.d_text()];
    for c in &sel.classes {
        let e = registry.get(&sel.modality, c)?;
        for (a, v) in acc.iter_mut().zip(&e.vector) {
            *a += v;
        }
    }
    let n = sel.classes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Token `W · ē` on the tape. By linearity this is the mean of the projected
/// class tokens.
pub fn token_on_tape(
    tape: &mut Tape,
    w: Var,
    registry: &TokenRegistry,
    sel: &TokenSelection,
) -> Result<Var> {
    let e = selection_embedding(registry, sel)?;
    project_on_tape(tape, w, &e)
}

/// Plain-value form: selection plus its projected `1 × d_model` token.
pub fn attach_token(
    sample: &Sample,
    catalog: &Catalog,
    registry: &TokenRegistry,
    projection: &TokenProjection,
    mode: TokenMode<'_>,
) -> Result<(TokenSelection, Tensor)> {
    let sel = select_token(sample, catalog, registry, mode)?;
    let mut tape = Tape::new();
    let w = tape.constant(projection.weight.clone());
    let t = token_on_tape(&mut tape, w, registry, &sel)?;
    Ok((sel, tape.value(t).clone()))
}
