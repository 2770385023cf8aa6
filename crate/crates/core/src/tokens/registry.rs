//! Modality-token registry and its JSON file format:
//!
//! ```json
//! {"d_text": 64, "tokens": {"CXR|Cardiomegaly": [0.1, ...], ...}}
//! ```
//!
//! Keys are `"<modality>|<class>"`; `|` may not appear inside either name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::prompt::build_prompt;
use super::synth::synth_embedding;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    File,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Immutable set of raw `[CLS]`-level vectors keyed by (modality, class).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRegistry {
    d_text: usize,
    entries: BTreeMap<(String, String), RawEmbedding>,
    modalities: Vec<String>,
    classes: Vec<String>,
}

fn check_key_part(s: &str) -> Result<()> {
    ensure!(!s.contains('|'), Validation, "name {s:?} contains '|'");
    Ok(())
}

impl TokenRegistry {
    /// Builds a registry from `(modality, class, vector)` triples, keeping the
    /// first-seen order of modality and class names.
    pub fn from_entries(
        d_text: usize,
        items: impl IntoIterator<Item = (String, String, RawEmbedding)>,
    ) -> Result<Self> {
        ensure!(d_text >= 1, Validation, "d_text must be positive");
        let mut entries = BTreeMap::new();
        let mut modalities: Vec<String> = Vec::new();
        let mut classes: Vec<String> = Vec::new();
        for (d, c, e) in items {
            check_key_part(&d)?;
            check_key_part(&c)?;
            build_prompt(&c, &d)?;
            if e.vector.len() != d_text {
                return Err(Error::Dimension(format!(
                    "token {d}|{c} has length {}, header says {d_text}",
                    e.vector.len()
                )));
            }
            ensure!(
                e.vector.iter().all(|v| v.is_finite()),
                Validation,
                "token {d}|{c} has non-finite entries"
            );
            if !modalities.contains(&d) {
                modalities.push(d.clone());
            }
            if !classes.contains(&c) {
                classes.push(c.clone());
            }
            if entries.insert((d.clone(), c.clone()), e).is_some() {
                return Err(Error::Duplicate(format!("{d}|{c}")));
            }
        }
        Ok(Self {
            d_text,
            entries,
            modalities,
            classes,
        })
    }

    /// Synthesizes one token per declared `(modality, classes)` pair.
    pub fn synthetic(d_text: usize, seed: u64, grid: &[(String, Vec<String>)]) -> Result<Self> {
        let mut items = Vec::new();
        for (d, cs) in grid {
            for c in cs {
                let p = build_prompt(c, d)?;
                items.push((d.clone(), c.clone(), synth_embedding(&p, d_text, seed)?));
            }
        }
        Self::from_entries(d_text, items)
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, modality: &str, class: &str) -> Result<&RawEmbedding> {
        self.entries
            .get(&(modality.to_string(), class.to_string()))
            .ok_or_else(|| Error::Lookup(format!("no token for {modality}|{class}")))
    }

    /// Classes declared for `modality`, in first-seen order.
    pub fn classes_of(&self, modality: &str) -> Result<Vec<&str>> {
        let out: Vec<&str> = self
            .classes
            .iter()
            .filter(|c| self.entries.contains_key(&(modality.to_string(), (*c).clone())))
            .map(String::as_str)
            .collect();
        ensure!(!out.is_empty(), Lookup, "modality {modality:?} not in registry");
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &RawEmbedding)> {
        self.entries
            .iter()
            .map(|((d, c), e)| (d.as_str(), c.as_str(), e))
    }

    pub fn to_json(&self) -> Result<String> {
        let tokens: BTreeMap<String, &Vec<f64>> = self
            .entries
            .iter()
            .map(|((d, c), e)| (format!("{d}|{c}"), &e.vector))
            .collect();
        #[derive(Serialize)]
        struct Out<'a> {
            d_text: usize,
            tokens: BTreeMap<String, &'a Vec<f64>>,
        }
        Ok(serde_json::to_string(&Out {
            d_text: self.d_text,
            tokens,
        })?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: RegistryFile =
            serde_json::from_str(text).map_err(|e| Error::malformed(origin, e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        let mut items = Vec::with_capacity(file.tokens.0.len());
        for (key, vector) in file.tokens.0 {
            if !seen.insert(key.clone()) {
                return Err(Error::Duplicate(key));
            }
            let (d, c) = key
                .split_once('|')
                .ok_or_else(|| Error::malformed(origin, format!("key {key:?} lacks '|'")))?;
            if c.contains('|') {
                return Err(Error::malformed(origin, format!("key {key:?} has extra '|'")));
            }
            items.push((
                d.to_string(),
                c.to_string(),
                RawEmbedding {
                    vector,
                    source: EmbeddingSource::File,
                },
            ));
        }
        Self::from_entries(file.d_text, items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Deserialize)]
struct RegistryFile {
    d_text: usize,
    tokens: OrderedEntries,
}

/// JSON object kept as an ordered list so duplicate keys stay visible.
struct OrderedEntries(Vec<(String, Vec<f64>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of token vectors")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        de.deserialize_map(V)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("<mem>")
    }

    #[test]
    fn two_modalities_one_class() {
        let r = TokenRegistry::from_json(
            r#"{"d_text": 2, "tokens": {"CT|Nodule": [1.0, 0.0], "MRI|Nodule": [0.0, 1.0]}}"#,
            p(),
        )
        .unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.get("MRI", "Nodule").unwrap().vector, vec![0.0, 1.0]);
        assert!(matches!(r.get("CXR", "Nodule"), Err(Error::Lookup(_))));
    }

    #[test]
    fn distinct_error_kinds() {
        let dim = TokenRegistry::from_json(r#"{"d_text": 3, "tokens": {"CT|a": [1.0]}}"#, p());
        assert!(matches!(dim, Err(Error::Dimension(_))));
        let dup = TokenRegistry::from_json(
            r#"{"d_text": 1, "tokens": {"CT|a": [1.0], "CT|a": [2.0]}}"#,
            p(),
        );
        assert!(matches!(dup, Err(Error::Duplicate(_))));
        let bad = TokenRegistry::from_json(r#"{"d_text": 1, "tokens": ["x"]}"#, p());
        assert!(matches!(bad, Err(Error::Malformed { .. })));
        let nokey = TokenRegistry::from_json(r#"{"d_text": 1, "tokens": {"CTa": [1.0]}}"#, p());
        assert!(matches!(nokey, Err(Error::Malformed { .. })));
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let grid = vec![
            ("CT".to_string(), vec!["Nodule".to_string(), "Mass".to_string()]),
            ("MRI".to_string(), vec!["Tumor".to_string()]),
        ];
        let reg = TokenRegistry::synthetic(16, 9, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.json");
        reg.save(&path).unwrap();
        let back = TokenRegistry::load(&path).unwrap();
        for ((d, c, a), (_, _, b)) in reg.iter().zip(back.iter()) {
            let bits_a: Vec<u64> = a.vector.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.vector.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{d}|{c}");
        }
        assert_eq!(back.classes_of("CT").unwrap(), vec!["Mass", "Nodule"]);
    }
}
