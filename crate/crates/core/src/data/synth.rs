//! Synthetic multimodality detection data.
//!
//! Every modality has its own background level, sinusoidal texture, noise
//! level and intensity transfer curve. Classes are disjoint across modalities
//! but shapes are reused, so the same circle means a different class in CXR
//! than in CT and the modality has to be inferred to classify it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::types::{Annotation, Catalog, ClassInfo, Sample};
use crate::autodiff::Tensor;
use crate::error::{ensure, Error, Result};
use crate::tokens::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransferCurve {
    Linear,
    Gamma { gamma: f64 },
    Inverted,
    Sigmoid { gain: f64 },
}

impl TransferCurve {
    fn apply(self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match self {
            TransferCurve::Linear => v,
            TransferCurve::Gamma { gamma } => v.powf(gamma),
            TransferCurve::Inverted => 1.0 - v,
            TransferCurve::Sigmoid { gain } => {
                let s = |x: f64| 1.0 / (1.0 + (-gain * (x - 0.5)).exp());
                (s(v) - s(0.0)) / (s(1.0) - s(0.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub background: f64,
    /// Object fill minus background level (may be negative).
    pub contrast: f64,
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    /// Texture cycles per image side.
    pub texture_freq: f64,
    pub curve: TransferCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub appearance: Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Val => 0x76_616c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub modalities: Vec<ModalitySpec>,
    pub counts: SplitCounts,
    /// Inclusive range of objects per image.
    #[serde(default = "default_objects")]
    pub objects_per_image: [usize; 2],
    /// Inclusive range of object side length in pixels.
    pub object_size: [usize; 2],
    pub seed: u64,
}

fn default_objects() -> [usize; 2] {
    [1, 4]
}

/// Mixes a list of integers into one seed through splitmix64.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x5eed_u64;
    for &p in parts {
        acc = SplitMix64::new(acc ^ p).next_u64();
    }
    acc
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size >= 16,
            Validation,
            "image_size {} < 16",
            self.image_size
        );
        ensure!(
            self.modalities.len() >= 2,
            Validation,
            "need at least 2 modalities, got {}",
            self.modalities.len()
        );
        let mut names = std::collections::HashSet::new();
        for m in &self.modalities {
            ensure!(!m.classes.is_empty(), Validation, "modality {} has no classes", m.name);
            ensure!(!m.name.contains('|'), Validation, "modality name {:?} contains '|'", m.name);
            for c in &m.classes {
                ensure!(
                    names.insert(c.name.clone()),
                    Validation,
                    "class {:?} declared twice; vocabularies must be disjoint",
                    c.name
                );
                ensure!(!c.name.contains('|'), Validation, "class name {:?} contains '|'", c.name);
            }
            let a = &m.appearance;
            ensure!(a.noise_sigma >= 0.0, Validation, "{}: negative noise", m.name);
            ensure!(a.contrast != 0.0, Validation, "{}: zero contrast", m.name);
        }
        let mods: std::collections::HashSet<_> = self.modalities.iter().map(|m| &m.name).collect();
        ensure!(mods.len() == self.modalities.len(), Validation, "duplicate modality names");
        let [lo, hi] = self.object_size;
        ensure!(
            lo >= 3 && lo <= hi && hi <= self.image_size,
            Validation,
            "object_size {:?} invalid for image_size {}",
            self.object_size,
            self.image_size
        );
        let [omin, omax] = self.objects_per_image;
        ensure!(omin <= omax, Validation, "objects_per_image {:?}", self.objects_per_image);
        Ok(())
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            modalities: self.modalities.iter().map(|m| m.name.clone()).collect(),
            classes: self
                .modalities
                .iter()
                .enumerate()
                .flat_map(|(d, m)| {
                    m.classes.iter().map(move |c| ClassInfo {
                        name: c.name.clone(),
                        modality_id: d,
                    })
                })
                .collect(),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Five-modality default with shapes shared across modalities.
    pub fn default_medical(seed: u64) -> Self {
        use Shape::*;
        let cls = |v: &[(&str, Shape)]| {
            v.iter()
                .map(|(n, s)| ClassSpec {
                    name: n.to_string(),
                    shape: *s,
                })
                .collect()
        };
        let app = |background, contrast, noise_sigma, texture_amplitude, texture_freq, curve| {
            Appearance {
                background,
                contrast,
                noise_sigma,
                texture_amplitude,
                texture_freq,
                curve,
            }
        };
        DatasetSpec {
            image_size: 64,
            modalities: vec![
                ModalitySpec {
                    name: "CXR".into(),
                    classes: cls(&[
                        ("Nodule/Mass", Circle),
                        ("Cardiomegaly", Square),
                        ("Pleural effusion", Triangle),
                    ]),
                    appearance: app(0.35, 0.35, 0.04, 0.05, 2.0, TransferCurve::Linear),
                },
                ModalitySpec {
                    name: "MRI".into(),
                    classes: cls(&[("Brain tumor", Circle), ("Myocardium", Ring)]),
                    appearance: app(0.25, 0.4, 0.05, 0.06, 4.0, TransferCurve::Gamma { gamma: 0.8 }),
                },
                ModalitySpec {
                    name: "colon endoscope".into(),
                    classes: cls(&[("Polyp", Blob), ("Neoplastic polyp", Circle)]),
                    appearance: app(0.55, -0.3, 0.04, 0.08, 3.0, TransferCurve::Sigmoid { gain: 4.0 }),
                },
                ModalitySpec {
                    name: "Pathology (H&E stain)".into(),
                    classes: cls(&[("Lymphocyte", Circle), ("Epithelial", Square)]),
                    appearance: app(0.6, -0.35, 0.05, 0.07, 6.0, TransferCurve::Linear),
                },
                ModalitySpec {
                    name: "lung CT".into(),
                    classes: cls(&[("Nodule", Circle), ("COVID-19 infection", Blob)]),
                    appearance: app(0.2, 0.45, 0.04, 0.05, 5.0, TransferCurve::Inverted),
                },
            ],
            counts: SplitCounts {
                train: 200,
                val: 100,
            },
            objects_per_image: [1, 4],
            object_size: [12, 26],
            seed,
        }
    }
}

/// Membership test for one shape inside its `w × h` pixel box, evaluated at a
/// pixel center given in box-relative coordinates.
fn inside(shape: Shape, px: f64, py: f64, w: f64, h: f64) -> bool {
    let u = (px - 0.5 * w) / (0.5 * w);
    let v = (py - 0.5 * h) / (0.5 * h);
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => true,
        Shape::Ring => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        Shape::Triangle => {
            // apex at the top-center, base along the bottom edge; the top
            // row is widened to half a pixel so it is never empty
            let half = (py / h * 0.5 * w).max(0.5);
            (px - 0.5 * w).abs() <= half
        }
        Shape::Blob => u.powi(4) + v.powi(4) <= 1.0,
    }
}

/// Pixel mask of one shape placed at integer box `(x0, y0, w, h)`.
pub fn render_mask(shape: Shape, size: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let px = (x - x0) as f64 + 0.5;
            let py = (y - y0) as f64 + 0.5;
            if inside(shape, px, py, w as f64, h as f64) {
                mask[y * size + x] = true;
            }
        }
    }
    mask
}

/// Pixel box of an object: `(x0, y0, w, h)`.
type PixBox = (usize, usize, usize, usize);

fn overlaps(a: PixBox, b: PixBox) -> bool {
    // one pixel of separation keeps masks disjoint
    !(a.0 + a.2 < b.0 || b.0 + b.2 < a.0 || a.1 + a.3 < b.1 || b.1 + b.3 < a.1)
}

pub(crate) fn pixel_box_to_cxcywh(b: PixBox, size: usize) -> [f64; 4] {
    let s = size as f64;
    let (x0, y0, w, h) = (b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64);
    [(x0 + 0.5 * w) / s, (y0 + 0.5 * h) / s, w / s, h / s]
}

fn render_sample(spec: &DatasetSpec, split: Split, modality: usize, index: usize, id: u64) -> Sample {
    let m = &spec.modalities[modality];
    let a = &m.appearance;
    let size = spec.image_size;
    let class_offset: usize = spec.modalities[..modality].iter().map(|m| m.classes.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        spec.seed,
        split.tag(),
        modality as u64,
        index as u64,
    ]));

    let [omin, omax] = spec.objects_per_image;
    let n_obj = rng.random_range(omin..=omax);
    let [smin, smax] = spec.object_size;
    let mut boxes: Vec<(PixBox, usize)> = Vec::new();
    for _ in 0..n_obj {
        let local_class = rng.random_range(0..m.classes.len());
        for _attempt in 0..50 {
            let w = rng.random_range(smin..=smax);
            let aspect: f64 = rng.random_range(0.8..1.25);
            let h = ((w as f64 * aspect).round() as usize).clamp(smin, smax);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            let b = (x0, y0, w, h);
            if boxes.iter().all(|(o, _)| !overlaps(*o, b)) {
                boxes.push((b, local_class));
                break;
            }
        }
    }

    let phase_x: f64 = rng.random_range(0.0..2.0 * PI);
    let phase_y: f64 = rng.random_range(0.0..2.0 * PI);
    let mut pix = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let tx = 2.0 * PI * a.texture_freq * x as f64 / size as f64 + phase_x;
            let ty = 2.0 * PI * a.texture_freq * y as f64 / size as f64 + phase_y;
            pix[y * size + x] = a.background + a.texture_amplitude * tx.sin() * ty.cos();
        }
    }
    let mut annotations = Vec::with_capacity(boxes.len());
    for &(b, local) in &boxes {
        let mask = render_mask(m.classes[local].shape, size, b.0, b.1, b.2, b.3);
        for (p, &on) in pix.iter_mut().zip(&mask) {
            if on {
                *p = a.background + a.contrast;
            }
        }
        annotations.push(Annotation {
            bbox: pixel_box_to_cxcywh(b, size),
            class_id: class_offset + local,
        });
    }
    if a.noise_sigma > 0.0 {
        for p in pix.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += a.noise_sigma * z;
        }
    }
    for p in pix.iter_mut() {
        // stored as f32 on disk; keep values exactly representable
        *p = a.curve.apply(*p) as f32 as f64;
    }

    Sample {
        sample_id: id,
        image: Tensor::raw(vec![size, size], pix),
        modality_id: modality,
        annotations,
    }
}

/// Number of images each modality receives when `total` is split evenly;
/// the remainder goes to the first modalities.
pub fn per_modality_counts(total: usize, m: usize) -> Vec<usize> {
    (0..m)
        .map(|d| total / m + usize::from(d < total % m))
        .collect()
}

/// Generates one split. Deterministic in `(spec, split)`; samples are ordered
/// modality-major.
pub fn generate_synthetic(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let total = match split {
        Split::Train => spec.counts.train,
        Split::Val => spec.counts.val,
    };
    let counts = per_modality_counts(total, spec.num_modalities());
    let base_id: u64 = match split {
        Split::Train => 0,
        Split::Val => 1_000_000,
    };
    let mut out = Vec::with_capacity(total);
    for (d, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let id = base_id + out.len() as u64;
            out.push(render_sample(spec, split, d, i, id));
        }
    }
    if out.is_empty() && total > 0 {
        return Err(Error::Validation("no samples generated".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_bbox(mask: &[bool], size: usize) -> Option<PixBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        let mut any = false;
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    #[test]
    fn shape_masks_are_tight() {
        for shape in [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Blob] {
            for (w, h) in [(12, 12), (13, 17), (26, 21), (3, 3)] {
                let m = render_mask(shape, 64, 5, 7, w, h);
                let (bx, by, bw, bh) = mask_bbox(&m, 64).unwrap();
                assert!(bx - 5 <= 1 && by - 7 <= 1, "{shape:?} {w}x{h}");
                assert!(w - bw <= 1 && h - bh <= 1, "{shape:?} {w}x{h}: {bw}x{bh}");
            }
        }
    }

    #[test]
    fn noiseless_circle_box_is_exact() {
        let mut spec = DatasetSpec::default_medical(3);
        for m in &mut spec.modalities {
            m.appearance.noise_sigma = 0.0;
            m.appearance.texture_amplitude = 0.0;
            m.appearance.curve = TransferCurve::Linear;
            m.classes.truncate(1);
            m.classes[0].shape = Shape::Circle;
        }
        spec.objects_per_image = [1, 1];
        spec.counts.train = 10;
        let data = generate_synthetic(&spec, Split::Train).unwrap();
        for s in &data {
            let bg = spec.modalities[s.modality_id].appearance.background as f32 as f64;
            let mask: Vec<bool> = s.image.data().iter().map(|&v| v != bg).collect();
            let (x0, y0, w, h) = mask_bbox(&mask, 64).unwrap();
            let want = pixel_box_to_cxcywh((x0, y0, w, h), 64);
            assert_eq!(s.annotations[0].bbox, want);
        }
    }

    #[test]
    fn deterministic_and_uniform_allocation() {
        let mut spec = DatasetSpec::default_medical(11);
        spec.counts.train = 200;
        let a = generate_synthetic(&spec, Split::Train).unwrap();
        let b = generate_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let cat = spec.catalog();
        let mut per = [0usize; 5];
        for s in &a {
            per[s.modality_id] += 1;
            cat.check_sample(s).unwrap();
            assert!((1..=4).contains(&s.annotations.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(per, [40; 5]);
        let v = generate_synthetic(&spec, Split::Val).unwrap();
        assert_ne!(a[0].image, v[0].image);
    }

    #[test]
    fn small_images_rejected() {
        let mut spec = DatasetSpec::default_medical(1);
        spec.image_size = 8;
        spec.object_size = [3, 4];
        assert!(matches!(generate_synthetic(&spec, Split::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn overlapping_vocabularies_rejected() {
        let mut spec = DatasetSpec::default_medical(1);
        spec.modalities[1].classes[0].name = "Cardiomegaly".into();
        assert!(spec.validate().is_err());
    }
}
