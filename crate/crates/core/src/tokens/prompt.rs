use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A `"<class> in <modality>"` text prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub class_name: String,
    pub modality_name: String,
    pub rendered: String,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    ensure!(!name.is_empty(), Validation, "{kind} name is empty");
    ensure!(
        name.trim() == name,
        Validation,
        "{kind} name {name:?} has leading or trailing whitespace"
    );
    Ok(())
}

pub fn build_prompt(class_name: &str, modality_name: &str) -> Result<PromptSpec> {
    check_name("class", class_name)?;
    check_name("modality", modality_name)?;
    Ok(PromptSpec {
        class_name: class_name.to_string(),
        modality_name: modality_name.to_string(),
        rendered: format!("{class_name} in {modality_name}"),
    })
}

/// The 27 (class, modality) categories of the mixed medical benchmark.
pub const MEDICAL_CATEGORIES: [(&str, &str); 27] = [
    ("Aortic enlargement", "CXR"),
    ("Atelectasis", "CXR"),
    ("Calcification", "CXR"),
    ("Cardiomegaly", "CXR"),
    ("Consolidation", "CXR"),
    ("ILD", "CXR"),
    ("Infiltration", "CXR"),
    ("Lung Opacity", "CXR"),
    ("Nodule/Mass", "CXR"),
    ("Other lesion", "CXR"),
    ("Pleural effusion", "CXR"),
    ("Pleural thickening", "CXR"),
    ("Pneumothorax", "CXR"),
    ("Pulmonary fibrosis", "CXR"),
    ("Brain tumor", "MRI"),
    ("Epithelial", "Pathology (H&E stain)"),
    ("Lymphocyte", "Pathology (H&E stain)"),
    ("Neutrophil", "Pathology (H&E stain)"),
    ("Macrophage", "Pathology (H&E stain)"),
    ("Left heart ventricle", "cardiac MRI"),
    ("Myocardium", "cardiac MRI"),
    ("Right heart ventricle", "cardiac MRI"),
    ("COVID-19 infection", "lung CT"),
    ("Nodule", "lung CT"),
    ("Neoplastic polyp", "colon endoscope"),
    ("Polyp", "colon endoscope"),
    ("Non-neoplastic polyp", "colon endoscope"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_template() {
        assert_eq!(
            build_prompt("Cardiomegaly", "CXR").unwrap().rendered,
            "Cardiomegaly in CXR"
        );
        assert_eq!(
            build_prompt("Brain tumor", "MRI").unwrap().rendered,
            "Brain tumor in MRI"
        );
        assert_eq!(build_prompt("x", "y").unwrap().rendered, "x in y");
    }

    #[test]
    fn rejects_bad_names() {
        assert!(build_prompt("", "CXR").is_err());
        assert!(build_prompt("Nodule", " CT").is_err());
        assert!(build_prompt("Nodule ", "CT").is_err());
    }
}
