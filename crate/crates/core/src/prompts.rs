//! Normal/abnormal text ensembles, per-category image descriptions, and the
//! two class text features used by the decoder.
//!
//! The phrase lists ship as JSON under `prompts/` and are embedded at build
//! time.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{l2_normalize, l2_normalize_in_place};

pub const STATES_JSON: &str = include_str!("../prompts/states.json");
pub const TEMPLATES_JSON: &str = include_str!("../prompts/templates.json");
pub const DESCRIPTIONS_MVTEC_JSON: &str = include_str!("../prompts/descriptions_mvtec.json");
pub const DESCRIPTIONS_VISA_JSON: &str = include_str!("../prompts/descriptions_visa.json");

/// Name substituted for `[o]` when the object name is empty.
pub const FALLBACK_OBJECT: &str = "object";

#[derive(Debug, Deserialize)]
struct StatesFile {
    #[allow(dead_code)]
    version: u32,
    normal: Vec<String>,
    abnormal: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TemplatesFile {
    #[allow(dead_code)]
    version: u32,
    templates: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct DescriptionsFile {
    #[allow(dead_code)]
    version: u32,
    #[allow(dead_code)]
    dataset: String,
    descriptions: BTreeMap<String, String>,
}

struct PromptData {
    normal_states: Vec<String>,
    abnormal_states: Vec<String>,
    templates: Vec<String>,
    descriptions: BTreeMap<String, String>,
}

fn data() -> &'static PromptData {
    static DATA: OnceLock<PromptData> = OnceLock::new();
    DATA.get_or_init(|| {
        // embedded files are checked by the unit tests below
        let states: StatesFile = serde_json::from_str(STATES_JSON).expect("states.json");
        let templates: TemplatesFile =
            serde_json::from_str(TEMPLATES_JSON).expect("templates.json");
        let mut descriptions = BTreeMap::new();
        for raw in [DESCRIPTIONS_MVTEC_JSON, DESCRIPTIONS_VISA_JSON] {
            let file: DescriptionsFile = serde_json::from_str(raw).expect("descriptions json");
            descriptions.extend(file.descriptions);
        }
        PromptData {
            normal_states: states.normal,
            abnormal_states: states.abnormal,
            templates: templates.templates,
            descriptions,
        }
    })
}

pub fn normal_states() -> &'static [String] {
    &data().normal_states
}

pub fn abnormal_states() -> &'static [String] {
    &data().abnormal_states
}

pub fn templates() -> &'static [String] {
    &data().templates
}

/// Fully substituted normal and abnormal texts for one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnsemble {
    pub object_name: String,
    pub normal_texts: Vec<String>,
    pub abnormal_texts: Vec<String>,
}

/// Cross product of state phrases and templates: `[o]` is replaced by the
/// object name, then `[c]` by the state phrase. Ordered template-major.
pub fn compose_ensemble(object_name: &str) -> PromptEnsemble {
    let name = object_name.trim();
    let name = if name.is_empty() { FALLBACK_OBJECT } else { name };
    let compose = |states: &[String]| -> Vec<String> {
        let filled: Vec<String> = states.iter().map(|s| s.replace("[o]", name)).collect();
        templates()
            .iter()
            .flat_map(|t| filled.iter().map(move |s| t.replace("[c]", s)))
            .collect()
    };
    PromptEnsemble {
        object_name: name.to_string(),
        normal_texts: compose(normal_states()),
        abnormal_texts: compose(abnormal_states()),
    }
}

/// Unit-norm class text features: index 0 is normal, 1 is abnormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextFeaturePair {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl TextFeaturePair {
    /// Normalizes both vectors; fails on a zero vector or dim mismatch.
    pub fn new(normal: Vec<f64>, abnormal: Vec<f64>) -> Result<Self> {
        if normal.len() != abnormal.len() || normal.is_empty() {
            return Err(Error::mismatch(
                "text feature dims",
                normal.len(),
                abnormal.len(),
            ));
        }
        let n = l2_normalize(&normal);
        let a = l2_normalize(&abnormal);
        if n.degenerate || a.degenerate {
            return Err(Error::Degenerate("text feature vector has zero norm".into()));
        }
        Ok(Self {
            normal: n.vector,
            abnormal: a.vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }
}

/// Class features as the normalized mean of each class's embeddings.
pub fn build_text_features(
    normal_embeds: &[Vec<f64>],
    abnormal_embeds: &[Vec<f64>],
) -> Result<TextFeaturePair> {
    let normal = class_mean(normal_embeds, "normal")?;
    let abnormal = class_mean(abnormal_embeds, "abnormal")?;
    if normal.len() != abnormal.len() {
        return Err(Error::mismatch(
            "text embedding dim",
            normal.len(),
            abnormal.len(),
        ));
    }
    Ok(TextFeaturePair {
        normal: normalized_or_err(normal, "normal")?,
        abnormal: normalized_or_err(abnormal, "abnormal")?,
    })
}

fn class_mean(embeds: &[Vec<f64>], class: &str) -> Result<Vec<f64>> {
    let first = embeds
        .first()
        .ok_or_else(|| Error::Empty(format!("no {class} text embeddings")))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::InvalidDimension(format!("{class} embeddings are empty")));
    }
    // sort rows so the sum, and hence the result, ignores input order
    let mut rows: Vec<&Vec<f64>> = embeds.iter().collect();
    for r in &rows {
        if r.len() != dim {
            return Err(Error::mismatch(format!("{class} embedding dim"), dim, r.len()));
        }
    }
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = embeds.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn normalized_or_err(mut v: Vec<f64>, class: &str) -> Result<Vec<f64>> {
    match l2_normalize_in_place(&mut v) {
        Some(_) => Ok(v),
        None => Err(Error::Degenerate(format!(
            "mean {class} text embedding is zero"
        ))),
    }
}

/// Deterministic stand-in for a text encoder: a SHA-256 of `(text, seed)`
/// seeds a PRNG that draws `dim` standard normals, which are normalized.
pub fn toy_text_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 2, "toy text embedding needs dim >= 2");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    l2_normalize_in_place(&mut v);
    v
}

/// Text features for an object from the toy encoder over its full ensemble.
pub fn toy_text_features(object_name: &str, dim: usize, seed: u64) -> Result<TextFeaturePair> {
    let ens = compose_ensemble(object_name);
    let embed = |texts: &[String]| -> Vec<Vec<f64>> {
        texts.iter().map(|t| toy_text_embed(t, dim, seed)).collect()
    };
    build_text_features(&embed(&ens.normal_texts), &embed(&ens.abnormal_texts))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDescription {
    pub category: String,
    pub description: String,
}

fn category_key(category: &str) -> String {
    category.trim().to_lowercase().replace([' ', '-'], "_")
}

/// Image description for a category, or a generic fallback for unknown ones.
pub fn description_for(category: &str) -> CategoryDescription {
    let description = match data().descriptions.get(&category_key(category)) {
        Some(d) => d.clone(),
        None => format!(
            "This is a photo of a {} for anomaly detection, which should be without any damage, flaw, defect, scratch, hole or broken part.",
            category.trim()
        ),
    };
    CategoryDescription {
        category: category.to_string(),
        description,
    }
}

/// Categories with a shipped description, sorted.
pub fn known_categories() -> Vec<&'static str> {
    data().descriptions.keys().map(String::as_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_counts() {
        assert_eq!(normal_states().len(), 7);
        assert_eq!(abnormal_states().len(), 5);
        assert_eq!(templates().len(), 22);
        let e = compose_ensemble("bottle");
        assert_eq!(e.normal_texts.len(), 154);
        assert_eq!(e.abnormal_texts.len(), 110);
    }

    #[test]
    fn ensemble_substitution() {
        let e = compose_ensemble("bottle");
        assert!(e.normal_texts.iter().any(|t| t == "a photo of a flawless bottle."));
        assert!(e
            .abnormal_texts
            .iter()
            .any(|t| t == "a photo of the bottle for anomaly detection."
                || t == "a photo of a bottle with defect."));
        for t in e.normal_texts.iter().chain(&e.abnormal_texts) {
            assert!(!t.contains("[c]") && !t.contains("[o]"), "{t}");
        }
    }

    #[test]
    fn empty_name_uses_object() {
        let e = compose_ensemble("");
        assert_eq!(e.object_name, "object");
        assert!(e.abnormal_texts.iter().any(|t| t == "a photo of a damaged object."));
    }

    #[test]
    fn text_features_single_embedding_unchanged() {
        let n = vec![0.6, 0.8, 0.0];
        let a = vec![0.0, 0.0, 1.0];
        let tf = build_text_features(&[n.clone()], &[a.clone()]).unwrap();
        assert_eq!(tf.normal, n);
        assert_eq!(tf.abnormal, a);
    }

    #[test]
    fn text_features_opposite_embeddings_degenerate() {
        let r = build_text_features(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[vec![0.0, 1.0]]);
        assert!(matches!(r, Err(Error::Degenerate(_))));
        assert!(build_text_features(&[], &[vec![1.0]]).is_err());
        assert!(build_text_features(&[vec![1.0, 0.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn text_features_match_componentwise_mean() {
        let vs: Vec<Vec<f64>> = (0..3).map(|i| toy_text_embed(&format!("t{i}"), 16, 1)).collect();
        let tf = build_text_features(&vs, &[vs[0].clone()]).unwrap();
        // oracle: per-component average, then divide by norm
        let mut mean = [0.0; 16];
        for k in 0..16 {
            mean[k] = (vs[0][k] + vs[1][k] + vs[2][k]) / 3.0;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..16 {
            assert!((tf.normal[k] - mean[k] / norm).abs() < 1e-12);
        }
        // order invariance, bit-exact
        let rev: Vec<Vec<f64>> = vs.iter().rev().cloned().collect();
        let tf2 = build_text_features(&rev, &[vs[0].clone()]).unwrap();
        assert_eq!(tf, tf2);
    }

    #[test]
    fn toy_embed_properties() {
        let a = toy_text_embed("a photo of a bottle.", 64, 3);
        assert_eq!(a, toy_text_embed("a photo of a bottle.", 64, 3));
        assert_ne!(a, toy_text_embed("a photo of a bottle.", 64, 4));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..1000 {
            let u = toy_text_embed(&format!("text number {i}"), 64, 0);
            let v = toy_text_embed(&format!("other text {i}"), 64, 0);
            let cos: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            assert!(cos < 0.5, "pair {i}: cos {cos}");
        }
    }

    #[test]
    fn descriptions() {
        assert_eq!(
            description_for("bottle").description,
            "This is a photo of a bottle for anomaly detection, which should be round and without any damage, flaw, defect, scratch, hole or broken part."
        );
        assert!(description_for("candle")
            .description
            .starts_with("This is a photo of 4 candles"));
        assert_eq!(description_for("Metal Nut").description, description_for("metal_nut").description);
        assert_eq!(
            description_for("widget").description,
            "This is a photo of a widget for anomaly detection, which should be without any damage, flaw, defect, scratch, hole or broken part."
        );
        assert_eq!(known_categories().len(), 27);
        for c in known_categories() {
            let d = description_for(c).description;
            assert!(!d.is_empty() && d.ends_with('.'), "{c}");
        }
    }
}
