//! Ideation-diversity measurement.
//!
//! Draft plans are mapped to an (approach, family) label by keyword scan
//! against an editable taxonomy; diversity is then the base-2 Shannon
//! entropy of the approach distribution, or the count of distinct
//! approaches among a tree's initial drafts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{SolutionTree, MAX_DRAFTS};

pub const HYBRID: &str = "Hybrid";
pub const OTHER: &str = "Other";
pub const UNKNOWN_FAMILY: &str = "unknown";

const BUILTIN_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("no input values")]
    EmptyInput,
    #[error("distinct-architecture count {0} outside 1..=5")]
    CountOutOfRange(usize),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
}

/// Label counts, keyed by label.
pub type Histogram = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArchLabel {
    pub approach: String,
    pub family: String,
}

impl ArchLabel {
    pub fn other() -> Self {
        Self {
            approach: OTHER.into(),
            family: UNKNOWN_FAMILY.into(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    #[allow(dead_code)]
    version: u32,
    families: BTreeMap<String, String>,
    keywords: BTreeMap<String, String>,
}

/// Keyword to family to approach mapping.
#[derive(Debug, Clone)]
pub struct ArchTaxonomy {
    model_to_family: BTreeMap<String, String>,
    family_to_approach: BTreeMap<String, String>,
    // normalized keyword -> family, longest keywords first
    scan_order: Vec<(String, String)>,
}

impl ArchTaxonomy {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_TAXONOMY).expect("builtin taxonomy is valid")
    }

    pub fn load(path: &Path) -> Result<Self, DiversityError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, DiversityError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| DiversityError::Taxonomy(e.to_string()))?;
        let mut tax = ArchTaxonomy {
            model_to_family: BTreeMap::new(),
            family_to_approach: BTreeMap::new(),
            scan_order: Vec::new(),
        };
        for (family, approach) in file.families {
            tax.family_to_approach.insert(family, approach);
        }
        for (keyword, family) in file.keywords {
            tax.insert_keyword(&keyword, &family)?;
        }
        tax.rebuild_scan_order();
        Ok(tax)
    }

    fn insert_keyword(&mut self, keyword: &str, family: &str) -> Result<(), DiversityError> {
        let canonical = self
            .canonical_family(family)
            .ok_or_else(|| {
                DiversityError::Taxonomy(format!("keyword {keyword:?} maps to unknown family {family:?}"))
            })?
            .to_string();
        let key = normalize(keyword);
        if key.is_empty() {
            return Err(DiversityError::Taxonomy("empty keyword".into()));
        }
        self.model_to_family.insert(key, canonical);
        Ok(())
    }

    fn rebuild_scan_order(&mut self) {
        let mut order: Vec<_> = self
            .model_to_family
            .iter()
            .map(|(k, f)| (k.clone(), f.clone()))
            .collect();
        order.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        self.scan_order = order;
    }

    /// Adds (or re-points) a keyword, creating the family if needed.
    pub fn extend(
        &mut self,
        keyword: &str,
        family: &str,
        approach: &str,
    ) -> Result<(), DiversityError> {
        match self.canonical_family(family) {
            Some(existing) => {
                let current = &self.family_to_approach[existing];
                if current != approach {
                    return Err(DiversityError::Taxonomy(format!(
                        "family {family} already maps to {current}"
                    )));
                }
            }
            None => {
                self.family_to_approach
                    .insert(family.to_string(), approach.to_string());
            }
        }
        self.insert_keyword(keyword, family)?;
        self.rebuild_scan_order();
        Ok(())
    }

    fn canonical_family(&self, family: &str) -> Option<&str> {
        self.family_to_approach
            .keys()
            .find(|f| f.eq_ignore_ascii_case(family))
            .map(String::as_str)
    }

    /// Family for a model keyword, case-insensitive.
    pub fn family_of(&self, model: &str) -> Option<&str> {
        self.model_to_family.get(&normalize(model)).map(String::as_str)
    }

    /// Approach for a family, case-insensitive.
    pub fn approach_of(&self, family: &str) -> Option<&str> {
        self.canonical_family(family)
            .map(|f| self.family_to_approach[f].as_str())
    }

    pub fn families(&self) -> impl Iterator<Item = (&str, &str)> {
        self.family_to_approach
            .iter()
            .map(|(f, a)| (f.as_str(), a.as_str()))
    }

    pub fn keyword_count(&self) -> usize {
        self.model_to_family.len()
    }

    pub fn approaches(&self) -> BTreeSet<&str> {
        self.family_to_approach.values().map(String::as_str).collect()
    }

    /// Families mentioned in `plan`, in order of first mention.
    pub fn scan(&self, plan: &str) -> Vec<&str> {
        let text = normalize(plan);
        let bytes = text.as_bytes();
        let mut found = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let at_boundary = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
            let matched = if at_boundary {
                self.scan_order.iter().find_map(|(kw, family)| {
                    let end = i + kw.len();
                    if text[i..].starts_with(kw.as_str()) && ends_word(bytes, end) {
                        Some((end, family.as_str()))
                    } else {
                        None
                    }
                })
            } else {
                None
            };
            match matched {
                Some((end, family)) => {
                    if !found.contains(&family) {
                        found.push(family);
                    }
                    i = end;
                }
                None => {
                    i += text[i..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
        found
    }
}

// A keyword ends a word when followed by a non-letter or a single plural 's'.
fn ends_word(bytes: &[u8], end: usize) -> bool {
    match bytes.get(end) {
        None => true,
        Some(b) if !b.is_ascii_alphabetic() => true,
        Some(b's') => bytes.get(end + 1).is_none_or(|b| !b.is_ascii_alphabetic()),
        Some(_) => false,
    }
}

fn normalize(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '-' | '_' => ' ',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

/// Labels a plan: the approach and family of the first model mentioned,
/// `Hybrid` when the plan mixes approaches, `(Other, unknown)` when no
/// model is mentioned.
pub fn extract_labels(plan: &str, taxonomy: &ArchTaxonomy) -> ArchLabel {
    let families = taxonomy.scan(plan);
    let Some(&first) = families.first() else {
        return ArchLabel::other();
    };
    let approaches: BTreeSet<&str> = families
        .iter()
        .filter_map(|f| taxonomy.approach_of(f))
        .collect();
    let approach = if approaches.len() >= 2 {
        HYBRID.to_string()
    } else {
        taxonomy.approach_of(first).unwrap_or(OTHER).to_string()
    };
    ArchLabel {
        approach,
        family: first.to_string(),
    }
}

/// Shannon entropy in bits of a label histogram.
pub fn shannon_entropy(histogram: &Histogram) -> Result<f64, DiversityError> {
    entropy_of_counts(histogram.values().copied())
}

pub fn entropy_of_counts(counts: impl IntoIterator<Item = u64>) -> Result<f64, DiversityError> {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(DiversityError::EmptyHistogram);
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // -0.0 for a single label
    Ok(h.max(0.0))
}

pub fn histogram<'a>(labels: impl IntoIterator<Item = &'a str>) -> Histogram {
    let mut h = Histogram::new();
    for l in labels {
        *h.entry(l.to_string()).or_insert(0) += 1;
    }
    h
}

/// Diversity statistics of one tree's initial drafts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityProfile {
    pub labels: Vec<ArchLabel>,
    pub approach_histogram: Histogram,
    pub entropy_bits: f64,
    pub tree_level_diversity: usize,
}

impl DiversityProfile {
    /// `None` when the tree has no drafts.
    pub fn of_tree(tree: &SolutionTree, taxonomy: &ArchTaxonomy) -> Option<Self> {
        let labels = draft_labels(tree, taxonomy);
        let approach_histogram = histogram(labels.iter().map(|l| l.approach.as_str()));
        let entropy_bits = shannon_entropy(&approach_histogram).ok()?;
        let tree_level_diversity = approach_histogram.len().min(MAX_DRAFTS);
        Some(Self {
            labels,
            approach_histogram,
            entropy_bits,
            tree_level_diversity,
        })
    }
}

pub fn draft_labels(tree: &SolutionTree, taxonomy: &ArchTaxonomy) -> Vec<ArchLabel> {
    tree.drafts()
        .map(|d| extract_labels(&d.plan, taxonomy))
        .collect()
}

/// Number of distinct approaches among the tree's initial drafts.
pub fn tree_level_diversity(tree: &SolutionTree, taxonomy: &ArchTaxonomy) -> usize {
    draft_labels(tree, taxonomy)
        .into_iter()
        .map(|l| l.approach)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Empirical CDF of per-task distinct-architecture counts, over 1..=5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctArchCdf {
    values: [f64; MAX_DRAFTS],
}

impl DistinctArchCdf {
    /// Fraction of tasks with at most `k` distinct architectures.
    pub fn at(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k if k >= MAX_DRAFTS => 1.0,
            k => self.values[k - 1],
        }
    }

    pub fn values(&self) -> [f64; MAX_DRAFTS] {
        self.values
    }
}

pub fn distinct_arch_cdf(per_task_counts: &[usize]) -> Result<DistinctArchCdf, DiversityError> {
    if per_task_counts.is_empty() {
        return Err(DiversityError::EmptyInput);
    }
    let mut hist = [0usize; MAX_DRAFTS];
    for &c in per_task_counts {
        if !(1..=MAX_DRAFTS).contains(&c) {
            return Err(DiversityError::CountOutOfRange(c));
        }
        hist[c - 1] += 1;
    }
    let n = per_task_counts.len() as f64;
    let mut values = [0.0; MAX_DRAFTS];
    let mut acc = 0usize;
    for (k, count) in hist.iter().enumerate() {
        acc += count;
        values[k] = acc as f64 / n;
    }
    Ok(DistinctArchCdf { values })
}

/// Which draft population a run's entropy is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyPopulation {
    /// One histogram pooled over every draft of every task in the run.
    #[default]
    Pooled,
    /// Mean of the per-task entropies.
    PerTaskMean,
}

/// Ideation diversity of one (agent, seed) run.
pub fn run_entropy(
    trees: &[SolutionTree],
    taxonomy: &ArchTaxonomy,
    population: EntropyPopulation,
) -> Result<f64, DiversityError> {
    let per_tree: Vec<Histogram> = trees
        .iter()
        .map(|t| histogram(draft_labels(t, taxonomy).iter().map(|l| l.approach.as_str())))
        .filter(|h| !h.is_empty())
        .collect();
    if per_tree.is_empty() {
        return Err(DiversityError::EmptyInput);
    }
    match population {
        EntropyPopulation::Pooled => {
            let mut pooled = Histogram::new();
            for h in &per_tree {
                for (label, count) in h {
                    *pooled.entry(label.clone()).or_insert(0) += count;
                }
            }
            shannon_entropy(&pooled)
        }
        EntropyPopulation::PerTaskMean => {
            let sum: f64 = per_tree
                .iter()
                .map(shannon_entropy)
                .sum::<Result<f64, _>>()?;
            Ok(sum / per_tree.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(pairs: &[(&str, u64)]) -> Histogram {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn entropy_analytic_values() {
        assert_eq!(shannon_entropy(&hist(&[("A", 1)])).unwrap(), 0.0);
        let uniform = hist(&[("A", 1), ("B", 1), ("C", 1), ("D", 1)]);
        assert!((shannon_entropy(&uniform).unwrap() - 2.0).abs() < 1e-12);
        let skew = hist(&[("A", 2), ("B", 1), ("C", 1)]);
        assert!((shannon_entropy(&skew).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_empty_histogram_errors() {
        assert!(matches!(
            shannon_entropy(&Histogram::new()),
            Err(DiversityError::EmptyHistogram)
        ));
        assert!(matches!(
            shannon_entropy(&hist(&[("A", 0)])),
            Err(DiversityError::EmptyHistogram)
        ));
    }

    #[test]
    fn builtin_taxonomy_is_rich_enough() {
        let tax = ArchTaxonomy::builtin();
        assert!(tax.keyword_count() >= 40);
        for a in ["CNN", "Transformer", "GBDT"] {
            assert!(tax.approaches().contains(a));
        }
        for family in ["EfficientNet", "ResNet", "LightGBM", "ConvNeXt", "ViT", "BERT", "T5"] {
            assert!(tax.approach_of(family).is_some(), "{family}");
        }
        assert_eq!(tax.family_of("EFFICIENTNET"), Some("EfficientNet"));
        assert_eq!(tax.approach_of("lightgbm"), Some("GBDT"));
    }

    #[test]
    fn extract_groups_variants() {
        let tax = ArchTaxonomy::builtin();
        let l = extract_labels("Finetune EfficientNet-B4 pretrained on ImageNet", &tax);
        assert_eq!((l.approach.as_str(), l.family.as_str()), ("CNN", "EfficientNet"));
    }

    #[test]
    fn extract_flags_hybrids() {
        let tax = ArchTaxonomy::builtin();
        let l = extract_labels("Blend a LightGBM model with a BERT encoder", &tax);
        assert_eq!((l.approach.as_str(), l.family.as_str()), ("Hybrid", "LightGBM"));
    }

    #[test]
    fn extract_without_model_is_other() {
        let tax = ArchTaxonomy::builtin();
        assert_eq!(extract_labels("Carefully clean the data", &tax), ArchLabel::other());
    }

    #[test]
    fn extract_prefers_longest_match_and_word_boundaries() {
        let tax = ArchTaxonomy::builtin();
        // "roberta" must not be read as "bert", "lgbm" not as "gbm"
        let l = extract_labels("xlm-roberta-large with mean pooling", &tax);
        assert_eq!(l.family, "RoBERTa");
        assert_eq!(extract_labels("tuned LGBM", &tax).family, "LightGBM");
        assert_eq!(extract_labels("a bridge between", &tax), ArchLabel::other());
        assert_eq!(extract_labels("ResNet50 backbone", &tax).family, "ResNet");
        assert_eq!(extract_labels("stack of CNNs", &tax).family, "CNN");
        let l = extract_labels("BERT, a transformer encoder", &tax);
        assert_eq!(l.approach, "Transformer");
    }

    #[test]
    fn taxonomy_rejects_unknown_family() {
        let err = ArchTaxonomy::from_toml(
            "version = 1\n[families]\nA = \"X\"\n[keywords]\n\"b\" = \"B\"\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn taxonomy_is_extensible() {
        let mut tax = ArchTaxonomy::builtin();
        tax.extend("mamba", "Mamba", "SSM").unwrap();
        let l = extract_labels("Train a Mamba sequence model", &tax);
        assert_eq!((l.approach.as_str(), l.family.as_str()), ("SSM", "Mamba"));
        assert!(tax.extend("foo", "BERT", "CNN").is_err());
    }

    #[test]
    fn cdf_examples() {
        let cdf = distinct_arch_cdf(&[1, 2, 2, 3]).unwrap();
        assert_eq!(cdf.at(2), 0.75);
        assert_eq!(cdf.at(5), 1.0);
        let cdf = distinct_arch_cdf(&[5, 5, 5]).unwrap();
        assert_eq!(cdf.at(4), 0.0);
        assert_eq!(cdf.at(5), 1.0);
        assert!(matches!(distinct_arch_cdf(&[]), Err(DiversityError::EmptyInput)));
        assert!(matches!(
            distinct_arch_cdf(&[0]),
            Err(DiversityError::CountOutOfRange(0))
        ));
    }

    fn counts_strategy() -> impl Strategy<Value = Vec<u64>> {
        prop::collection::vec(0u64..50, 1..12).prop_filter("non-empty", |v| v.iter().any(|&c| c > 0))
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_of_support(counts in counts_strategy()) {
            let h = entropy_of_counts(counts.iter().copied()).unwrap();
            let n = counts.iter().filter(|&&c| c > 0).count() as f64;
            prop_assert!(h >= 0.0);
            prop_assert!(h <= n.log2() + 1e-12);
        }

        #[test]
        fn entropy_is_permutation_invariant(counts in counts_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = counts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = entropy_of_counts(counts).unwrap();
            let b = entropy_of_counts(shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn adding_modal_duplicate_never_raises_entropy(counts in counts_strategy()) {
            let before = entropy_of_counts(counts.iter().copied()).unwrap();
            let mut more = counts.clone();
            let modal = (0..more.len()).max_by_key(|&i| more[i]).unwrap();
            more[modal] += 1;
            let after = entropy_of_counts(more).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }
}
