//! Corpora, language registry, and the synthetic micro-language generator.
//!
//! Text corpora are plain TSV (`language_code<TAB>text`, UTF-8, LF). Paired
//! corpora carry an oracle-rendered feature matrix per utterance plus the
//! latent phoneme sequence used to render it; the phonemes are ground truth
//! for evaluation only and never feed the model.

mod io;
mod oracle;
mod synth;

pub use io::{
    load_oracle, load_orthographies, load_paired_corpus, load_registry, load_speakers,
    read_feature_matrix, save_oracle, save_orthographies, save_paired_corpus, save_registry,
    save_speakers, save_text_corpus, write_feature_matrix, FEATURE_MAGIC,
};
pub use oracle::AcousticOracle;
pub use synth::{
    generate_synthetic_corpus, realize_language_family, CorpusSizes, LanguageDef, SpeakerPool,
    SyntheticConfig, SyntheticCorpus, SyntheticLanguageSpec, PAUSE_PHONEME,
};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::Real;
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub type LanguageId = usize;

/// How a language relates to the data a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SynthesisMode {
    /// Present in the paired data.
    Seen,
    /// Absent from paired data but present in the pretraining text.
    TextSeenZeroShot,
    /// Absent from both.
    FullyZeroShot,
}

impl std::fmt::Display for SynthesisMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthesisMode::Seen => write!(f, "seen"),
            SynthesisMode::TextSeenZeroShot => write!(f, "text-seen zero-shot"),
            SynthesisMode::FullyZeroShot => write!(f, "fully zero-shot"),
        }
    }
}

/// Named language-id subsets controlling what each pipeline stage may touch.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoleSets {
    /// Languages in the pretraining text data.
    pub text: BTreeSet<LanguageId>,
    /// Languages with paired data available for fine-tuning.
    pub paired: BTreeSet<LanguageId>,
    /// Languages evaluated as seen.
    pub seen: BTreeSet<LanguageId>,
    /// Languages evaluated zero-shot (text-seen or fully unseen).
    pub unseen: BTreeSet<LanguageId>,
    /// Languages synthesis may be requested for.
    pub synthesis: BTreeSet<LanguageId>,
}

/// Ordered language table with dense ids and role subsets.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LanguageRegistry {
    codes: Vec<String>,
    pub roles: RoleSets,
}

impl LanguageRegistry {
    /// Build a registry. Ids are assigned densely in `codes` order.
    pub fn new(codes: Vec<String>, roles: RoleSets) -> Result<Self> {
        let mut uniq = BTreeSet::new();
        for code in &codes {
            if code.is_empty() {
                return Err(Error::Registry("empty language code".into()));
            }
            if !uniq.insert(code.clone()) {
                return Err(Error::Registry(format!("duplicate language code `{code}`")));
            }
        }
        let registry = LanguageRegistry { codes, roles };
        registry.validate_roles()?;
        Ok(registry)
    }

    fn validate_roles(&self) -> Result<()> {
        let n = self.codes.len();
        let all = [
            (&self.roles.text, "text"),
            (&self.roles.paired, "paired"),
            (&self.roles.seen, "seen"),
            (&self.roles.unseen, "unseen"),
            (&self.roles.synthesis, "synthesis"),
        ];
        for (set, name) in all {
            if let Some(&id) = set.iter().find(|&&id| id >= n) {
                return Err(Error::Registry(format!(
                    "role set `{name}` references unregistered id {id}"
                )));
            }
        }
        if !self.roles.paired.is_subset(&self.roles.text) {
            return Err(Error::Registry(
                "paired languages must be a subset of text languages".into(),
            ));
        }
        if !self.roles.seen.is_subset(&self.roles.paired) {
            return Err(Error::Registry(
                "seen languages must be a subset of paired languages".into(),
            ));
        }
        if self.roles.unseen.intersection(&self.roles.paired).count() > 0 {
            return Err(Error::Registry(
                "unseen languages must be disjoint from paired languages".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, id: LanguageId) -> Option<&str> {
        self.codes.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, code: &str) -> Option<LanguageId> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn codes(&self) -> impl Iterator<Item = (&str, LanguageId)> {
        self.codes.iter().enumerate().map(|(i, c)| (c.as_str(), i))
    }

    /// Classify a language id against these role sets.
    pub fn classify(&self, id: LanguageId) -> SynthesisMode {
        if self.roles.paired.contains(&id) {
            SynthesisMode::Seen
        } else if self.roles.text.contains(&id) {
            SynthesisMode::TextSeenZeroShot
        } else {
            SynthesisMode::FullyZeroShot
        }
    }
}

/// A text-only training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub language_id: LanguageId,
    pub text: String,
}

impl Utterance {
    pub fn new(language_id: LanguageId, text: String, registry: &LanguageRegistry) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Corpus("utterance text is empty".into()));
        }
        if registry.code(language_id).is_none() {
            return Err(Error::Registry(format!(
                "language id {language_id} is not registered"
            )));
        }
        Ok(Utterance { language_id, text })
    }
}

/// A text/feature pair with its latent phoneme sequence and speaker.
#[derive(Clone, Debug)]
pub struct PairedUtterance {
    pub language_id: LanguageId,
    pub text: String,
    /// Oracle ground truth, used for evaluation only.
    pub phonemes: Vec<usize>,
    pub speaker_id: usize,
    /// Frames x feature-dim matrix.
    pub features: Array2<Real>,
}

impl PairedUtterance {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::Corpus("paired utterance has zero frames".into()));
        }
        if self.features.ncols() != feature_dim {
            return Err(Error::Shape(format!(
                "feature dim {} != corpus dim {feature_dim}",
                self.features.ncols()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corpus("non-finite feature value".into()));
        }
        if self.phonemes.is_empty() {
            return Err(Error::Corpus("oracle-generated phonemes are empty".into()));
        }
        Ok(())
    }
}

/// Unit-norm speaker vectors, keyed by language and speaker index.
#[derive(Clone, Debug, Default)]
pub struct SpeakerTable {
    entries: BTreeMap<(LanguageId, usize), Vec<Real>>,
}

impl SpeakerTable {
    pub fn insert(&mut self, language_id: LanguageId, speaker_id: usize, vector: Vec<Real>) {
        self.entries.insert((language_id, speaker_id), vector);
    }

    pub fn get(&self, language_id: LanguageId, speaker_id: usize) -> Option<&[Real]> {
        self.entries
            .get(&(language_id, speaker_id))
            .map(|v| v.as_slice())
    }

    pub fn speakers_of(&self, language_id: LanguageId) -> Vec<(usize, &[Real])> {
        self.entries
            .iter()
            .filter(|((lang, _), _)| *lang == language_id)
            .map(|((_, spk), v)| (*spk, v.as_slice()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LanguageId, usize, &[Real])> {
        self.entries.iter().map(|((l, s), v)| (*l, *s, v.as_slice()))
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|v| v.len())
    }
}

/// Parse a text corpus file (`language_code<TAB>text` per line).
pub fn load_text_corpus(path: &Path, registry: &LanguageRegistry) -> Result<Vec<Utterance>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_text_corpus(&content, registry)
}

/// Parse text corpus content; line numbers are 1-based in errors.
pub fn parse_text_corpus(content: &str, registry: &LanguageRegistry) -> Result<Vec<Utterance>> {
    let mut utterances = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (code, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected `code<TAB>text`, got `{line}`"),
        })?;
        let language_id = registry.id(code).ok_or_else(|| Error::UnknownLanguage {
            code: code.to_string(),
            line: idx + 1,
        })?;
        utterances.push(Utterance::new(language_id, text.to_string(), registry)?);
    }
    Ok(utterances)
}

/// Per-language stratified split indices: (train, dev, test).
///
/// Deterministic under `seed`; within each split the original corpus order is
/// preserved.
pub fn split_indices(
    language_ids: &[LanguageId],
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut per_lang: BTreeMap<LanguageId, Vec<usize>> = BTreeMap::new();
    for (i, &lang) in language_ids.iter().enumerate() {
        per_lang.entry(lang).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for (lang, indices) in &per_lang {
        if indices.len() <= n_dev + n_test {
            return Err(Error::Corpus(format!(
                "language id {lang} has {} utterances; need more than n_dev + n_test = {}",
                indices.len(),
                n_dev + n_test
            )));
        }
        let mut shuffled = indices.clone();
        DetRng::new(seed, &format!("split.{lang}")).shuffle(&mut shuffled);
        dev.extend_from_slice(&shuffled[..n_dev]);
        test.extend_from_slice(&shuffled[n_dev..n_dev + n_test]);
        train.extend_from_slice(&shuffled[n_dev + n_test..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    Ok((train, dev, test))
}

/// Split a slice of utterances per-language into (train, dev, test).
pub fn split_corpus<T: Clone>(
    corpus: &[T],
    language_of: impl Fn(&T) -> LanguageId,
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let langs: Vec<LanguageId> = corpus.iter().map(&language_of).collect();
    let (train, dev, test) = split_indices(&langs, n_dev, n_test, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect();
    Ok((pick(&train), pick(&dev), pick(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry_ab() -> LanguageRegistry {
        let roles = RoleSets {
            text: BTreeSet::from([0, 1]),
            paired: BTreeSet::from([0]),
            seen: BTreeSet::from([0]),
            unseen: BTreeSet::from([1]),
            synthesis: BTreeSet::from([0, 1]),
        };
        LanguageRegistry::new(vec!["aa".into(), "bb".into()], roles).unwrap()
    }

    #[test]
    fn registry_ids_are_dense_and_queryable() {
        let reg = registry_ab();
        assert_eq!(reg.id("aa"), Some(0));
        assert_eq!(reg.id("bb"), Some(1));
        assert_eq!(reg.code(1), Some("bb"));
        assert_eq!(reg.id("zz"), None);
    }

    #[test]
    fn registry_rejects_paired_outside_text() {
        let roles = RoleSets {
            text: BTreeSet::from([0]),
            paired: BTreeSet::from([0, 1]),
            ..Default::default()
        };
        let err = LanguageRegistry::new(vec!["aa".into(), "bb".into()], roles).unwrap_err();
        assert!(matches!(err, Error::Registry(_)));
    }

    #[test]
    fn registry_rejects_unseen_overlapping_paired() {
        let roles = RoleSets {
            text: BTreeSet::from([0, 1]),
            paired: BTreeSet::from([0]),
            unseen: BTreeSet::from([0]),
            ..Default::default()
        };
        assert!(LanguageRegistry::new(vec!["aa".into(), "bb".into()], roles).is_err());
    }

    #[test]
    fn classify_follows_role_sets() {
        let roles = RoleSets {
            text: BTreeSet::from([0, 1]),
            paired: BTreeSet::from([0]),
            ..Default::default()
        };
        let reg = LanguageRegistry::new(vec!["aa".into(), "bb".into(), "cc".into()], roles).unwrap();
        assert_eq!(reg.classify(0), SynthesisMode::Seen);
        assert_eq!(reg.classify(1), SynthesisMode::TextSeenZeroShot);
        assert_eq!(reg.classify(2), SynthesisMode::FullyZeroShot);
    }

    #[test]
    fn parse_text_corpus_reads_lines_in_order() {
        let reg = registry_ab();
        let utts = parse_text_corpus("aa\thola\nbb\thallo\n", &reg).unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(utts[0].language_id, 0);
        assert_eq!(utts[0].text, "hola");
        assert_eq!(utts[1].language_id, 1);
        assert_eq!(utts[1].text, "hallo");
    }

    #[test]
    fn parse_text_corpus_empty_file_is_empty() {
        let reg = registry_ab();
        assert!(parse_text_corpus("", &reg).unwrap().is_empty());
    }

    #[test]
    fn parse_text_corpus_names_unknown_code_and_line() {
        let reg = registry_ab();
        let err = parse_text_corpus("zz\tx\n", &reg).unwrap_err();
        match err {
            Error::UnknownLanguage { code, line } => {
                assert_eq!(code, "zz");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn parse_text_corpus_reports_malformed_line_number() {
        let reg = registry_ab();
        let err = parse_text_corpus("aa\tok\nno-tab-here\n", &reg).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn split_sizes_match_arithmetic() {
        let langs: Vec<usize> = vec![0; 200];
        let (train, dev, test) = split_indices(&langs, 5, 20, 7).unwrap();
        assert_eq!((train.len(), dev.len(), test.len()), (175, 5, 20));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let langs: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let a = split_indices(&langs, 5, 10, 42).unwrap();
        let b = split_indices(&langs, 5, 10, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.0.iter().chain(&a.1).chain(&a.2).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 300);
    }

    #[test]
    fn split_accepts_paper_sized_dev_test_when_counts_allow() {
        let langs: Vec<usize> = vec![0; 120];
        // 5 dev / 100 test leaves 15 training utterances.
        let (train, dev, test) = split_indices(&langs, 5, 100, 1).unwrap();
        assert_eq!((train.len(), dev.len(), test.len()), (15, 5, 100));
    }

    #[test]
    fn split_rejects_insufficient_utterances() {
        let langs: Vec<usize> = vec![0; 25];
        assert!(split_indices(&langs, 5, 20, 1).is_err());
    }
}
