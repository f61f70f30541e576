//! Synthetic micro-language families.
//!
//! All languages in a family share one phoneme inventory, one word lexicon,
//! and one acoustic template bank; they differ only in orthography (the
//! phoneme-to-grapheme rule table). Relatedness between two languages is the
//! fraction of rules they share, so a held-out language that is "close" to a
//! paired language exists by construction. Rule tables use fixed-width
//! two-character graphemes, which keeps every orthography prefix-free and
//! therefore uniquely decodable by greedy longest-match parsing.
//!
//! Phoneme 0 is a pause; every language spells it as the word separator, and
//! it renders as its own acoustic template like any other phoneme.

use super::oracle::AcousticOracle;
use super::{
    LanguageId, LanguageRegistry, PairedUtterance, RoleSets, SpeakerTable, Utterance,
};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tokenizer::SymbolTable;
use crate::Real;
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};

pub const PAUSE_PHONEME: usize = 0;

const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const ACCENTED: &[char] = &[
    'à', 'á', 'â', 'ã', 'ä', 'å', 'è', 'é', 'ê', 'ë', 'ì', 'í', 'î', 'ï', 'ò', 'ó', 'ô', 'õ',
    'ö', 'ù', 'ú', 'û', 'ü', 'ý',
];
const ACCENTS_PER_LANGUAGE: usize = 3;

/// A shared speaker pool: languages draw their speakers from one global set
/// so a speaker identity does not reveal the language (or family) by itself.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeakerPool {
    pub pool_size: usize,
    /// Per language (family order), indices into the pool.
    pub assignments: Vec<Vec<usize>>,
}

/// One language in a family recipe.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageDef {
    pub code: String,
    /// Code of the language whose orthography this one inherits from.
    /// `None` starts a fresh rule table.
    pub anchor: Option<String>,
    /// Fraction of phoneme rules copied from the anchor.
    #[serde(default = "default_share")]
    pub share: f64,
    pub in_text: bool,
    pub in_paired: bool,
    #[serde(default = "default_speakers")]
    pub n_speakers: usize,
}

fn default_share() -> f64 {
    0.8
}

fn default_speakers() -> usize {
    2
}

/// Declarative family recipe; everything else is derived from it and a seed.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub inventory_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames per phoneme.
    pub duration_range: (usize, usize),
    /// Scale of the Gaussian template draw.
    pub template_scale: f64,
    /// Required minimum Euclidean distance between templates (δ).
    pub min_template_separation: f64,
    /// Noise added to rendered paired features.
    pub noise_sigma: f64,
    /// How many plain graphemes all base orthographies draw from. A pool
    /// close to the inventory size forces heavy cross-family collisions
    /// (the same grapheme spelling different phonemes per language), which
    /// is what makes language identity genuinely informative.
    pub plain_pool_size: usize,
    pub word_separator: String,
    pub lexicon_size: usize,
    /// Inclusive range of phonemes per lexicon word.
    pub word_len_range: (usize, usize),
    /// Inclusive range of words per utterance.
    pub words_per_utterance: (usize, usize),
    pub speaker_dim: usize,
    /// `None` gives every language its own private speakers.
    pub speaker_pool: Option<SpeakerPool>,
    pub languages: Vec<LanguageDef>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            inventory_size: 17,
            feature_dim: 8,
            duration_range: (3, 6),
            template_scale: 2.0,
            min_template_separation: 3.0,
            noise_sigma: 0.05,
            plain_pool_size: CONSONANTS.len() * VOWELS.len(),
            word_separator: " ".into(),
            lexicon_size: 50,
            word_len_range: (2, 4),
            words_per_utterance: (2, 5),
            speaker_dim: 8,
            speaker_pool: None,
            languages: Vec::new(),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.inventory_size < 2 {
            return Err(Error::Corpus(
                "inventory must hold the pause plus at least one phoneme".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Corpus("feature_dim must be positive".into()));
        }
        if self.duration_range.0 == 0 || self.duration_range.0 > self.duration_range.1 {
            return Err(Error::Corpus("invalid duration range".into()));
        }
        if self.word_len_range.0 == 0 || self.word_len_range.0 > self.word_len_range.1 {
            return Err(Error::Corpus("invalid word length range".into()));
        }
        if self.words_per_utterance.0 == 0
            || self.words_per_utterance.0 > self.words_per_utterance.1
        {
            return Err(Error::Corpus("invalid words-per-utterance range".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::Corpus("family must define at least one language".into()));
        }
        if self.languages.len() * ACCENTS_PER_LANGUAGE > ACCENTED.len() {
            return Err(Error::Corpus(format!(
                "at most {} languages per family",
                ACCENTED.len() / ACCENTS_PER_LANGUAGE
            )));
        }
        if self.plain_pool_size > CONSONANTS.len() * VOWELS.len() {
            return Err(Error::Corpus("plain_pool_size exceeds the grapheme pool".into()));
        }
        if self.inventory_size - 1 > self.plain_pool_size {
            return Err(Error::Corpus("inventory exceeds plain_pool_size".into()));
        }
        if self.min_template_separation <= 0.0 {
            return Err(Error::Corpus("min_template_separation must be positive".into()));
        }
        if let Some(pool) = &self.speaker_pool {
            if pool.assignments.len() != self.languages.len() {
                return Err(Error::Corpus(format!(
                    "speaker pool assigns {} languages, family has {}",
                    pool.assignments.len(),
                    self.languages.len()
                )));
            }
            for (def, assigned) in self.languages.iter().zip(&pool.assignments) {
                if assigned.len() != def.n_speakers {
                    return Err(Error::Corpus(format!(
                        "`{}` has {} speakers but {} pool assignments",
                        def.code,
                        def.n_speakers,
                        assigned.len()
                    )));
                }
                if let Some(&bad) = assigned.iter().find(|&&i| i >= pool.pool_size) {
                    return Err(Error::Corpus(format!(
                        "`{}` references pool speaker {bad} outside pool of {}",
                        def.code, pool.pool_size
                    )));
                }
            }
        }
        for def in &self.languages {
            if !(0.0..=1.0).contains(&def.share) {
                return Err(Error::Corpus(format!(
                    "share for `{}` must lie in [0, 1]",
                    def.code
                )));
            }
            if def.in_paired && !def.in_text {
                return Err(Error::Corpus(format!(
                    "`{}` has paired data but is not in the text data",
                    def.code
                )));
            }
            if let Some(anchor) = &def.anchor {
                if !self.languages.iter().any(|d| &d.code == anchor) {
                    return Err(Error::Corpus(format!(
                        "`{}` anchors to unknown language `{anchor}`",
                        def.code
                    )));
                }
                if anchor == &def.code {
                    return Err(Error::Corpus(format!("`{}` anchors to itself", def.code)));
                }
            }
            if def.n_speakers == 0 {
                return Err(Error::Corpus(format!("`{}` needs speakers", def.code)));
            }
        }
        Ok(())
    }
}

/// A realized family: rule tables, durations, templates, lexicon.
#[derive(Clone, Debug)]
pub struct SyntheticLanguageSpec {
    pub config: SyntheticConfig,
    /// Per language: phoneme id -> grapheme string.
    pub orthographies: Vec<BTreeMap<usize, String>>,
    pub durations: Vec<usize>,
    pub templates: Array2<Real>,
    /// Shared word lexicon (phoneme sequences without pauses).
    pub lexicon: Vec<Vec<usize>>,
    /// `relatedness[a][b]` = fraction of phoneme rules languages a and b share.
    pub relatedness: Vec<Vec<f64>>,
}

impl SyntheticLanguageSpec {
    pub fn n_languages(&self) -> usize {
        self.config.languages.len()
    }

    /// Spell a phoneme sequence in a language's orthography.
    pub fn encode(&self, language: LanguageId, phonemes: &[usize]) -> Result<String> {
        let table = &self.orthographies[language];
        let mut out = String::new();
        for &p in phonemes {
            let grapheme = table.get(&p).ok_or(Error::PhonemeRange {
                id: p,
                inventory: self.config.inventory_size,
            })?;
            out.push_str(grapheme);
        }
        Ok(out)
    }

    /// Inverse rule table (grapheme -> phoneme id) for parsing text back.
    pub fn grapheme_table(&self, language: LanguageId) -> SymbolTable {
        let rules: Vec<(String, usize)> = self.orthographies[language]
            .iter()
            .map(|(&p, g)| (g.clone(), p))
            .collect();
        SymbolTable::new(rules)
    }

    /// Ground-truth phonemes of a text in a language (exact inverse of
    /// [`SyntheticLanguageSpec::encode`]).
    pub fn phonemes_of(&self, language: LanguageId, text: &str) -> Result<Vec<usize>> {
        self.grapheme_table(language).parse(text)
    }

    /// Sample one utterance's phoneme sequence: lexicon words joined by pauses.
    pub fn sample_phonemes(&self, rng: &mut DetRng) -> Vec<usize> {
        let (lo, hi) = self.config.words_per_utterance;
        let n_words = rng.range_inclusive(lo, hi);
        let mut phonemes = Vec::new();
        for w in 0..n_words {
            if w > 0 {
                phonemes.push(PAUSE_PHONEME);
            }
            let word = &self.lexicon[rng.index(self.lexicon.len())];
            phonemes.extend_from_slice(word);
        }
        phonemes
    }

    /// Expected phonemes per utterance under the sampling distribution.
    pub fn expected_utterance_len(&self) -> f64 {
        let (wlo, whi) = self.config.words_per_utterance;
        let mean_words = (wlo + whi) as f64 / 2.0;
        let mean_word_len = self.lexicon.iter().map(|w| w.len()).sum::<usize>() as f64
            / self.lexicon.len() as f64;
        mean_words * mean_word_len + (mean_words - 1.0)
    }

    /// Verify each orthography is injective and prefix-free.
    fn validate_decodability(&self) -> Result<()> {
        for (lang, table) in self.orthographies.iter().enumerate() {
            let code = &self.config.languages[lang].code;
            let graphemes: Vec<&String> = table.values().collect();
            let mut seen = BTreeSet::new();
            for g in &graphemes {
                if g.is_empty() {
                    return Err(Error::Undecodable {
                        code: code.clone(),
                        reason: "empty grapheme".into(),
                    });
                }
                if !seen.insert(g.as_str()) {
                    return Err(Error::Undecodable {
                        code: code.clone(),
                        reason: format!("grapheme `{g}` maps two phonemes"),
                    });
                }
            }
            for a in &graphemes {
                for b in &graphemes {
                    if a != b && b.starts_with(a.as_str()) {
                        return Err(Error::Undecodable {
                            code: code.clone(),
                            reason: format!("`{a}` is a prefix of `{b}`"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Realize rule tables, durations, templates, and the lexicon from a recipe.
pub fn realize_language_family(config: &SyntheticConfig, seed: u64) -> Result<SyntheticLanguageSpec> {
    config.validate()?;
    let p = config.inventory_size;
    let d = config.feature_dim;

    let mut dur_rng = DetRng::new(seed, "family.durations");
    let durations: Vec<usize> = (0..p)
        .map(|_| dur_rng.range_inclusive(config.duration_range.0, config.duration_range.1))
        .collect();

    let templates = sample_templates(
        p,
        d,
        config.template_scale,
        config.min_template_separation,
        seed,
    )?;

    let mut lex_rng = DetRng::new(seed, "family.lexicon");
    let lexicon: Vec<Vec<usize>> = (0..config.lexicon_size)
        .map(|_| {
            let len = lex_rng.range_inclusive(config.word_len_range.0, config.word_len_range.1);
            (0..len).map(|_| 1 + lex_rng.index(p - 1)).collect()
        })
        .collect();

    let orthographies = build_orthographies(config, seed)?;

    let n = config.languages.len();
    let mut relatedness = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let shared = (0..p)
                .filter(|ph| orthographies[a].get(ph) == orthographies[b].get(ph))
                .count();
            relatedness[a][b] = shared as f64 / p as f64;
        }
    }

    let spec = SyntheticLanguageSpec {
        config: config.clone(),
        orthographies,
        durations,
        templates,
        lexicon,
        relatedness,
    };
    spec.validate_decodability()?;

    // Every held-out (text-only) language must stay close to some paired
    // language, otherwise the zero-shot experiments are vacuous.
    for (i, def) in spec.config.languages.iter().enumerate() {
        if def.in_text && !def.in_paired {
            let best = spec
                .config
                .languages
                .iter()
                .enumerate()
                .filter(|(_, other)| other.in_paired)
                .map(|(j, _)| spec.relatedness[i][j])
                .fold(0.0, f64::max);
            if best + 1e-9 < def.share {
                return Err(Error::Corpus(format!(
                    "held-out `{}` shares {best:.2} of rules with its closest paired \
                     language; configured share is {:.2}",
                    def.code, def.share
                )));
            }
        }
    }
    Ok(spec)
}

fn sample_templates(
    p: usize,
    d: usize,
    scale: f64,
    min_sep: f64,
    seed: u64,
) -> Result<Array2<Real>> {
    let mut rng = DetRng::new(seed, "family.templates");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut attempts = 0;
    while rows.len() < p {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Corpus(format!(
                "could not place {p} templates with separation {min_sep} at scale {scale}"
            )));
        }
        let candidate: Vec<f64> = (0..d).map(|_| rng.normal() * scale).collect();
        let ok = rows.iter().all(|row| {
            let dist: f64 = row
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist >= min_sep
        });
        if ok {
            rows.push(candidate);
        }
    }
    let flat: Vec<Real> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((p, d), flat).map_err(|e| Error::Shape(e.to_string()))
}

fn build_orthographies(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<BTreeMap<usize, String>>> {
    let p = config.inventory_size;
    let mut plain_pool: Vec<String> = Vec::new();
    for &c in CONSONANTS {
        for &v in VOWELS {
            plain_pool.push(format!("{c}{v}"));
        }
    }
    plain_pool.truncate(config.plain_pool_size);

    let mut tables: Vec<BTreeMap<usize, String>> = Vec::with_capacity(config.languages.len());
    for (i, def) in config.languages.iter().enumerate() {
        let mut rng = DetRng::new(seed, &format!("family.orthography.{}", def.code));
        let mut table = BTreeMap::new();
        table.insert(PAUSE_PHONEME, config.word_separator.clone());

        let anchor_idx = def
            .anchor
            .as_ref()
            .map(|code| {
                config
                    .languages
                    .iter()
                    .position(|d| &d.code == code)
                    .expect("validated anchor")
            })
            .filter(|&j| j < i);
        if def.anchor.is_some() && anchor_idx.is_none() {
            return Err(Error::Corpus(format!(
                "`{}` must anchor to an earlier language in the list",
                def.code
            )));
        }

        let accents: Vec<char> = ACCENTED
            [i * ACCENTS_PER_LANGUAGE..(i + 1) * ACCENTS_PER_LANGUAGE]
            .to_vec();
        let mut unique_pool: Vec<String> = Vec::new();
        for &c in CONSONANTS {
            for &v in &accents {
                unique_pool.push(format!("{c}{v}"));
            }
        }
        rng.shuffle(&mut unique_pool);

        match anchor_idx {
            None => {
                let mut pool = plain_pool.clone();
                rng.shuffle(&mut pool);
                for ph in 1..p {
                    table.insert(ph, pool[ph - 1].clone());
                }
            }
            Some(j) => {
                let n_shared = ((p - 1) as f64 * def.share).ceil() as usize;
                let mut phonemes: Vec<usize> = (1..p).collect();
                rng.shuffle(&mut phonemes);
                let (shared, unique) = phonemes.split_at(n_shared.min(p - 1));
                for &ph in shared {
                    table.insert(ph, tables[j][&ph].clone());
                }
                for (k, &ph) in unique.iter().enumerate() {
                    table.insert(ph, unique_pool[k].clone());
                }
            }
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Per-language utterance counts for the three corpus sections.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSizes {
    pub text: Vec<usize>,
    pub paired: Vec<usize>,
    pub eval: Vec<usize>,
}

impl CorpusSizes {
    pub fn uniform(n_languages: usize, text: usize, paired: usize, eval: usize) -> Self {
        CorpusSizes {
            text: vec![text; n_languages],
            paired: vec![paired; n_languages],
            eval: vec![eval; n_languages],
        }
    }
}

/// Everything one corpus generation produces.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub registry: LanguageRegistry,
    /// Pretraining text (languages with the text role only).
    pub text: Vec<Utterance>,
    /// Fine-tuning data (languages with the paired role only).
    pub paired: Vec<PairedUtterance>,
    /// Held-out evaluation utterances with oracle ground truth (any language).
    pub eval: Vec<PairedUtterance>,
    pub oracle: AcousticOracle<Real>,
    pub speakers: SpeakerTable,
    pub spec: SyntheticLanguageSpec,
}

/// Generate a full corpus bundle. Pure function of `(spec, sizes, seed)`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticLanguageSpec,
    sizes: &CorpusSizes,
    seed: u64,
) -> Result<SyntheticCorpus> {
    let n = spec.n_languages();
    for (name, list) in [("text", &sizes.text), ("paired", &sizes.paired), ("eval", &sizes.eval)] {
        if list.len() != n {
            return Err(Error::Corpus(format!(
                "sizes.{name} has {} entries for {n} languages",
                list.len()
            )));
        }
    }

    let mut roles = RoleSets::default();
    for (i, def) in spec.config.languages.iter().enumerate() {
        if def.in_text {
            roles.text.insert(i);
        }
        if def.in_paired {
            roles.paired.insert(i);
            roles.seen.insert(i);
        } else {
            roles.unseen.insert(i);
        }
        roles.synthesis.insert(i);
        if !def.in_text && sizes.text[i] > 0 {
            return Err(Error::Corpus(format!(
                "`{}` is outside the text data but has text count {}",
                def.code, sizes.text[i]
            )));
        }
        if !def.in_paired && sizes.paired[i] > 0 {
            return Err(Error::Corpus(format!(
                "`{}` is outside the paired data but has paired count {}",
                def.code, sizes.paired[i]
            )));
        }
    }
    let codes: Vec<String> = spec.config.languages.iter().map(|d| d.code.clone()).collect();
    let registry = LanguageRegistry::new(codes, roles)?;

    let oracle = AcousticOracle::new(
        spec.templates.clone(),
        spec.durations.clone(),
        spec.config.noise_sigma,
    )?;

    let mut speakers = SpeakerTable::default();
    match &spec.config.speaker_pool {
        Some(pool) => {
            let mut rng = DetRng::new(seed, "corpus.speakerpool");
            let vectors: Vec<Vec<Real>> = (0..pool.pool_size)
                .map(|_| {
                    let mut v: Vec<Real> =
                        (0..spec.config.speaker_dim).map(|_| rng.normal()).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in &mut v {
                        *x /= norm;
                    }
                    v
                })
                .collect();
            for (i, assigned) in pool.assignments.iter().enumerate() {
                for (k, &global) in assigned.iter().enumerate() {
                    speakers.insert(i, k, vectors[global].clone());
                }
            }
        }
        None => {
            for (i, def) in spec.config.languages.iter().enumerate() {
                let mut rng = DetRng::new(seed, &format!("corpus.speakers.{}", def.code));
                for k in 0..def.n_speakers {
                    let mut v: Vec<Real> =
                        (0..spec.config.speaker_dim).map(|_| rng.normal()).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in &mut v {
                        *x /= norm;
                    }
                    speakers.insert(i, k, v);
                }
            }
        }
    }

    let mut text = Vec::new();
    for (i, def) in spec.config.languages.iter().enumerate() {
        let mut rng = DetRng::new(seed, &format!("corpus.text.{}", def.code));
        for _ in 0..sizes.text[i] {
            let phonemes = spec.sample_phonemes(&mut rng);
            let utt_text = spec.encode(i, &phonemes)?;
            text.push(Utterance::new(i, utt_text, &registry)?);
        }
    }

    let render_paired = |i: usize,
                             def: &LanguageDef,
                             count: usize,
                             section: &str,
                             out: &mut Vec<PairedUtterance>|
     -> Result<()> {
        let mut rng = DetRng::new(seed, &format!("corpus.{section}.{}", def.code));
        for u in 0..count {
            let phonemes = spec.sample_phonemes(&mut rng);
            let utt_text = spec.encode(i, &phonemes)?;
            let speaker_id = rng.index(def.n_speakers);
            let render_seed =
                DetRng::new(seed, &format!("corpus.render.{section}.{}.{u}", def.code)).next_u64();
            let features = oracle.render_features(&phonemes, render_seed)?;
            let utt = PairedUtterance {
                language_id: i,
                text: utt_text,
                phonemes,
                speaker_id,
                features,
            };
            utt.validate(spec.config.feature_dim)?;
            out.push(utt);
        }
        Ok(())
    };

    let mut paired = Vec::new();
    let mut eval = Vec::new();
    for (i, def) in spec.config.languages.iter().enumerate() {
        render_paired(i, def, sizes.paired[i], "paired", &mut paired)?;
        render_paired(i, def, sizes.eval[i], "eval", &mut eval)?;
    }

    Ok(SyntheticCorpus {
        registry,
        text,
        paired,
        eval,
        oracle,
        speakers,
        spec: spec.clone(),
    })
}

impl SyntheticCorpus {
    /// Convenience: spec reference, consuming nothing.
    pub fn spec(&self) -> &SyntheticLanguageSpec {
        &self.spec
    }
}
