//! BERT-style token masking for MLM pretraining.
//!
//! Each non-special position is independently selected with probability
//! `select_ratio`; selected positions split into MASK / random-replacement /
//! kept-but-predicted fractions. Defaults reproduce the standard totals:
//! 12% MASK, 1.5% random, 1.5% kept.

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tokenizer::{TokenSequence, Vocabulary, MASK};

/// Selection ratio and category split for masking.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskingPolicy {
    pub select_ratio: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_ratio: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let sum = self.mask_fraction + self.random_fraction + self.keep_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask/random/keep fractions sum to {sum}, expected 1"
            )));
        }
        if !(self.select_ratio > 0.0 && self.select_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "select_ratio {} outside (0, 1]",
                self.select_ratio
            )));
        }
        if self.mask_fraction < 0.0 || self.random_fraction < 0.0 || self.keep_fraction < 0.0 {
            return Err(Error::Config("negative masking fraction".into()));
        }
        Ok(())
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskCategory {
    Masked,
    Random,
    Kept,
}

/// A masked sequence with its prediction positions and targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub masked_ids: Vec<usize>,
    /// Sorted selected positions.
    pub positions: Vec<usize>,
    /// Original ids at the selected positions.
    pub targets: Vec<usize>,
    /// Category per selected position, kept for exact reconstruction checks.
    pub categories: Vec<MaskCategory>,
}

impl MaskedExample {
    pub fn k(&self) -> usize {
        self.positions.len()
    }
}

/// Apply a masking policy to a token sequence.
pub fn apply_mask(
    seq: &TokenSequence,
    policy: &MaskingPolicy,
    rng: &mut DetRng,
    vocab: &Vocabulary,
) -> MaskedExample {
    debug_assert!(policy.validate().is_ok());
    let mut masked_ids = seq.ids.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut categories = Vec::new();
    let data_range = vocab.data_id_range();
    for (pos, &id) in seq.ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        if !rng.bernoulli(policy.select_ratio) {
            continue;
        }
        let u = rng.uniform();
        let category = if u < policy.mask_fraction {
            masked_ids[pos] = MASK;
            MaskCategory::Masked
        } else if u < policy.mask_fraction + policy.random_fraction {
            masked_ids[pos] = data_range.start + rng.index(data_range.len());
            MaskCategory::Random
        } else {
            MaskCategory::Kept
        };
        positions.push(pos);
        targets.push(id);
        categories.push(category);
    }
    MaskedExample {
        masked_ids,
        positions,
        targets,
        categories,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LanguageRegistry, RoleSets, Utterance};
    use crate::tokenizer::{tokenize_bytes, SOS_EOS};

    fn vocab_and_seq(text: &str) -> (Vocabulary, TokenSequence) {
        let roles = RoleSets {
            text: std::collections::BTreeSet::from([0]),
            ..Default::default()
        };
        let reg = LanguageRegistry::new(vec!["aa".into()], roles).unwrap();
        let corpus = vec![Utterance::new(0, text.to_string(), &reg).unwrap()];
        let vocab = Vocabulary::build_bytes(&corpus).unwrap();
        let seq = tokenize_bytes(text, &vocab);
        (vocab, seq)
    }

    #[test]
    fn special_positions_are_never_selected() {
        let (vocab, seq) = vocab_and_seq("abcabcabc");
        let mut rng = DetRng::new(0, "m");
        let policy = MaskingPolicy {
            select_ratio: 1.0,
            ..Default::default()
        };
        let ex = apply_mask(&seq, &policy, &mut rng, &vocab);
        assert!(ex.positions.iter().all(|&p| p != 0 && p != seq.len() - 1));
        assert_eq!(ex.masked_ids[0], SOS_EOS);
        assert_eq!(*ex.masked_ids.last().unwrap(), SOS_EOS);
    }

    #[test]
    fn sequence_of_only_specials_selects_nothing() {
        let (vocab, _) = vocab_and_seq("x");
        let seq = TokenSequence {
            ids: vec![SOS_EOS, SOS_EOS],
        };
        let mut rng = DetRng::new(0, "m");
        let ex = apply_mask(&seq, &MaskingPolicy::default(), &mut rng, &vocab);
        assert_eq!(ex.k(), 0);
    }

    #[test]
    fn degenerate_policy_masks_every_data_position() {
        let (vocab, seq) = vocab_and_seq("hello");
        let policy = MaskingPolicy {
            select_ratio: 1.0,
            mask_fraction: 1.0,
            random_fraction: 0.0,
            keep_fraction: 0.0,
        };
        let mut rng = DetRng::new(5, "m");
        let ex = apply_mask(&seq, &policy, &mut rng, &vocab);
        assert_eq!(ex.k(), 5);
        for &p in &ex.positions {
            assert_eq!(ex.masked_ids[p], MASK);
        }
        assert_eq!(ex.positions, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn masking_is_deterministic_under_seed() {
        let (vocab, seq) = vocab_and_seq("deterministic masking");
        let policy = MaskingPolicy::default();
        let a = apply_mask(&seq, &policy, &mut DetRng::new(9, "m"), &vocab);
        let b = apply_mask(&seq, &policy, &mut DetRng::new(9, "m"), &vocab);
        assert_eq!(a, b);
    }

    #[test]
    fn masked_ids_reconstruct_from_positions_and_categories() {
        let (vocab, seq) = vocab_and_seq("reconstruction check text");
        let policy = MaskingPolicy::default();
        let mut rng = DetRng::new(3, "m");
        let ex = apply_mask(&seq, &policy, &mut rng, &vocab);
        let mut rebuilt = seq.ids.clone();
        for ((&pos, &target), &cat) in ex
            .positions
            .iter()
            .zip(&ex.targets)
            .zip(&ex.categories)
        {
            match cat {
                MaskCategory::Masked => rebuilt[pos] = MASK,
                MaskCategory::Random => rebuilt[pos] = ex.masked_ids[pos],
                MaskCategory::Kept => assert_eq!(ex.masked_ids[pos], target),
            }
        }
        assert_eq!(rebuilt, ex.masked_ids);
        // Outside the selected positions the sequence is untouched.
        for (pos, (&orig, &masked)) in seq.ids.iter().zip(&ex.masked_ids).enumerate() {
            if !ex.positions.contains(&pos) {
                assert_eq!(orig, masked);
            }
        }
    }

    #[test]
    fn category_shares_match_policy_over_many_positions() {
        // 10^6 positions: MASK 12.0% +- 0.2, random 1.5% +- 0.1, kept 1.5% +- 0.1.
        let (vocab, _) = vocab_and_seq("abcdefgh");
        let n = 1_000_000usize;
        let ids: Vec<usize> = (0..n).map(|i| 4 + (i % vocab.n_data_tokens())).collect();
        let mut seq_ids = vec![SOS_EOS];
        seq_ids.extend(ids);
        seq_ids.push(SOS_EOS);
        let seq = TokenSequence { ids: seq_ids };
        let policy = MaskingPolicy::default();
        let mut rng = DetRng::new(1234, "stats");
        let ex = apply_mask(&seq, &policy, &mut rng, &vocab);
        let count = |cat: MaskCategory| {
            ex.categories.iter().filter(|&&c| c == cat).count() as f64 / n as f64
        };
        let mask_share = count(MaskCategory::Masked);
        let random_share = count(MaskCategory::Random);
        let kept_share = count(MaskCategory::Kept);
        let total = ex.k() as f64 / n as f64;
        assert!((mask_share - 0.12).abs() < 0.002, "mask {mask_share}");
        assert!((random_share - 0.015).abs() < 0.001, "random {random_share}");
        assert!((kept_share - 0.015).abs() < 0.001, "kept {kept_share}");
        assert!((total - 0.15).abs() < 0.0025, "total {total}");
    }
}
