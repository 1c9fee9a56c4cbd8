//! Synthetic composition-description corpora.
//!
//! Texts deterministically describe sequence composition (dominant residue,
//! a secondary residue, and a length bucket), so cross-modal alignment is
//! learnable at desk scale. The editing variant mixes matched pairs with
//! aspirational ones whose instruction describes a composition the sequence
//! does not yet have.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Pair;
use crate::tokenize::AMINO_ACIDS;

/// Full residue names, indexable in parallel with [`AMINO_ACIDS`].
pub const RESIDUE_NAMES: [&str; 20] = [
    "alanine",
    "cysteine",
    "aspartate",
    "glutamate",
    "phenylalanine",
    "glycine",
    "histidine",
    "isoleucine",
    "lysine",
    "leucine",
    "methionine",
    "asparagine",
    "proline",
    "glutamine",
    "arginine",
    "serine",
    "threonine",
    "valine",
    "tryptophan",
    "tyrosine",
];

pub fn residue_name(residue: char) -> Option<&'static str> {
    AMINO_ACIDS
        .iter()
        .position(|&c| c == residue)
        .map(|i| RESIDUE_NAMES[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [
        LengthBucket::Short,
        LengthBucket::Medium,
        LengthBucket::Long,
    ];

    pub fn word(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Medium => "medium",
            LengthBucket::Long => "long",
        }
    }

    /// Length ranges leave gaps between buckets so they stay separable.
    pub fn range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            LengthBucket::Short => 16..=24,
            LengthBucket::Medium => 28..=36,
            LengthBucket::Long => 40..=48,
        }
    }
}

/// The fixed instruction template shared by pretraining and editing data.
pub fn composition_text(dominant: char, secondary: char, bucket: LengthBucket) -> String {
    format!(
        "mostly {} protein with some {} and {} length",
        residue_name(dominant).expect("canonical residue"),
        residue_name(secondary).expect("canonical residue"),
        bucket.word()
    )
}

/// Sample a sequence of `len` residues: `dominant` with probability
/// `dominant_prob`, `secondary` with `secondary_prob`, the rest uniform.
pub fn composition_sequence(
    rng: &mut ChaCha8Rng,
    len: usize,
    dominant: char,
    dominant_prob: f64,
    secondary: char,
    secondary_prob: f64,
) -> String {
    (0..len)
        .map(|_| {
            let draw: f64 = rng.gen();
            if draw < dominant_prob {
                dominant
            } else if draw < dominant_prob + secondary_prob {
                secondary
            } else {
                loop {
                    let c = AMINO_ACIDS[rng.gen_range(0..AMINO_ACIDS.len())];
                    if c != dominant && c != secondary {
                        break c;
                    }
                }
            }
        })
        .collect()
}

/// Secondary residues come from a fixed pool; keeping the attribute space
/// small enough that training sees most combinations.
pub const SECONDARY_POOL: [char; 10] = ['C', 'E', 'G', 'I', 'L', 'N', 'Q', 'S', 'V', 'Y'];

fn draw_attributes(rng: &mut ChaCha8Rng) -> (char, char, LengthBucket, usize) {
    let dominant = AMINO_ACIDS[rng.gen_range(0..AMINO_ACIDS.len())];
    let secondary = loop {
        let c = SECONDARY_POOL[rng.gen_range(0..SECONDARY_POOL.len())];
        if c != dominant {
            break c;
        }
    };
    let bucket = LengthBucket::ALL[rng.gen_range(0..3)];
    let len = rng.gen_range(*bucket.range().start()..=*bucket.range().end());
    (dominant, secondary, bucket, len)
}

/// Aligned pairs whose text truthfully describes the sequence composition.
pub fn generate_composition_corpus(n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (dominant, secondary, bucket, len) = draw_attributes(&mut rng);
            let sequence = composition_sequence(&mut rng, len, dominant, 0.62, secondary, 0.28);
            Pair {
                accession: format!("SYN{i:05}"),
                sequence,
                biotext: composition_text(dominant, secondary, bucket),
            }
        })
        .collect()
}

/// Editing pairs: half truthful (the instruction matches the sequence), half
/// aspirational (the sequence carries little of the instructed residue, so
/// the hinge term is active and teaches actual edits).
pub fn generate_editing_corpus(n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (dominant, secondary, bucket, len) = draw_attributes(&mut rng);
            let matched = i % 2 == 0;
            let dominant_prob = if matched { 0.62 } else { 0.08 };
            let sequence =
                composition_sequence(&mut rng, len, dominant, dominant_prob, secondary, 0.2);
            Pair {
                accession: format!("EDT{i:05}"),
                sequence,
                biotext: composition_text(dominant, secondary, bucket),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let a = generate_composition_corpus(16, 3);
        let b = generate_composition_corpus(16, 3);
        assert_eq!(a, b);
        let c = generate_composition_corpus(16, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn sequences_respect_their_bucket() {
        for pair in generate_composition_corpus(64, 1) {
            let len = pair.sequence.chars().count();
            let bucket_word = pair.biotext.rsplit(' ').nth(1).unwrap().to_string();
            let bucket = LengthBucket::ALL
                .into_iter()
                .find(|b| b.word() == bucket_word)
                .unwrap();
            assert!(bucket.range().contains(&len), "{len} not in {bucket_word}");
        }
    }

    #[test]
    fn dominant_residue_really_dominates() {
        let pairs = generate_composition_corpus(64, 7);
        let mut dominated = 0usize;
        for pair in &pairs {
            let name = pair.biotext.split(' ').nth(1).unwrap();
            let idx = RESIDUE_NAMES.iter().position(|&n| n == name).unwrap();
            let dominant = AMINO_ACIDS[idx];
            let count = pair.sequence.chars().filter(|&c| c == dominant).count();
            if count as f64 >= 0.35 * pair.sequence.len() as f64 {
                dominated += 1;
            }
        }
        assert!(dominated >= 58, "only {dominated}/64 dominated");
    }

    #[test]
    fn editing_corpus_mixes_matched_and_aspirational() {
        let pairs = generate_editing_corpus(32, 5);
        let mut low = 0usize;
        for (i, pair) in pairs.iter().enumerate() {
            let name = pair.biotext.split(' ').nth(1).unwrap();
            let idx = RESIDUE_NAMES.iter().position(|&n| n == name).unwrap();
            let dominant = AMINO_ACIDS[idx];
            let frac = pair.sequence.chars().filter(|&c| c == dominant).count() as f64
                / pair.sequence.len() as f64;
            if i % 2 == 1 {
                assert!(frac < 0.4, "aspirational pair {i} has fraction {frac}");
                low += 1;
            }
        }
        assert_eq!(low, 16);
    }

    #[test]
    fn all_sequences_are_valid() {
        for pair in generate_editing_corpus(32, 9) {
            assert!(crate::tokenize::validate_sequence(&pair.sequence).is_ok());
        }
    }
}
