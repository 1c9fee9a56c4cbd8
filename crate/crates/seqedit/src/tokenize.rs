//! Tokenizers: a fixed 24-token protein alphabet and a word-level biotext
//! vocabulary, both producing fixed-length id arrays with attention masks.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// The 20 canonical amino acids, in the fixed order that assigns ids 4..=23.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V',
    'W', 'Y',
];

/// Protein vocabulary size: 4 reserved tokens + 20 residues. 'X' maps to UNK.
pub const PROTEIN_VOCAB_SIZE: usize = 24;

/// Token ids padded to a fixed length, with the matching attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub true_length: usize,
}

impl TokenizedSeq {
    fn from_unpadded(mut ids: Vec<u32>, max_len: usize) -> Self {
        // Truncation keeps the prefix but always ends on EOS so the decoder
        // sees a stop symbol in every training target.
        if ids.len() > max_len {
            ids.truncate(max_len);
            ids[max_len - 1] = EOS;
        }
        let true_length = ids.len();
        let mut mask = vec![true; true_length];
        ids.resize(max_len, PAD);
        mask.resize(max_len, false);
        TokenizedSeq {
            ids,
            mask,
            true_length,
        }
    }

    /// The non-PAD prefix.
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }

    /// Check the PAD/mask consistency invariant.
    pub fn is_consistent(&self) -> bool {
        self.ids.len() == self.mask.len()
            && self.true_length <= self.ids.len()
            && self
                .ids
                .iter()
                .zip(&self.mask)
                .enumerate()
                .all(|(i, (&id, &m))| {
                    if i < self.true_length {
                        m
                    } else {
                        id == PAD && !m
                    }
                })
    }
}

/// Residue → token id (4..=23); 'X' (unknown residue) → UNK.
pub fn residue_id(ch: char) -> Option<u32> {
    if ch == 'X' {
        return Some(UNK);
    }
    AMINO_ACIDS
        .iter()
        .position(|&a| a == ch)
        .map(|i| (i + 4) as u32)
}

/// Token id → residue character; UNK decodes to 'X'.
pub fn id_residue(id: u32) -> Option<char> {
    if id == UNK {
        return Some('X');
    }
    let idx = id as usize;
    if (4..PROTEIN_VOCAB_SIZE).contains(&idx) {
        Some(AMINO_ACIDS[idx - 4])
    } else {
        None
    }
}

/// Validate a sequence over the {20 amino acids, X} alphabet; errors name
/// the first offending character and its position.
pub fn validate_sequence(seq: &str) -> Result<()> {
    for (pos, ch) in seq.chars().enumerate() {
        if residue_id(ch).is_none() {
            return Err(Error::IllegalResidue { ch, pos });
        }
    }
    Ok(())
}

/// Encode a protein sequence as [BOS, residues..., EOS], truncated so the
/// last real token is always EOS, then PAD-filled to `max_len`.
pub fn encode_protein(seq: &str, max_len: usize) -> Result<TokenizedSeq> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "protein max_len {max_len} leaves no room for BOS/EOS"
        )));
    }
    let mut ids = Vec::with_capacity(seq.len() + 2);
    ids.push(BOS);
    for (pos, ch) in seq.chars().enumerate() {
        let id = residue_id(ch).ok_or(Error::IllegalResidue { ch, pos })?;
        ids.push(id);
    }
    ids.push(EOS);
    Ok(TokenizedSeq::from_unpadded(ids, max_len))
}

/// Decode token ids back to a residue string: everything after an optional
/// leading BOS up to the first EOS; with no EOS, everything after BOS.
pub fn decode_protein(ids: &[u32]) -> String {
    let mut out = String::new();
    let start = usize::from(ids.first() == Some(&BOS));
    for &id in &ids[start.min(ids.len())..] {
        if id == EOS {
            break;
        }
        if let Some(ch) = id_residue(id) {
            out.push(ch);
        }
    }
    out
}

/// Word-level biotext vocabulary. Ids are dense: the 4 reserved tokens
/// first, then content tokens ordered by descending frequency (ties broken
/// lexicographically), so a rebuild on the same corpus is identical.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<I, S>(texts: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in split_words(text.as_ref()) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; the line number is the id, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(t, r)| t != r)
        {
            return Err(Error::InvalidArgument(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Lowercase and split on anything that is not ASCII alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Build a vocabulary from the biotext column of a pair file.
pub fn build_text_vocab(reader: impl BufRead, max_size: usize) -> Result<Vocabulary> {
    let mut texts = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        // Pair files are accession \t sequence \t biotext.
        let text = line.splitn(3, '\t').nth(2).unwrap_or("").to_string();
        texts.push(text);
    }
    Ok(Vocabulary::build(texts, max_size))
}

/// Encode biotext: lowercase word split, OOV → UNK, BOS/EOS framing,
/// pad/truncate to `max_len`. Empty text encodes to [BOS, EOS].
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedSeq> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "text max_len {max_len} leaves no room for BOS/EOS"
        )));
    }
    let mut ids = Vec::new();
    ids.push(BOS);
    for word in split_words(text) {
        ids.push(vocab.id_of(&word).unwrap_or(UNK));
    }
    ids.push(EOS);
    Ok(TokenizedSeq::from_unpadded(ids, max_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_single_residue() {
        let tok = encode_protein("A", 6).unwrap();
        assert_eq!(tok.ids, vec![BOS, 4, EOS, PAD, PAD, PAD]);
        assert_eq!(tok.true_length, 3);
        assert!(tok.is_consistent());
    }

    #[test]
    fn illegal_residue_names_position_and_char() {
        let err = encode_protein("AB", 8).unwrap_err();
        match err {
            Error::IllegalResidue { ch, pos } => {
                assert_eq!(ch, 'B');
                assert_eq!(pos, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn truncation_forces_terminal_eos() {
        let seq: String = std::iter::repeat('A').take(2000).collect();
        let tok = encode_protein(&seq, 1024).unwrap();
        assert_eq!(tok.true_length, 1024);
        assert_eq!(tok.ids[1023], EOS);
        assert!(tok.is_consistent());
    }

    #[test]
    fn x_maps_to_unk_and_back() {
        let tok = encode_protein("AXC", 8).unwrap();
        assert_eq!(tok.ids[2], UNK);
        assert_eq!(decode_protein(&tok.ids), "AXC");
    }

    #[test]
    fn decode_without_eos_takes_everything_after_bos() {
        assert_eq!(decode_protein(&[BOS, 4, 5, 6]), "ACD");
        assert_eq!(decode_protein(&[BOS, EOS]), "");
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let vocab = Vocabulary::build(["hello world"], 10);
        let tok = encode_text("", &vocab, 5).unwrap();
        assert_eq!(tok.real_ids(), &[BOS, EOS]);
    }

    #[test]
    fn case_folding_gives_identical_ids() {
        let vocab = Vocabulary::build(["kinase kinase"], 10);
        let tok = encode_text("Kinase kinase", &vocab, 8).unwrap();
        assert_eq!(tok.ids[1], tok.ids[2]);
        assert_ne!(tok.ids[1], UNK);
    }

    #[test]
    fn oov_becomes_unk() {
        let vocab = Vocabulary::build(["alpha beta"], 10);
        let tok = encode_text("gamma", &vocab, 8).unwrap();
        assert_eq!(tok.ids[1], UNK);
    }

    #[test]
    fn vocab_keeps_most_frequent_with_lexicographic_ties() {
        let vocab = Vocabulary::build(["a a b"], 1);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        // Tie between x and y: x wins lexicographically.
        let tied = Vocabulary::build(["x y"], 1);
        assert!(tied.contains("x"));
        assert!(!tied.contains("y"));
    }

    #[test]
    fn vocab_rebuild_is_deterministic() {
        let corpus = ["some words appear more", "words appear twice", "some more"];
        let a = Vocabulary::build(corpus, 6);
        let b = Vocabulary::build(corpus, 6);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = Vocabulary::build(["alpha beta gamma"], 8);
        let parsed = Vocabulary::from_text(&vocab.to_text()).unwrap();
        assert_eq!(parsed.to_text(), vocab.to_text());
        assert_eq!(parsed.id_of("alpha"), vocab.id_of("alpha"));
    }

    proptest! {
        #[test]
        fn protein_round_trip_below_truncation(seq in "[ACDEFGHIKLMNPQRSTVWYX]{0,60}") {
            let tok = encode_protein(&seq, 64).unwrap();
            prop_assert!(tok.is_consistent());
            prop_assert_eq!(decode_protein(&tok.ids), seq);
        }

        #[test]
        fn tokenization_is_deterministic(seq in "[ACDEFGHIKLMNPQRSTVWY]{1,100}") {
            let a = encode_protein(&seq, 48).unwrap();
            let b = encode_protein(&seq, 48).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
