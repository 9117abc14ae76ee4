//! Closed word-level vocabulary and token sequences.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
/// Number of learnable-context tokens [CTX_0..CTX_31]; they occupy the
/// contiguous id block right after the four specials.
pub const NUM_CTX: usize = 32;
pub const CTX_BASE: u32 = 4;
/// First id available for lexicon words.
pub const FIRST_WORD: u32 = CTX_BASE + NUM_CTX as u32;

/// Token ids with padding visibility and span annotations for one text input.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// true = real token, false = padding (blocked in attention).
    pub visible: Vec<bool>,
    /// Prompt span [start, end), when rendered from a template.
    pub prompt_span: Option<(usize, usize)>,
    /// Answer span [start, end), when rendered from a template.
    pub answer_span: Option<(usize, usize)>,
    /// Positions currently holding [MASK] with a training target.
    pub mask_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let visible = ids.iter().map(|&id| id != PAD).collect();
        TokenSequence {
            ids,
            visible,
            prompt_span: None,
            answer_span: None,
            mask_positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with [PAD] up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.visible.push(false);
        }
    }
}

/// token → id map with fixed special ids; word ids are dense and
/// lexicographically ordered after the specials.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    word_to_id: BTreeMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Deterministic id assignment: specials, then [CTX_i], then sorted
    /// deduplicated words.
    pub fn build<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Result<Self> {
        let mut id_to_word: Vec<String> = Vec::new();
        id_to_word.push("[PAD]".to_string());
        id_to_word.push("[CLS]".to_string());
        id_to_word.push("[SEP]".to_string());
        id_to_word.push("[MASK]".to_string());
        for i in 0..NUM_CTX {
            id_to_word.push(alloc::format!("[CTX_{i}]"));
        }
        let mut sorted: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .collect();
        if sorted.is_empty() {
            return Err(CoreError::invalid("vocabulary word list is empty"));
        }
        sorted.sort();
        sorted.dedup();
        id_to_word.extend(sorted);

        let mut word_to_id = BTreeMap::new();
        for (id, w) in id_to_word.iter().enumerate() {
            word_to_id.insert(w.clone(), id as u32);
        }
        Ok(Vocabulary {
            word_to_id,
            id_to_word,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ctx_id(&self, i: usize) -> u32 {
        debug_assert!(i < NUM_CTX);
        CTX_BASE + i as u32
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.word_to_id
            .get(word)
            .copied()
            .ok_or_else(|| CoreError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> &str {
        &self.id_to_word[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        id < FIRST_WORD
    }

    /// `[CLS] w1 .. wn [SEP]`; the empty string gives `[CLS] [SEP]`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        ids.push(CLS);
        for word in text.split_whitespace() {
            ids.push(self.id(word)?);
        }
        ids.push(SEP);
        Ok(TokenSequence::from_ids(ids))
    }

    /// Content words joined by spaces; specials and padding are dropped.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let words: Vec<&str> = seq
            .ids
            .iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| self.word(id))
            .collect();
        words.join(" ")
    }
}
