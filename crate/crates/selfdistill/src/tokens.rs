//! Character-level tokenizer over a fixed printable-ASCII alphabet.
//!
//! Token ids are stable across runs and platforms: the four special tokens
//! occupy ids 0..4 and every alphabet character maps to `4 + index` in
//! [`ALPHABET`]. All task formats are expressible in this alphabet.

use std::sync::OnceLock;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
const NUM_SPECIALS: u32 = 4;

/// Ordered character set; ids are assigned in this order.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789:+-*/=(),.;_\"{}[]<>%#@!?&'";

/// Fixed character vocabulary shared by every task and policy in the crate.
pub struct Vocab {
    chars: Vec<char>,
    ascii_to_id: [i16; 128],
}

impl Vocab {
    fn build() -> Vocab {
        let chars: Vec<char> = ALPHABET.chars().collect();
        let mut ascii_to_id = [-1i16; 128];
        for (i, &c) in chars.iter().enumerate() {
            ascii_to_id[c as usize] = (NUM_SPECIALS as usize + i) as i16;
        }
        Vocab { chars, ascii_to_id }
    }

    /// The process-wide reference vocabulary.
    pub fn reference() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    /// Total vocabulary size including the special tokens.
    pub fn size(&self) -> usize {
        NUM_SPECIALS as usize + self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                let idx = c as usize;
                if idx < 128 && self.ascii_to_id[idx] >= 0 {
                    Ok(self.ascii_to_id[idx] as u32)
                } else {
                    Err(Error::Config(format!("character {c:?} not in alphabet")))
                }
            })
            .collect()
    }

    /// Decodes character tokens; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id >= NUM_SPECIALS {
                    self.chars.get((id - NUM_SPECIALS) as usize).copied()
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIALS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_plain_text() {
        let v = Vocab::reference();
        let ids = v.encode("rev: abc = cba").unwrap();
        assert_eq!(v.decode(&ids), "rev: abc = cba");
        assert!(ids.iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn specials_are_distinct_and_dropped_on_decode() {
        let v = Vocab::reference();
        assert_eq!(v.decode(&[BOS, EOS, SEP, PAD]), "");
        let mut ids = v.encode("ab").unwrap();
        ids.insert(1, SEP);
        assert_eq!(v.decode(&ids), "ab");
    }

    #[test]
    fn rejects_out_of_alphabet() {
        assert!(Vocab::reference().encode("ABC").is_err());
        assert!(Vocab::reference().encode("ü").is_err());
    }

    #[test]
    fn vocab_size_near_seventy() {
        let n = Vocab::reference().size();
        assert!((60..=80).contains(&n), "vocab size {n}");
    }

    #[test]
    fn ids_are_stable() {
        let v = Vocab::reference();
        assert_eq!(v.encode(" ").unwrap(), vec![4]);
        assert_eq!(v.encode("a").unwrap(), vec![5]);
    }
}
