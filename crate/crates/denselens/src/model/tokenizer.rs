//! Byte-level tokenizer shared by all model files.
//!
//! Token ids 0..=2 are specials (pad, classification, end-of-sequence);
//! each UTF-8 byte b maps to id b + 3. Encoder-only models prepend the
//! classification token; decoder-only models append the end-of-sequence
//! token so last-token pooling lands on it.

use super::Architecture;

pub const PAD_TOKEN: usize = 0;
pub const CLS_TOKEN: usize = 1;
pub const EOS_TOKEN: usize = 2;
const SPECIAL_COUNT: usize = 3;

/// Smallest legal vocabulary: all byte values plus the specials.
pub const MIN_VOCAB_SIZE: usize = 256 + SPECIAL_COUNT;

/// Result of tokenizing one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Tokenize `text` for the given architecture, truncating content bytes so
/// the full sequence (including the special token) fits `max_seq_len`.
pub fn tokenize(text: &str, architecture: Architecture, max_seq_len: usize) -> TokenizedText {
    let bytes = text.as_bytes();
    let budget = max_seq_len - 1; // one slot reserved for the special token
    let truncated = bytes.len() > budget;
    let content = &bytes[..bytes.len().min(budget)];

    let mut ids = Vec::with_capacity(content.len() + 1);
    match architecture {
        Architecture::EncoderOnly => {
            ids.push(CLS_TOKEN);
            ids.extend(content.iter().map(|&b| b as usize + SPECIAL_COUNT));
        }
        Architecture::DecoderOnly => {
            ids.extend(content.iter().map(|&b| b as usize + SPECIAL_COUNT));
            ids.push(EOS_TOKEN);
        }
    }
    TokenizedText { ids, truncated }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_gets_leading_cls() {
        let t = tokenize("ab", Architecture::EncoderOnly, 16);
        assert_eq!(t.ids, vec![CLS_TOKEN, b'a' as usize + 3, b'b' as usize + 3]);
        assert!(!t.truncated);
    }

    #[test]
    fn decoder_gets_trailing_eos() {
        let t = tokenize("ab", Architecture::DecoderOnly, 16);
        assert_eq!(t.ids, vec![b'a' as usize + 3, b'b' as usize + 3, EOS_TOKEN]);
    }

    #[test]
    fn truncation_keeps_special_token_and_caps_length() {
        let text = "x".repeat(100);
        let enc = tokenize(&text, Architecture::EncoderOnly, 8);
        assert_eq!(enc.ids.len(), 8);
        assert!(enc.truncated);
        assert_eq!(enc.ids[0], CLS_TOKEN);

        let dec = tokenize(&text, Architecture::DecoderOnly, 8);
        assert_eq!(dec.ids.len(), 8);
        assert!(dec.truncated);
        assert_eq!(*dec.ids.last().unwrap(), EOS_TOKEN);
    }
}
