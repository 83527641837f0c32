//! Text normalization, BPE subword vocabularies, and the special-token
//! layouts fed to the encoder.

mod bpe;
mod layout;

pub use bpe::{train_vocab, Vocab, CLS, PAD, SEP, SPECIAL_TOKENS, UNK, WORD_MARK};
pub use layout::{encode_pair, encode_single, encode_triple, TokenSequence};

use alloc::string::String;

/// Lowercases ASCII letters, drops every character outside ASCII
/// alphanumerics, ASCII punctuation and the space, then collapses runs of
/// spaces and trims both ends.
///
/// Tabs, newlines and all non-ASCII characters are removed rather than
/// turned into spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if !ch.is_ascii() {
            continue;
        }
        let ch = ch.to_ascii_lowercase();
        if ch == ' ' {
            pending_space = true;
        } else if ch.is_ascii_alphanumeric() || ch.is_ascii_punctuation() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_sentence() {
        assert_eq!(
            normalize("He put an Elephant into the fridge"),
            "he put an elephant into the fridge"
        );
    }

    #[test]
    fn removes_non_ascii_and_collapses() {
        assert_eq!(normalize("Héllo — wörld!"), "hllo wrld!");
        assert_eq!(normalize("  a\tb \n c  "), "ab c");
        assert_eq!(normalize("ÉÉÉ"), "");
    }

    #[test]
    fn idempotent_on_samples() {
        for s in ["Héllo — wörld!", "  x  Y z ", "a,b;c", ""] {
            let once = normalize(s);
            assert_eq!(normalize(&once), once);
        }
    }
}
