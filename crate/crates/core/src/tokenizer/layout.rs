use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::bpe::{Vocab, CLS, PAD, SEP};

/// Encoder input: token ids with per-token segment ids and attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    /// `[CLS] seg0 [SEP] seg1 [SEP] ...` with segment id `i` over segment
    /// `i` and its closing `[SEP]` (the `[CLS]` belongs to segment 0).
    fn from_segments(segments: &[Vec<usize>]) -> Self {
        let mut ids = vec![CLS];
        let mut segment_ids = vec![0];
        for (s, seg) in segments.iter().enumerate() {
            ids.extend_from_slice(seg);
            ids.push(SEP);
            segment_ids.extend(core::iter::repeat(s).take(seg.len() + 1));
        }
        let attention_mask = vec![1; ids.len()];
        Self {
            ids,
            segment_ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Right-pads with `[PAD]` (segment 0, mask 0) up to `n` positions.
    pub fn padded(&self, n: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < n {
            out.ids.push(PAD);
            out.segment_ids.push(0);
            out.attention_mask.push(0);
        }
        out
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

fn check_capacity(max_len: usize, segments: usize) -> Result<usize> {
    let specials = segments + 1;
    if max_len < specials + segments {
        return Err(Error::Capacity(format!(
            "max_len {max_len} cannot hold {specials} special tokens plus one token for each of {segments} segments"
        )));
    }
    Ok(max_len - specials)
}

/// `[CLS] text [SEP]`, truncated to fit `max_len`.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let budget = check_capacity(max_len, 1)?;
    let mut ids = vocab.encode(text);
    ids.truncate(budget);
    Ok(TokenSequence::from_segments(&[ids]))
}

/// `[CLS] first [SEP] second [SEP]`, unpadded.
///
/// Over-long inputs lose tokens from the end of the longer segment. When both
/// segments are equally long one token is dropped from each, so swapping the
/// inputs always keeps the same tokens.
pub fn encode_pair(first: &str, second: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let budget = check_capacity(max_len, 2)?;
    let mut a = vocab.encode(first);
    let mut b = vocab.encode(second);
    while a.len() + b.len() > budget {
        match a.len().cmp(&b.len()) {
            core::cmp::Ordering::Greater => {
                a.pop();
            }
            core::cmp::Ordering::Less => {
                b.pop();
            }
            core::cmp::Ordering::Equal => {
                a.pop();
                b.pop();
            }
        }
    }
    Ok(TokenSequence::from_segments(&[a, b]))
}

/// `[CLS] statement [SEP] hint [SEP] option [SEP]`, unpadded. Truncation
/// removes tokens from the longest segment, earliest segment on ties.
pub fn encode_triple(
    statement: &str,
    hint: &str,
    option: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    let budget = check_capacity(max_len, 3)?;
    let mut segs = [vocab.encode(statement), vocab.encode(hint), vocab.encode(option)];
    while segs.iter().map(Vec::len).sum::<usize>() > budget {
        let longest = (0..3)
            .max_by(|&i, &j| segs[i].len().cmp(&segs[j].len()).then(j.cmp(&i)))
            .unwrap_or(0);
        segs[longest].pop();
    }
    Ok(TokenSequence::from_segments(&segs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_vocab;

    fn vocab() -> Vocab {
        train_vocab(
            &[
                "he put an elephant into the fridge",
                "he put a turkey into the fridge",
                "an elephant is much bigger than a fridge",
            ],
            120,
        )
        .unwrap()
    }

    fn sep_count(t: &TokenSequence) -> usize {
        t.ids.iter().filter(|&&i| i == SEP).count()
    }

    #[test]
    fn pair_layout() {
        let v = vocab();
        let t = encode_pair("he put a turkey", "into the fridge", &v, 64).unwrap();
        assert_eq!(t.ids[0], CLS);
        assert_eq!(sep_count(&t), 2);
        assert_eq!(*t.ids.last().unwrap(), SEP);
        let first_sep = t.ids.iter().position(|&i| i == SEP).unwrap();
        assert!(t.segment_ids[..=first_sep].iter().all(|&s| s == 0));
        assert!(t.segment_ids[first_sep + 1..].iter().all(|&s| s == 1));
        let padded = t.padded(40);
        assert_eq!(padded.len(), 40);
        assert_eq!(
            padded.attention_mask.iter().map(|&m| m as usize).sum::<usize>(),
            t.len()
        );
    }

    #[test]
    fn pair_swap_keeps_content() {
        let v = vocab();
        for max_len in [8, 9, 12, 64] {
            let st = encode_pair("he put an elephant into the fridge", "a turkey", &v, max_len).unwrap();
            let ts = encode_pair("a turkey", "he put an elephant into the fridge", &v, max_len).unwrap();
            let mut x: Vec<_> = st.ids.iter().filter(|&&i| !Vocab::is_special(i)).collect();
            let mut y: Vec<_> = ts.ids.iter().filter(|&&i| !Vocab::is_special(i)).collect();
            x.sort();
            y.sort();
            assert_eq!(x, y);
            assert!(st.len() <= max_len);
        }
    }

    #[test]
    fn triple_layout_and_segments() {
        let v = vocab();
        let (s, h, o) = ("he put an elephant into the fridge", "he put a turkey into the fridge", "an elephant is much bigger than a fridge");
        let t = encode_triple(s, h, o, &v, 128).unwrap();
        assert_eq!(sep_count(&t), 3);
        let (ls, lh, lo) = (v.encode(s).len(), v.encode(h).len(), v.encode(o).len());
        let count = |k| t.segment_ids.iter().filter(|&&x| x == k).count();
        assert_eq!(count(0), ls + 2);
        assert_eq!(count(1), lh + 1);
        assert_eq!(count(2), lo + 1);
    }

    #[test]
    fn empty_hint_is_legal() {
        let v = vocab();
        let t = encode_triple("he put a turkey", "", "a fridge", &v, 64).unwrap();
        let first = t.ids.iter().position(|&i| i == SEP).unwrap();
        assert_eq!(t.ids[first + 1], SEP);
        assert_eq!(sep_count(&t), 3);
    }

    #[test]
    fn truncation_and_capacity() {
        let v = vocab();
        let long = "he put an elephant into the fridge";
        let t = encode_triple(long, long, "a fridge", &v, 12).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(sep_count(&t), 3);
        assert!(matches!(encode_pair("a", "b", &v, 4), Err(Error::Capacity(_))));
        assert!(matches!(encode_triple("a", "b", "c", &v, 6), Err(Error::Capacity(_))));
    }
}
