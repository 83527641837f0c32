use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::normalize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Prefix symbol marking the start of a word. Normalized text is pure ASCII,
/// so this can never collide with input characters.
pub const WORD_MARK: char = '\u{2581}';

/// Byte-pair-encoding vocabulary.
///
/// Ids `0..4` are the special tokens, followed by the base symbols (word
/// marker plus every character seen in training) and then one id per merge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    merges: Vec<(usize, usize)>,
    merge_rank: BTreeMap<(usize, usize), (usize, usize)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols = Vec::with_capacity(word.len() + 1);
    symbols.push(WORD_MARK.to_string());
    symbols.extend(word.chars().map(|c| c.to_string()));
    symbols
}

/// Learns a BPE vocabulary of at most `target_size` entries by repeatedly
/// merging the most frequent adjacent symbol pair. Ties go to the pair with
/// the smallest ids, so training is deterministic.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Input("vocabulary corpus is empty".into()));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for word in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *word_counts.entry(word.to_string()).or_default() += 1;
        }
    }
    let mut alphabet: Vec<String> = word_counts
        .keys()
        .flat_map(|w| w.chars())
        .map(|c| c.to_string())
        .collect();
    alphabet.push(WORD_MARK.to_string());
    alphabet.sort();
    alphabet.dedup();

    let base = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size <= base {
        return Err(Error::Input(format!(
            "target size {target_size} must exceed {base} special and base symbols"
        )));
    }

    let mut vocab = Vocab::empty();
    for s in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(alphabet) {
        vocab.push_token(s);
    }

    let mut words: Vec<(Vec<usize>, usize)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let ids = word_symbols(w).iter().map(|s| vocab.index[s]).collect();
            (ids, c)
        })
        .collect();

    while vocab.tokens.len() < target_size {
        let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (ids, count) in &words {
            for pair in ids.windows(2) {
                *pairs.entry((pair[0], pair[1])).or_default() += count;
            }
        }
        // max count, smallest pair on ties (BTreeMap iterates ascending)
        let Some((&best, _)) = pairs
            .iter()
            .fold(None, |acc: Option<(&(usize, usize), &usize)>, item| match acc {
                Some(a) if a.1 >= item.1 => Some(a),
                _ => Some(item),
            })
        else {
            break;
        };
        let merged = format!("{}{}", vocab.tokens[best.0], vocab.tokens[best.1]);
        let new_id = match vocab.index.get(&merged) {
            Some(&id) => id,
            None => vocab.push_token(merged),
        };
        vocab.push_merge(best, new_id);
        for (ids, _) in &mut words {
            *ids = apply_merge(ids, best, new_id);
        }
    }
    Ok(vocab)
}

fn apply_merge(ids: &[usize], pair: (usize, usize), new_id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

impl Vocab {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
            merges: Vec::new(),
            merge_rank: BTreeMap::new(),
        }
    }

    fn push_token(&mut self, token: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    fn push_merge(&mut self, pair: (usize, usize), id: usize) {
        self.merge_rank.insert(pair, (self.merges.len(), id));
        self.merges.push(pair);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let mut ids: Vec<usize> = word_symbols(word)
            .iter()
            .map(|s| self.index.get(s).copied().unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min_by_key(|&(rank, _, _)| rank);
            match best {
                Some((_, pair, id)) => ids = apply_merge(&ids, pair, id),
                None => break,
            }
        }
        out.extend(ids);
    }

    /// Normalizes `text` and segments it into subword ids. Characters never
    /// seen in training map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Joins subwords back into text, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut joined = String::new();
        for &id in ids {
            if Self::is_special(id) {
                continue;
            }
            if let Some(tok) = self.token(id) {
                joined.push_str(tok);
            }
        }
        let spaced: String = joined
            .chars()
            .map(|c| if c == WORD_MARK { ' ' } else { c })
            .collect();
        spaced.trim_start().to_string()
    }

    /// One token per line in id order.
    pub fn to_vocab_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One `left right` merge per line in rank order.
    pub fn to_merges_text(&self) -> String {
        let mut s = String::new();
        for &(a, b) in &self.merges {
            s.push_str(&self.tokens[a]);
            s.push(' ');
            s.push_str(&self.tokens[b]);
            s.push('\n');
        }
        s
    }

    /// Parses the output of [`Vocab::to_vocab_text`] and
    /// [`Vocab::to_merges_text`].
    pub fn from_texts(vocab_text: &str, merges_text: &str) -> Result<Self> {
        let mut vocab = Vocab::empty();
        for (i, line) in vocab_text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty token".into(),
                });
            }
            if i < SPECIAL_TOKENS.len() && line != SPECIAL_TOKENS[i] {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected special token {}", SPECIAL_TOKENS[i]),
                });
            }
            if vocab.index.contains_key(line) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {line:?}"),
                });
            }
            vocab.push_token(line.to_string());
        }
        if vocab.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Parse {
                line: vocab.len() + 1,
                message: "vocabulary is missing special tokens".into(),
            });
        }
        for (i, line) in merges_text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| parse_err("expected `left right`".into()))?;
            let left = vocab.id(a).ok_or_else(|| parse_err(format!("unknown token {a:?}")))?;
            let right = vocab.id(b).ok_or_else(|| parse_err(format!("unknown token {b:?}")))?;
            let merged = format!("{a}{b}");
            let id = vocab
                .id(&merged)
                .ok_or_else(|| parse_err(format!("merge result {merged:?} not in vocabulary")))?;
            vocab.push_merge((left, right), id);
        }
        Ok(vocab)
    }

    /// Fraction of `[UNK]` ids when encoding `texts`.
    pub fn unk_rate<S: AsRef<str>>(&self, texts: &[S]) -> f64 {
        let mut total = 0usize;
        let mut unk = 0usize;
        for t in texts {
            let ids = self.encode(t.as_ref());
            total += ids.len();
            unk += ids.iter().filter(|&&i| i == UNK).count();
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_word_becomes_single_subword() {
        let corpus = vec!["refrigerator"; 20];
        let vocab = train_vocab(&corpus, 300).unwrap();
        let ids = vocab.encode("refrigerator");
        assert_eq!(ids.len(), 1);
        assert_eq!(vocab.token(ids[0]), Some("\u{2581}refrigerator"));
    }

    #[test]
    fn corpus_characters_never_unk() {
        let vocab = train_vocab(&["the cat sat on the mat", "a dog ate bread"], 40).unwrap();
        let ids = vocab.encode("bad goat tomb");
        assert!(!ids.contains(&UNK));
        assert_eq!(vocab.decode(&ids), "bad goat tomb");
        assert!(vocab.encode("xyz").contains(&UNK));
    }

    #[test]
    fn empty_corpus_and_tiny_target_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(train_vocab(&empty, 100), Err(Error::Input(_))));
        assert!(matches!(train_vocab(&["abc"], 6), Err(Error::Input(_))));
    }

    #[test]
    fn specials_are_never_produced() {
        let vocab = train_vocab(&["[cls] [sep] [pad] [unk] text"], 60).unwrap();
        let ids = vocab.encode("[CLS] [SEP] [PAD] [UNK]");
        assert!(ids.iter().all(|&i| !Vocab::is_special(i)));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let vocab = train_vocab(&["he put an elephant into the fridge", "he put a turkey in the fridge"], 80).unwrap();
        let (v, m) = (vocab.to_vocab_text(), vocab.to_merges_text());
        let back = Vocab::from_texts(&v, &m).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.to_vocab_text(), v);
        assert_eq!(back.to_merges_text(), m);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(Vocab::from_texts("[PAD]\n[UNK]\n", "").is_err());
        assert!(Vocab::from_texts("[PAD]\n[UNK]\n[CLS]\n[SEP]\na\n", "a b\n").is_err());
    }
}
