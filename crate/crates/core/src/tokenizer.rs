//! WordPiece tokenization of search phrases into padded, masked token-id
//! sequences.
//!
//! Greedy longest-match-first against a line-per-token vocabulary,
//! continuations prefixed `##`, whole word falling back to `[UNK]` when any
//! position fails to match. Uncased by default (lowercase before matching);
//! a cased vocabulary can disable that.

use std::collections::HashMap;
use std::path::Path;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Words longer than this many characters become `[UNK]` outright.
pub const MAX_WORD_CHARS: usize = 100;

const CONTINUATION: &str = "##";

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("failed to read vocab {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("duplicate token `{token}` at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary is missing required special token `{0}`")]
    MissingSpecial(String),
    #[error("`[PAD]` must be the first vocabulary entry (id 0), found it at id {0}")]
    PadNotFirst(usize),
    #[error("max_len must be at least 2 (CLS and SEP), got {0}")]
    MaxLenTooSmall(usize),
}

/// Immutable token list with dense ids (line number = id) and the four
/// required specials. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pad_id: usize,
    unk_id: usize,
    cls_id: usize,
    sep_id: usize,
    lowercase: bool,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        let special = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| TokenizerError::MissingSpecial(name.to_string()))
        };
        let pad_id = special(PAD_TOKEN)?;
        if pad_id != 0 {
            return Err(TokenizerError::PadNotFirst(pad_id));
        }
        Ok(Self {
            unk_id: special(UNK_TOKEN)?,
            cls_id: special(CLS_TOKEN)?,
            sep_id: special(SEP_TOKEN)?,
            pad_id,
            tokens,
            ids,
            lowercase: true,
        })
    }

    /// One UTF-8 token per LF-separated line; line index = token id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// Disable lowercasing for cased vocabularies.
    pub fn set_lowercase(&mut self, lowercase: bool) {
        self.lowercase = lowercase;
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
        self.ids.get(token).copied()
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn cls_id(&self) -> usize {
        self.cls_id
    }

    pub fn sep_id(&self) -> usize {
        self.sep_id
    }

    /// Greedy longest-match word split; see [`wordpiece`].
    pub fn wordpiece(&self, word: &str) -> Vec<String> {
        wordpiece(word, self)
    }

    /// Full pipeline: pre-tokenize, wordpiece each word, wrap with
    /// `[CLS]`/`[SEP]`, truncate to `max_len`, pad and mask.
    pub fn encode(&self, phrase: &str, max_len: usize) -> Result<TokenSequence, TokenizerError> {
        if max_len < 2 {
            return Err(TokenizerError::MaxLenTooSmall(max_len));
        }
        let mut piece_ids = Vec::new();
        for word in pre_tokenize_with(phrase, self.lowercase) {
            for piece in self.wordpiece(&word) {
                piece_ids.push(self.ids[&piece]);
            }
        }
        piece_ids.truncate(max_len - 2);

        let true_length = piece_ids.len() + 2;
        let mut ids = Vec::with_capacity(max_len);
        ids.push(self.cls_id);
        ids.extend(piece_ids);
        ids.push(self.sep_id);
        ids.resize(max_len, self.pad_id);

        let mut mask = vec![0u8; max_len];
        mask[..true_length].fill(1);
        Ok(TokenSequence {
            ids,
            mask,
            true_length,
        })
    }
}

/// Padded, masked token-id sequence: `[CLS] pieces.. [SEP] [PAD]..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }
}

/// Lowercase (optionally), split on Unicode whitespace, and split each
/// punctuation character into its own word.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    pre_tokenize_with(text, true)
}

pub fn pre_tokenize_with(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first subword split. Continuation pieces carry the
/// `##` prefix. If any position fails to match, or the word is longer than
/// [`MAX_WORD_CHARS`], the whole word becomes `[UNK]`.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
        return vec![UNK_TOKEN.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched: Option<String> = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION);
            }
            if vocab.id(&candidate).is_some() {
                matched = Some(candidate);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK_TOKEN.to_string()],
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    #[test]
    fn load_assigns_line_numbers_as_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nplay\n##er\n").unwrap();
        let v = Vocabulary::load(&path).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("play"), Some(4));
        assert_eq!(v.id("##er"), Some(5));
        assert_eq!(v.pad_id(), 0);
    }

    #[test]
    fn load_rejects_missing_special() {
        let err = Vocabulary::from_tokens(vec![
            "[PAD]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
            "play".into(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("[UNK]"), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_token() {
        let err = Vocabulary::from_tokens(vec![
            "[PAD]".into(),
            "[UNK]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
            "play".into(),
            "play".into(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("play"), "{err}");
    }

    #[test]
    fn load_rejects_pad_not_first() {
        let err = Vocabulary::from_tokens(vec![
            "[UNK]".into(),
            "[PAD]".into(),
            "[CLS]".into(),
            "[SEP]".into(),
        ])
        .unwrap_err();
        assert!(matches!(err, TokenizerError::PadNotFirst(1)));
    }

    #[test]
    fn pre_tokenize_cases() {
        assert_eq!(pre_tokenize("Fun Game!"), vec!["fun", "game", "!"]);
        assert_eq!(pre_tokenize(""), Vec::<String>::new());
        assert_eq!(pre_tokenize("a  b"), vec!["a", "b"]);
        assert_eq!(pre_tokenize("don't stop"), vec!["don", "'", "t", "stop"]);
        assert_eq!(pre_tokenize("  \t\n "), Vec::<String>::new());
    }

    #[test]
    fn wordpiece_greedy_split() {
        let v = vocab(&["play", "##er", "pl"]);
        assert_eq!(v.wordpiece("player"), vec!["play", "##er"]);
    }

    #[test]
    fn wordpiece_whole_token() {
        let v = vocab(&["play"]);
        assert_eq!(v.wordpiece("play"), vec!["play"]);
    }

    #[test]
    fn wordpiece_unmatched_becomes_unk() {
        let v = vocab(&["play", "##er"]);
        assert_eq!(v.wordpiece("xyzzy"), vec![UNK_TOKEN.to_string()]);
        // A match that strands the tail also collapses to a single UNK.
        assert_eq!(v.wordpiece("playq"), vec![UNK_TOKEN.to_string()]);
    }

    #[test]
    fn wordpiece_overlong_word_is_unk() {
        let v = vocab(&["a", "##a"]);
        let long: String = std::iter::repeat('a').take(MAX_WORD_CHARS + 1).collect();
        assert_eq!(v.wordpiece(&long), vec![UNK_TOKEN.to_string()]);
        let at_limit: String = std::iter::repeat('a').take(MAX_WORD_CHARS).collect();
        assert_eq!(v.wordpiece(&at_limit).first().map(String::as_str), Some("a"));
    }

    #[test]
    fn encode_pads_and_masks() {
        let v = vocab(&["play", "##er"]);
        let seq = v.encode("player", 6).unwrap();
        assert_eq!(
            seq.ids,
            vec![v.cls_id(), v.id("play").unwrap(), v.id("##er").unwrap(), v.sep_id(), 0, 0]
        );
        assert_eq!(seq.mask, vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(seq.true_length, 4);
    }

    #[test]
    fn encode_empty_phrase() {
        let v = vocab(&[]);
        let seq = v.encode("", 5).unwrap();
        assert_eq!(seq.ids, vec![v.cls_id(), v.sep_id(), 0, 0, 0]);
        assert_eq!(seq.true_length, 2);
    }

    #[test]
    fn encode_truncates_to_max_len_with_final_sep() {
        let v = vocab(&["a"]);
        let seq = v.encode("a a a a a a a a", 4).unwrap();
        assert_eq!(seq.ids.len(), 4);
        assert_eq!(seq.ids[0], v.cls_id());
        assert_eq!(seq.ids[3], v.sep_id());
        assert_eq!(seq.true_length, 4);
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        let v = vocab(&[]);
        assert!(matches!(
            v.encode("x", 1),
            Err(TokenizerError::MaxLenTooSmall(1))
        ));
    }

    #[test]
    fn cased_mode_skips_lowercasing() {
        let mut v = vocab(&["Play", "play"]);
        let lower = v.encode("Play", 4).unwrap();
        assert_eq!(lower.ids[1], v.id("play").unwrap());
        v.set_lowercase(false);
        let cased = v.encode("Play", 4).unwrap();
        assert_eq!(cased.ids[1], v.id("Play").unwrap());
    }
}
