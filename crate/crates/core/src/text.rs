//! Text normalization, tokenization, vocabulary, and fixed-length encoding.

use regex::Regex;
use std::collections::HashMap;
use std::sync::OnceLock;
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

pub const URL_TOKEN: &str = "<url>";
pub const USER_TOKEN: &str = "<user>";

const EMOTICONS: [&str; 14] =
    [":)", ":(", ":-)", ":-(", ":d", ":D", ";)", ":/", ":'(", ":p", ":P", "<3", "xd", "xD"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("max_len must be >= 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("vocabulary file is malformed: {0}")]
    VocabParse(String),
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap())
}

fn user_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

fn truncate_repeats(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut prev: Option<char> = None;
    let mut run = 0usize;
    for ch in text.chars() {
        if Some(ch) == prev {
            run += 1;
        } else {
            prev = Some(ch);
            run = 1;
        }
        if run <= 3 {
            out.push(ch);
        }
    }
    out
}

fn normalize_inner(text: &str, lowercase: bool) -> String {
    let text = url_re().replace_all(text, URL_TOKEN);
    let text = user_re().replace_all(&text, USER_TOKEN);
    let text = truncate_repeats(&text);
    let text = if lowercase { text.to_lowercase() } else { text };
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased normal form fed to the encoder vocabulary.
pub fn normalize(text: &str) -> String {
    normalize_inner(text, true)
}

/// Same cleaning rules with case preserved, for the sentiment scorer whose
/// ALL-CAPS rule needs the original casing.
pub fn normalize_cased(text: &str) -> String {
    normalize_inner(text, false)
}

fn is_sentinel(token: &str) -> bool {
    token == URL_TOKEN || token == USER_TOKEN
}

fn is_emoticon(token: &str) -> bool {
    EMOTICONS.contains(&token)
}

/// Whitespace split, then leading/trailing ASCII punctuation peeled off as
/// standalone tokens. Sentinels and a fixed emoticon list stay intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if is_sentinel(piece) || is_emoticon(piece) {
            out.push(piece.to_string());
            continue;
        }
        let chars: Vec<char> = piece.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        // the piece may be pure punctuation
        if start == end {
            for ch in &chars {
                out.push(ch.to_string());
            }
            continue;
        }
        for ch in &chars[..start] {
            out.push(ch.to_string());
        }
        let core: String = chars[start..end].iter().collect();
        out.push(core);
        for ch in &chars[end..] {
            out.push(ch.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub min_frequency: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// `token\tid` lines in id order; round-trips bit-exactly.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            s.push_str(tok);
            s.push('\t');
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary, TextError> {
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| TextError::VocabParse(format!("line {}: no tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| TextError::VocabParse(format!("line {}: bad id", lineno + 1)))?;
            if id != id_to_token.len() {
                return Err(TextError::VocabParse(format!(
                    "line {}: ids must be dense and ascending",
                    lineno + 1
                )));
            }
            if token_to_id.insert(tok.to_string(), id).is_some() {
                return Err(TextError::VocabParse(format!("duplicate token {tok:?}")));
            }
            id_to_token.push(tok.to_string());
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(|s| s.as_str()) != Some(*want) {
                return Err(TextError::VocabParse(format!("reserved id {i} must be {want}")));
            }
        }
        Ok(Vocabulary { token_to_id, id_to_token, min_frequency: 0 })
    }
}

/// Tokens with count >= min_frequency, ids assigned by (count desc, token asc)
/// after the three reserved ids.
pub fn build_vocab(corpus: &[Vec<String>], min_frequency: usize) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for tok in doc {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_frequency.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary { token_to_id, id_to_token, min_frequency })
}

/// CLS-prefixed, truncated to max_len, PAD-suffixed; mask is 1 on non-PAD.
pub fn encode(
    tokens: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<bool>), TextError> {
    if max_len < 2 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    for tok in tokens.iter().take(max_len - 1) {
        ids.push(vocab.id_of(tok));
    }
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask: Vec<bool> = (0..max_len).map(|i| i < used).collect();
    Ok((ids, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_applies_all_rules() {
        assert_eq!(normalize("Check HTTP://x.y NOW!!!"), "check <url> now!!!");
        assert_eq!(normalize("@bob you IDIOT"), "<user> you idiot");
        assert_eq!(normalize("soooooo dumb"), "sooo dumb");
        assert_eq!(normalize("  a \t b \n c  "), "a b c");
        assert_eq!(normalize("www.spam.example/x loser"), "<url> loser");
        assert_eq!(normalize_cased("@bob you IDIOT"), "<user> you IDIOT");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn tokenize_splits_punctuation_and_keeps_emoticons() {
        assert_eq!(tokenize("you idiot!"), vec!["you", "idiot", "!"]);
        assert_eq!(tokenize(":) nice"), vec![":)", "nice"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("now!!!"), vec!["now", "!", "!", "!"]);
        assert_eq!(tokenize("\"quoted\""), vec!["\"", "quoted", "\""]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize("<url> <user>"), vec!["<url>", "<user>"]);
        assert_eq!(tokenize("?!"), vec!["?", "!"]);
    }

    #[test]
    fn vocab_is_deterministic_and_respects_min_frequency() {
        let corpus = vec![tokenize("a a b"), tokenize("a c b")];
        let v = build_vocab(&corpus, 2).unwrap();
        assert!(v.contains("a"));
        assert!(v.contains("b"));
        assert!(!v.contains("c"));
        assert_eq!(v.id_of("c"), UNK_ID);
        // a (3) before b (2)
        assert_eq!(v.id_of("a"), 3);
        assert_eq!(v.id_of("b"), 4);
        let v2 = build_vocab(&corpus, 2).unwrap();
        assert_eq!(v, v2);

        let v3 = build_vocab(&[tokenize("x y z")], 1).unwrap();
        assert_eq!(v3.len(), 3 + 3);
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn vocab_tsv_round_trips_bit_exactly() {
        let corpus = vec![tokenize("you are such a loser loser"), tokenize("have a nice day :)")];
        let v = build_vocab(&corpus, 1).unwrap();
        let tsv = v.to_tsv();
        let back = Vocabulary::from_tsv(&tsv).unwrap();
        assert_eq!(back.to_tsv(), tsv);
        assert_eq!(back.id_of("loser"), v.id_of("loser"));

        assert!(Vocabulary::from_tsv("nope").is_err());
        assert!(Vocabulary::from_tsv("<pad>\t0\n<unk>\t1\nx\t5\n").is_err());
        assert!(Vocabulary::from_tsv("x\t0\ny\t1\nz\t2\n").is_err());
    }

    #[test]
    fn encode_shapes_and_special_ids() {
        let v = build_vocab(&[tokenize("you idiot")], 1).unwrap();
        let (ids, mask) = encode(&[], &v, 4).unwrap();
        assert_eq!(ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(mask, vec![true, false, false, false]);

        let toks = tokenize("you idiot whatever");
        let (ids, mask) = encode(&toks, &v, 4).unwrap();
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(ids[3], UNK_ID); // "whatever" unseen
        assert!(mask.iter().all(|m| *m));

        let long = tokenize("a b c d e f g h");
        let (ids, mask) = encode(&long, &v, 4).unwrap();
        assert_eq!(ids.len(), 4);
        assert!(mask.iter().all(|m| *m));

        assert!(encode(&toks, &v, 1).is_err());
    }

    proptest! {
        #[test]
        fn pipeline_is_total_on_arbitrary_utf8(s in "\\PC*") {
            let v = build_vocab(&[tokenize("hello world")], 1).unwrap();
            let toks = tokenize(&normalize(&s));
            let (ids, mask) = encode(&toks, &v, 16).unwrap();
            prop_assert_eq!(ids.len(), 16);
            prop_assert_eq!(mask.len(), 16);
            prop_assert!(mask[0]);
        }

        #[test]
        fn vocab_round_trip_arbitrary_words(words in proptest::collection::vec("[a-z]{1,8}", 1..30)) {
            let corpus = vec![words];
            let v = build_vocab(&corpus, 1).unwrap();
            let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
            prop_assert_eq!(back.to_tsv(), v.to_tsv());
        }
    }
}
