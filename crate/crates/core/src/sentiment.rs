//! Rule-based lexicon sentiment scorer producing the four affect features
//! (positive, negative, neutral shares and a normalized compound score).

use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Sign-flip factor applied when a negation appears in the 3 preceding tokens.
pub const NEGATION_SCALE: f64 = -0.74;
/// Magnitude added toward the valence sign by an immediately preceding booster.
pub const BOOSTER_INC: f64 = 0.293;
/// Magnitude added toward the valence sign for an ALL-CAPS valenced token.
pub const CAPS_INC: f64 = 0.733;
/// Magnitude added to |T| per trailing exclamation mark (at most 3).
pub const BANG_INC: f64 = 0.292;
/// Normalization constant in compound = T / sqrt(T^2 + NORM).
pub const NORM: f64 = 15.0;

const NEGATIONS: [&str; 26] = [
    "not", "no", "never", "none", "nobody", "nothing", "neither", "nor", "cannot", "can't",
    "don't", "dont", "won't", "wont", "isn't", "isnt", "aren't", "wasn't", "weren't", "doesn't",
    "didn't", "couldn't", "shouldn't", "wouldn't", "hardly", "without",
];

const BOOSTERS: [&str; 14] = [
    "very", "really", "extremely", "absolutely", "completely", "totally", "utterly", "so",
    "incredibly", "super", "deeply", "truly", "insanely", "seriously",
];

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: valence {valence} outside [-4, 4] for {token:?}")]
    Range { line: usize, token: String, valence: f64 },
    #[error("line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
}

#[derive(Debug, Clone)]
pub struct SentimentLexicon {
    valence: HashMap<String, f64>,
}

impl SentimentLexicon {
    /// Parses `token\tvalence` lines; keys lowercased, range-checked,
    /// duplicates rejected.
    pub fn from_tsv(text: &str) -> Result<Self, LexiconError> {
        let mut valence = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, val) = line.split_once('\t').ok_or_else(|| LexiconError::Parse {
                line: lineno,
                message: "expected token<TAB>valence".into(),
            })?;
            let token = token.trim().to_lowercase();
            let v: f64 = val.trim().parse().map_err(|_| LexiconError::Parse {
                line: lineno,
                message: format!("bad valence {val:?}"),
            })?;
            if !(-4.0..=4.0).contains(&v) {
                return Err(LexiconError::Range { line: lineno, token, valence: v });
            }
            if valence.insert(token.clone(), v).is_some() {
                return Err(LexiconError::Duplicate { line: lineno, token });
            }
        }
        Ok(SentimentLexicon { valence })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tsv(&text)
    }

    /// Small built-in demo lexicon used by tests and the synthetic corpus.
    pub fn bundled() -> Self {
        Self::from_tsv(include_str!("../assets/demo_lexicon.tsv"))
            .expect("bundled lexicon is valid")
    }

    pub fn valence_of(&self, token: &str) -> Option<f64> {
        self.valence.get(&token.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.valence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valence.is_empty()
    }

    /// Test hook: same lexicon with every valence negated.
    pub fn negated(&self) -> Self {
        SentimentLexicon {
            valence: self.valence.iter().map(|(k, v)| (k.clone(), -v)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentimentScores {
    pub pos: f64,
    pub neg: f64,
    pub neu: f64,
    pub compound: f64,
}

impl SentimentScores {
    pub fn neutral() -> Self {
        SentimentScores { pos: 0.0, neg: 0.0, neu: 1.0, compound: 0.0 }
    }

    pub fn features(&self) -> [f64; 4] {
        [self.pos, self.neg, self.neu, self.compound]
    }
}

pub fn is_negation(token: &str) -> bool {
    NEGATIONS.contains(&token.to_lowercase().as_str())
}

pub fn is_booster(token: &str) -> bool {
    BOOSTERS.contains(&token.to_lowercase().as_str())
}

fn is_all_caps(token: &str) -> bool {
    let mut has_alpha = false;
    for ch in token.chars() {
        if ch.is_alphabetic() {
            has_alpha = true;
            if !ch.is_uppercase() {
                return false;
            }
        }
    }
    has_alpha && token.chars().count() >= 2
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scores case-preserved tokens. Rule order per valenced token: ALL-CAPS
/// emphasis toward the base sign, then negation (window of 3 preceding
/// tokens, scale -0.74), then booster toward the post-negation sign.
/// Trailing `!` tokens (up to 3) grow |T|; compound = T/sqrt(T^2+15).
pub fn score(tokens: &[String], lexicon: &SentimentLexicon) -> SentimentScores {
    if tokens.is_empty() {
        return SentimentScores::neutral();
    }
    let mut t_sum = 0.0;
    let mut pos_mass = 0.0;
    let mut neg_mass = 0.0;
    let mut neu_mass = 0.0;
    for (i, tok) in tokens.iter().enumerate() {
        let Some(base) = lexicon.valence_of(tok) else {
            neu_mass += 1.0;
            continue;
        };
        let mut v = base;
        if is_all_caps(tok) {
            v += CAPS_INC * sign(v);
        }
        let window = &tokens[i.saturating_sub(3)..i];
        if window.iter().any(|w| is_negation(w)) {
            v *= NEGATION_SCALE;
        }
        if i > 0 && is_booster(&tokens[i - 1]) {
            v += BOOSTER_INC * sign(v);
        }
        t_sum += v;
        if v > 0.0 {
            pos_mass += v + 1.0;
        } else if v < 0.0 {
            neg_mass += -v + 1.0;
        } else {
            neu_mass += 1.0;
        }
    }
    let bangs = tokens.iter().rev().take_while(|t| t.as_str() == "!").count().min(3);
    t_sum += BANG_INC * bangs as f64 * sign(t_sum);

    let compound = t_sum / (t_sum * t_sum + NORM).sqrt();
    let total = pos_mass + neg_mass + neu_mass;
    if total == 0.0 {
        return SentimentScores::neutral();
    }
    SentimentScores {
        pos: pos_mass / total,
        neg: neg_mass / total,
        neu: neu_mass / total,
        compound,
    }
}
