//! The language-model contract the metrics are written against.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

pub type TokenId = u32;

/// Start-of-sequence padding token.
pub const BOS: TokenId = 0;
/// End-of-sequence token; greedy generation stops after emitting it.
pub const EOS: TokenId = 1;
/// Stand-in for words missing from the vocabulary.
pub const UNK: TokenId = 2;

const SPECIALS: [&str; 3] = ["<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    /// The model cannot provide what the metric needs (typically gradients).
    Unsupported(String),
    InvalidInput(String),
    /// Transport or remote failure of an out-of-process model.
    Backend(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Unsupported(what) => write!(f, "unsupported by model: {what}"),
            ModelError::InvalidInput(msg) => write!(f, "invalid model input: {msg}"),
            ModelError::Backend(msg) => write!(f, "model backend error: {msg}"),
        }
    }
}

/// A tokenized text with byte spans of each token in `surface`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub surface: String,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    /// Text of each token as it appears in `surface`.
    pub fn pieces(&self) -> impl Iterator<Item = &str> {
        self.offsets.iter().map(|&(s, e)| &self.surface[s..e])
    }
}

/// Ordered token list. Ids 0..3 are always `<s>`, `</s>`, `<unk>`.
///
/// Tokenization lowercases and splits text into runs of word characters
/// (alphanumerics and `_`) and single other non-space characters; the literal
/// `<unk>` is one token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials followed by `words` in first-seen order (duplicates and
    /// special spellings skipped).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary { tokens: Vec::new(), index: BTreeMap::new() };
        for s in SPECIALS {
            vocab.push(s);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    /// Builds the vocabulary of every lexeme in `corpus`.
    pub fn from_corpus(corpus: &str) -> Self {
        Self::from_words(lexemes(corpus).into_iter().map(|(s, e)| normalize_lexeme(&corpus[s..e])))
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id < SPECIALS.len() as TokenId
    }

    /// Non-special ids.
    pub fn content_ids(&self) -> core::ops::Range<TokenId> {
        SPECIALS.len() as TokenId..self.tokens.len() as TokenId
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let offsets = lexemes(text);
        let tokens = offsets.iter().map(|&(s, e)| self.id(&normalize_lexeme(&text[s..e])).unwrap_or(UNK)).collect();
        TokenSequence { tokens, surface: text.to_string(), offsets }
    }

    /// Joins token spellings with single spaces. Unknown ids render as
    /// `<unk>`.
    pub fn detokenize(&self, tokens: &[TokenId]) -> TokenSequence {
        let mut surface = String::new();
        let mut offsets = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                surface.push(' ');
            }
            let start = surface.len();
            surface.push_str(self.token(t).unwrap_or(SPECIALS[UNK as usize]));
            offsets.push((start, surface.len()));
        }
        TokenSequence { tokens: tokens.to_vec(), surface, offsets }
    }

    /// Surface text of generated tokens with a trailing `</s>` dropped.
    pub fn render_output(&self, generated: &[TokenId]) -> String {
        let body = match generated.split_last() {
            Some((&EOS, rest)) => rest,
            _ => generated,
        };
        self.detokenize(body).surface
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary must start with <s>, </s>, <unk>".to_string());
        }
        let mut vocab = Vocabulary::from_words(&tokens[SPECIALS.len()..]);
        if vocab.len() != tokens.len() {
            return Err("vocabulary contains duplicate tokens".to_string());
        }
        vocab.tokens.shrink_to_fit();
        Ok(vocab)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte spans of lexemes in `text`.
fn lexemes(text: &str) -> Vec<(usize, usize)> {
    let unk = SPECIALS[UNK as usize];
    let mut spans = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        if text[start..].starts_with(unk) {
            let end = start + unk.len();
            while chars.peek().is_some_and(|&(i, _)| i < end) {
                chars.next();
            }
            spans.push((start, end));
        } else if is_word_char(c) {
            let mut end = start + c.len_utf8();
            while let Some(&(i, next)) = chars.peek() {
                if !is_word_char(next) {
                    break;
                }
                end = i + next.len_utf8();
                chars.next();
            }
            spans.push((start, end));
        } else {
            spans.push((start, start + c.len_utf8()));
        }
    }
    spans
}

/// Lowercases characters whose lowercase form is a single character, so a
/// normalized lexeme re-lexes to itself.
fn normalize_lexeme(lexeme: &str) -> String {
    lexeme
        .chars()
        .map(|c| {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) if is_word_char(l) == is_word_char(c) => l,
                _ => c,
            }
        })
        .collect()
}

/// Loss value and its gradient with respect to each prompt embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    /// `Σ_t −ln p(target_t | prompt, target_<t)`
    pub loss: f64,
    /// One row per prompt position, same width as the embedding table.
    pub rows: Matrix,
}

/// What the evaluation metrics require of a language model.
///
/// Text-overlap and perplexity metrics only need [`logits`](Self::logits)
/// and generation. The gradient metrics additionally need
/// [`embeddings`](Self::embeddings) and
/// [`embedding_gradient`](Self::embedding_gradient); models without them
/// report [`ModelError::Unsupported`].
pub trait LanguageModel {
    fn vocabulary(&self) -> &Vocabulary;

    fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocabulary().tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> TokenSequence {
        self.vocabulary().detokenize(tokens)
    }

    /// Next-token logits over the whole vocabulary given every token so far.
    fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError>;

    /// Greedy continuation of `prompt`. Ties go to the lowest id and `<s>` is
    /// never emitted. Stops after emitting `</s>` (which is included) or after
    /// `max_new_tokens` tokens.
    fn generate(&self, prompt: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>, ModelError> {
        let mut context = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let logits = self.logits(&context)?;
            let next = argmax_excluding_bos(&logits).ok_or_else(|| ModelError::Backend("empty logits".to_string()))?;
            out.push(next);
            context.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Input embedding table (`|V| × d`), if the model exposes one.
    fn embeddings(&self) -> Option<&Matrix> {
        None
    }

    /// Gradient of the target's negative log-likelihood with respect to the
    /// given prompt embedding rows, which need not be rows of the table.
    fn embedding_gradient(&self, _prompt_rows: &Matrix, _target: &[TokenId]) -> Result<InputGradient, ModelError> {
        Err(ModelError::Unsupported("input gradients".to_string()))
    }

    /// [`embedding_gradient`](Self::embedding_gradient) at the prompt's own
    /// token embeddings.
    fn input_gradient(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<InputGradient, ModelError> {
        let rows = embed(self, prompt)?;
        self.embedding_gradient(&rows, target)
    }
}

/// Looks up embedding rows for `tokens`.
pub fn embed<M: LanguageModel + ?Sized>(model: &M, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
    let table = model.embeddings().ok_or_else(|| ModelError::Unsupported("input embeddings".to_string()))?;
    let mut rows = Matrix::zeros(tokens.len(), table.cols());
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= table.rows() {
            return Err(ModelError::InvalidInput(alloc::format!("token id {t} out of range")));
        }
        rows.row_mut(i).copy_from_slice(table.row(t as usize));
    }
    Ok(rows)
}

fn argmax_excluding_bos(logits: &[f64]) -> Option<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in logits.iter().enumerate() {
        if i == BOS as usize {
            continue;
        }
        if best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i as TokenId)
}

/// Numerically stable log-softmax. Entries at `-inf` stay `-inf`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return logits.iter().map(|_| f64::NEG_INFINITY).collect();
    }
    let sum: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let lse = max + libm::log(sum);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(libm::exp).collect()
}
