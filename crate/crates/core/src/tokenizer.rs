//! Word-level tokenizer over the closed template vocabulary.
//!
//! Words are runs of letters, `-` and `'`; every digit and every punctuation
//! character is its own token, so `12.3s` becomes `1 2 . 3 s`. Case is kept
//! because the canonical answer formats are case sensitive.

use std::collections::HashMap;

use crate::templates;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Splits text into token strings. Shared by the model tokenizer and the text metrics.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let is_word = c.is_alphabetic() || c == '-' || c == '\'';
        if is_word {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = word_start {
        out.push(&text[s..]);
    }
    out
}

fn is_digit_token(t: &str) -> bool {
    t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
}

fn is_closing_punct(t: &str) -> bool {
    matches!(t, "," | "." | "?" | "!" | ";" | ":")
}

/// Inverse of [`split_tokens`] for text produced by the templates.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let glue = if i == 0 {
            true
        } else {
            let prev = tokens[i - 1].as_ref();
            let prev_is_decimal_point = prev == "." && i >= 2 && is_digit_token(tokens[i - 2].as_ref());
            is_closing_punct(tok)
                || (is_digit_token(tok) && (is_digit_token(prev) || prev_is_decimal_point))
                || (tok == "s" && is_digit_token(prev))
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::from_templates()
    }
}

impl Tokenizer {
    /// Vocabulary: `<unk>`, `<eos>`, the ten digits, then every template word in sorted order.
    pub fn from_templates() -> Self {
        let mut words: Vec<String> = templates::corpus()
            .iter()
            .flat_map(|s| split_tokens(s).into_iter().map(str::to_string).collect::<Vec<_>>())
            .filter(|t| !is_digit_token(t))
            .collect();
        words.sort();
        words.dedup();
        let mut vocab = vec![UNK.to_string(), EOS.to_string()];
        vocab.extend((0..10).map(|d| d.to_string()));
        vocab.extend(words);
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_tokens(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Decodes ids, dropping `<eos>` and anything after it.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().take_while(|&&i| i != EOS_ID).map(|&i| self.token(i)).collect();
        join_tokens(&toks)
    }
}
