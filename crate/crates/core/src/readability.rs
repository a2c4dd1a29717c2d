//! Word, sentence and syllable counting plus the Flesch scores.
//!
//! Reading ease:  `206.835 - 1.015 * (words / sentences) - 84.6 * (syllables / words)`
//! Grade level:   `0.39 * (words / sentences) + 11.8 * (syllables / words) - 15.59`

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextStats {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
}

fn is_vowel(c: char) -> bool {
    matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Vowel-run syllable heuristic. Never returns zero.
pub fn count_syllables(word: &str) -> usize {
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return 1;
    }
    let mut runs = 0;
    let mut in_run = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !in_run {
            runs += 1;
        }
        in_run = v;
    }
    let n = letters.len();
    if runs > 1
        && n >= 2
        && letters[n - 1].eq_ignore_ascii_case(&'e')
        && !is_vowel(letters[n - 2])
    {
        runs -= 1;
    }
    runs.max(1)
}

fn is_word(token: &str) -> bool {
    token.chars().any(|c| c.is_alphanumeric())
}

/// Splits text at maximal runs of `.`, `!`, `?`. Each returned flag says
/// whether a segment with at least one alphanumeric character was closed by
/// a terminator (`true`) or by end-of-text (`false`).
fn sentence_segments(body: &str) -> Vec<bool> {
    let mut out = Vec::new();
    let mut has_word = false;
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        if is_terminator(c) {
            while chars.peek().copied().is_some_and(is_terminator) {
                chars.next();
            }
            if has_word {
                out.push(true);
            }
            has_word = false;
        } else if c.is_alphanumeric() {
            has_word = true;
        }
    }
    if has_word {
        out.push(false);
    }
    out
}

pub fn text_stats(body: &str) -> TextStats {
    let words: Vec<&str> = body.split_whitespace().filter(|t| is_word(t)).collect();
    if words.is_empty() {
        return TextStats::default();
    }
    let sentences = sentence_segments(body).len().max(1);
    let syllables = words.iter().map(|w| count_syllables(w)).sum();
    TextStats {
        words: words.len(),
        sentences,
        syllables,
    }
}

/// Sentences closed by an explicit terminator.
pub fn complete_sentences(body: &str) -> usize {
    sentence_segments(body).into_iter().filter(|&closed| closed).count()
}

pub fn fkre(words: usize, sentences: usize, syllables: usize) -> Option<f64> {
    if words == 0 || sentences == 0 {
        return None;
    }
    let wps = words as f64 / sentences as f64;
    let spw = syllables as f64 / words as f64;
    Some(206.835 - 1.015 * wps - 84.6 * spw)
}

pub fn fkgl(words: usize, sentences: usize, syllables: usize) -> Option<f64> {
    if words == 0 || sentences == 0 {
        return None;
    }
    let wps = words as f64 / sentences as f64;
    let spw = syllables as f64 / words as f64;
    Some(0.39 * wps + 11.8 * spw - 15.59)
}

/// Words per sentence; zero when there are no sentences.
pub fn verbosity(words: usize, sentences: usize) -> f64 {
    if sentences == 0 {
        0.0
    } else {
        words as f64 / sentences as f64
    }
}
