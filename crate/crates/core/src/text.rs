//! Caption word rules shared by keyword filtering and keyword frequency counts.
//!
//! A word is a maximal run of alphanumeric characters. A lone `s` that follows
//! an apostrophe glued to the previous word (`gogh's`, `gogh’s`) is a
//! possessive suffix and is dropped, so `Van Gogh's` yields `van`, `gogh`.
//! Frequency counts use terms instead, where a hyphen between two words joins
//! them (`self-portrait`).

/// Split `text` into words. With `case_fold` every word is lowercased.
pub fn words(text: &str, case_fold: bool) -> Vec<String> {
    scan(text, case_fold, false)
}

/// Like [`words`], but hyphenated compounds stay one term.
pub fn terms(text: &str, case_fold: bool) -> Vec<String> {
    scan(text, case_fold, true)
}

fn scan(text: &str, case_fold: bool, join_hyphens: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    // The word being built started right after `<word>'`.
    let mut possessive_candidate = false;
    // The previous character was an apostrophe glued to a word.
    let mut after_glued_apostrophe = false;

    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                possessive_candidate = after_glued_apostrophe;
            }
            current.push(ch);
            after_glued_apostrophe = false;
        } else if join_hyphens
            && ch == '-'
            && !current.is_empty()
            && chars.peek().is_some_and(|c| c.is_alphanumeric())
        {
            current.push(ch);
            possessive_candidate = false;
        } else {
            let ended_word = !current.is_empty();
            push_word(&mut out, &mut current, possessive_candidate, case_fold);
            possessive_candidate = false;
            after_glued_apostrophe = ended_word && is_apostrophe(ch);
        }
    }
    push_word(&mut out, &mut current, possessive_candidate, case_fold);
    out
}

fn push_word(out: &mut Vec<String>, current: &mut String, possessive: bool, case_fold: bool) {
    if current.is_empty() {
        return;
    }
    if !(possessive && (current == "s" || current == "S")) {
        out.push(if case_fold {
            current.to_lowercase()
        } else {
            current.clone()
        });
    }
    current.clear();
}

fn is_apostrophe(ch: char) -> bool {
    matches!(ch, '\'' | '\u{2019}' | '\u{02BC}')
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_sequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return true;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Function words excluded from keyword frequency tables by default.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "after", "against", "all", "an", "and", "any", "are", "as", "at", "be",
    "been", "before", "being", "between", "both", "but", "by", "can", "did", "do", "does",
    "down", "during", "each", "for", "from", "had", "has", "have", "he", "her", "here", "him",
    "his", "how", "i", "if", "in", "into", "is", "it", "its", "me", "more", "most", "my", "no",
    "nor", "not", "of", "off", "on", "once", "only", "or", "other", "our", "out", "over",
    "own", "same", "she", "so", "some", "such", "than", "that", "the", "their", "them",
    "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while",
    "who", "whom", "why", "will", "with", "you", "your",
];
