//! Shared text handling: cell cleanup, the embedding tokenizer, and answer
//! normalization used by every metric.

/// Trims a cell and collapses internal whitespace runs to a single space.
pub fn normalize_cell(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Byte spans of the tokens in `text`: maximal runs of alphanumeric chars.
///
/// Whitespace and punctuation both separate tokens and are dropped.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Returns the prefix of `text` ending right after its `max_tokens`-th token.
pub fn truncate_to_tokens(text: &str, max_tokens: usize) -> &str {
    let spans = token_spans(text);
    if spans.len() <= max_tokens {
        return text;
    }
    if max_tokens == 0 {
        return "";
    }
    &text[..spans[max_tokens - 1].1]
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Answer normalization shared by recall, hits and EM/F1: lowercase,
/// punctuation replaced by spaces, articles dropped, whitespace collapsed.
///
/// Punctuation becomes a separator rather than being deleted so that
/// "North-Carolina" and "North Carolina" normalize identically.
pub fn normalize_answer(text: &str) -> String {
    answer_tokens(text).join(" ")
}

pub fn answer_tokens(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_owned)
        .collect()
}

/// Token-boundary containment of a normalized answer in a normalized text.
pub fn contains_answer(haystack: &str, answer: &str) -> bool {
    let needle = normalize_answer(answer);
    if needle.is_empty() {
        return false;
    }
    let hay = normalize_answer(haystack);
    format!(" {hay} ").contains(&format!(" {needle} "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_whitespace_is_collapsed() {
        assert_eq!(normalize_cell("  K.  T.\tOslin "), "K. T. Oslin");
        assert_eq!(normalize_cell("   "), "");
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(
            tokenize("Grammy Award, (1988)!"),
            vec!["grammy", "award", "1988"]
        );
        assert_eq!(tokenize("T | A [SEP] b"), vec!["t", "a", "sep", "b"]);
        assert!(tokenize(" | , ").is_empty());
    }

    #[test]
    fn truncation_keeps_exact_token_count() {
        let text = "one two, three | four five";
        let cut = truncate_to_tokens(text, 3);
        assert_eq!(cut, "one two, three");
        assert_eq!(tokenize(cut).len(), 3);
        assert_eq!(truncate_to_tokens(text, 10), text);
    }

    #[test]
    fn hyphenated_answer_matches_spaced_text() {
        assert!(contains_answer(
            "province of North Carolina",
            "North-Carolina"
        ));
        assert!(!contains_answer("Carolinas", "Carolina"));
        assert_eq!(normalize_answer("The 12 August, 1971."), "12 august 1971");
    }
}
