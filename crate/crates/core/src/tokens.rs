//! Backend-independent token estimation.
//!
//! The estimate is `ceil(chars / 4)` over Unicode scalar values. Real
//! tokenizers are backend specific; this rule only has to be deterministic
//! and monotone under concatenation so thresholds behave predictably.

/// Characters assumed per token.
pub const CHARS_PER_TOKEN: usize = 4;

/// Estimate the token count of `text`.
pub fn estimate_tokens(text: &str) -> u64 {
    let chars = text.chars().count();
    chars.div_ceil(CHARS_PER_TOKEN) as u64
}

/// Number of characters that fit in `tokens` estimated tokens.
pub fn chars_for_tokens(tokens: u64) -> usize {
    tokens as usize * CHARS_PER_TOKEN
}

/// Truncate `text` to at most `max_tokens` estimated tokens, keeping the head
/// and tail and replacing the middle with an elision marker.
///
/// Returns the (possibly unchanged) text and whether truncation happened.
pub fn truncate_head_tail(text: &str, max_tokens: u64) -> (String, bool) {
    if estimate_tokens(text) <= max_tokens {
        return (text.to_string(), false);
    }
    let chars: Vec<char> = text.chars().collect();
    let budget = chars_for_tokens(max_tokens);
    // Marker length depends on the elided count; reserve a fixed upper bound.
    const MARKER_RESERVE: usize = 64;
    let keep = budget.saturating_sub(MARKER_RESERVE);
    let head = keep / 2;
    let tail = keep - head;
    let elided = chars.len() - head - tail;
    let mut out = String::with_capacity(budget);
    out.extend(&chars[..head]);
    out.push_str(&format!("\n[... {elided} characters elided ...]\n"));
    out.extend(&chars[chars.len() - tail..]);
    (out, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent re-implementation of the documented rule: walk the
    /// string in groups of four scalar values.
    fn oracle(text: &str) -> u64 {
        let mut tokens = 0;
        let mut in_group = 0;
        for _ in text.chars() {
            if in_group == 0 {
                tokens += 1;
            }
            in_group = (in_group + 1) % 4;
        }
        tokens
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(estimate_tokens(""), 0);
    }

    #[test]
    fn rounds_up() {
        assert_eq!(estimate_tokens("a"), 1);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        // multi-byte scalars count once each
        assert_eq!(estimate_tokens("ééééé"), 2);
    }

    #[test]
    fn corpus_file_matches_oracle() {
        let corpus = include_str!("../prompts/architect.md");
        assert_eq!(estimate_tokens(corpus), oracle(corpus));
        let corpus = include_str!("../config/command_policy.toml");
        assert_eq!(estimate_tokens(corpus), oracle(corpus));
    }

    #[test]
    fn truncation_keeps_head_and_tail() {
        let text: String = (0..20_000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let (out, truncated) = truncate_head_tail(&text, 1000);
        assert!(truncated);
        assert!(estimate_tokens(&out) <= 1000);
        assert!(out.starts_with(&text[..400]));
        assert!(out.ends_with(&text[text.len() - 400..]));
        assert!(out.contains("characters elided"));
    }

    #[test]
    fn short_text_is_untouched() {
        assert_eq!(truncate_head_tail("hello", 10), ("hello".to_string(), false));
    }

    proptest::proptest! {
        #[test]
        fn monotone_under_concatenation(a in ".{0,64}", b in ".{0,64}") {
            let joined = format!("{a}{b}");
            proptest::prop_assert!(estimate_tokens(&joined) >= estimate_tokens(&a).max(estimate_tokens(&b)));
            proptest::prop_assert_eq!(estimate_tokens(&a), oracle(&a));
        }
    }
}
