//! Deterministic token counting.
//!
//! Fixed rule: each maximal alphanumeric run counts ceil(len/6) tokens, each
//! non-whitespace non-alphanumeric character counts 1, whitespace counts 0.
//! Savings are ratios, so a documented in-repo rule replaces a BPE
//! vocabulary without changing orderings.

const RUN_CHARS_PER_TOKEN: usize = 6;

pub fn count_tokens(text: &str) -> usize {
    let mut total = 0usize;
    let mut run = 0usize;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            run += 1;
        } else {
            total += run.div_ceil(RUN_CHARS_PER_TOKEN);
            run = 0;
            if !ch.is_whitespace() {
                total += 1;
            }
        }
    }
    total + run.div_ceil(RUN_CHARS_PER_TOKEN)
}
