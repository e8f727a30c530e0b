//! Shared token-id layout.
//!
//! Model and data modules agree on a fixed vocabulary scheme: four special
//! tokens, then one tag per language (the canonical target first), then the
//! content words.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

const N_SPECIALS: u32 = 4;

/// Tag id of the i-th language (0 = canonical target, 1.. = cipher sources).
pub fn tag_id(lang_index: usize) -> u32 {
    N_SPECIALS + lang_index as u32
}

/// First content-word id when `n_languages` tags are allocated.
pub fn content_base(n_languages: usize) -> u32 {
    N_SPECIALS + n_languages as u32
}

/// Minimum model vocab size for `n_languages` tags and `content_words` words.
pub fn required_vocab(n_languages: usize, content_words: usize) -> usize {
    content_base(n_languages) as usize + content_words
}
