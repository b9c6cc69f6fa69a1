//! Text normalization, tokenization and the bundled stop-word list.

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    tokens(text).join(" ")
}

/// Lowercase alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "been", "behind", "being", "below", "beside", "between", "both", "but", "by", "can", "could",
    "describe", "did", "do", "does", "doing", "down", "each", "for", "from", "had", "has", "have",
    "he", "her", "here", "him", "his", "how", "i", "if", "image", "in", "into", "is", "it", "its",
    "kind", "many", "me", "much", "my", "near", "next", "no", "not", "of", "off", "on", "or",
    "other", "our", "out", "over", "photo", "picture", "she", "should", "so", "some", "than",
    "that", "the", "their", "them", "there", "these", "they", "this", "those", "to", "under", "up",
    "was", "we", "were", "what", "when", "where", "which", "who", "whom", "whose", "why", "will",
    "with", "would", "yes", "you", "your",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

/// Deduplicated content words in order of first appearance.
pub fn content_words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokens(text) {
        if !is_stop_word(&t) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(text: &str) -> u64 {
    stable_hash_bytes(text.as_bytes())
}

pub fn stable_hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_words_sorted_for_binary_search() {
        let mut sorted = STOP_WORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOP_WORDS);
    }

    #[test]
    fn content_words_drop_stop_words() {
        assert_eq!(content_words("Is there a red car?"), vec!["red", "car"]);
        assert_eq!(content_words("the The a"), Vec::<String>::new());
        assert_eq!(content_words("dog, dog DOG"), vec!["dog"]);
    }

    #[test]
    fn normalize_strips_punctuation() {
        assert_eq!(normalize("  Two   dogs!! "), "two dogs");
    }
}
