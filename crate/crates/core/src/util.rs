use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher for cache keys built from several inputs.
pub(crate) struct KeyHasher(Sha256);

impl KeyHasher {
    pub(crate) fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update(domain.as_bytes());
        h.update([0u8]);
        KeyHasher(h)
    }

    pub(crate) fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub(crate) fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Lowercase, split on anything that is not alphanumeric.
pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_folds_case_and_punctuation() {
        assert_eq!(tokenize("Mug, TABLE!  a-b"), vec!["mug", "table", "a", "b"]);
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn key_hasher_is_length_prefixed() {
        let mut a = KeyHasher::new("x");
        a.field(b"ab").field(b"c");
        let mut b = KeyHasher::new("x");
        b.field(b"a").field(b"bc");
        assert_ne!(a.finish(), b.finish());
    }
}
