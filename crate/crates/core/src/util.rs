//! Small shared helpers.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of a byte string, used for config digests and
/// output manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_hashes_to_known_digest() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_is_sensitive_to_single_byte() {
        assert_ne!(sha256_hex(b"a"), sha256_hex(b"b"));
    }
}
