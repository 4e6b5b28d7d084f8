use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a sequence of floats by their little-endian bit patterns.
pub fn hash_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Digest of a list of identifiers, order-sensitive.
pub fn hash_ids<S: AsRef<str>>(ids: &[S]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_ref().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}
