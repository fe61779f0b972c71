//! Stable seed derivation. `DefaultHasher` is not stable across toolchains,
//! and checked-in fixtures depend on these seeds.

use sha2::{Digest, Sha256};

/// First 8 bytes of `sha256(len(part) || part || ...)` as a little-endian u64.
pub fn derive_seed<I, P>(parts: I) -> u64
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
