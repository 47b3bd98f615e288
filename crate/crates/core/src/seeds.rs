//! Stable seed mixing. std's `DefaultHasher` is not guaranteed stable across
//! releases, so anything that must reproduce byte-identically uses this.

/// FNV-1a over the byte string, finalized with a splitmix64 round.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

/// Derives a child seed from a parent seed, a role tag, and an ordinal.
pub fn mix(seed: u64, tag: &str, n: u64) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len() + 8);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    stable_hash(&bytes)
}

/// Keyed hash of a string, for seed-dependent orderings.
pub fn keyed(seed: u64, tag: &str, key: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len() + key.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(key.as_bytes());
    stable_hash(&bytes)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
