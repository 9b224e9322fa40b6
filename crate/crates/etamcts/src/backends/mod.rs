//! Concrete policy and critic providers: the deterministic toy arithmetic
//! domain with exact oracles, the HTTP client for OpenAI-compatible
//! completion endpoints, and the prompt template registry they share.

pub mod http;
pub mod templates;
pub mod toy;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = seed ^ FNV_OFFSET;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Derives a stable sub-seed from a base seed, a component tag, and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let tagged = fnv1a(base, tag.as_bytes());
    fnv1a(tagged, &index.to_le_bytes())
}

/// Stable hash of a string, used for state-keyed deterministic noise.
pub fn hash_text(text: &str) -> u64 {
    fnv1a(0, text.as_bytes())
}
