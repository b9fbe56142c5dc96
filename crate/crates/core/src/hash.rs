//! Small deterministic hashing helpers for feature maps and fingerprints.

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Order-sensitive hash of a token slice under a seed.
pub fn hash_tokens(seed: u64, tokens: &[u32]) -> u64 {
    tokens
        .iter()
        .fold(mix64(seed ^ tokens.len() as u64), |h, &t| {
            mix64(h ^ u64::from(t).wrapping_mul(0x2545_f491_4f6c_dd1d))
        })
}

/// Running 64-bit fingerprint over heterogeneous byte streams.
#[derive(Debug, Clone, Copy)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fingerprint {
    pub fn bytes(mut self, data: &[u8]) -> Self {
        for chunk in data.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.0 = mix64(self.0 ^ u64::from_le_bytes(buf) ^ (chunk.len() as u64) << 56);
        }
        self.0 = mix64(self.0 ^ data.len() as u64);
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(self, s: &str) -> Self {
        self.bytes(s.as_bytes())
    }

    pub fn hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_hash_is_order_sensitive() {
        assert_ne!(hash_tokens(1, &[1, 2]), hash_tokens(1, &[2, 1]));
        assert_ne!(hash_tokens(1, &[1, 2]), hash_tokens(2, &[1, 2]));
        assert_eq!(hash_tokens(3, &[4, 5, 6]), hash_tokens(3, &[4, 5, 6]));
    }

    #[test]
    fn fingerprint_separates_lengths() {
        let a = Fingerprint::default().bytes(b"ab").hex();
        let b = Fingerprint::default().bytes(b"ab\0").hex();
        assert_ne!(a, b);
    }
}
