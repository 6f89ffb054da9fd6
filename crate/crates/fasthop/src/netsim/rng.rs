//! Deterministic random streams for the simulator.
//!
//! Every node draws from its own stream, derived from the master seed and the
//! node's name. Adding or reordering nodes therefore never shifts the draws
//! of unrelated nodes, which keeps scenario diffs reviewable.

/// xorshift64* generator. Not cryptographic; the protocol's own randomness
/// comes from SipHash, this only drives simulated behavior.
#[derive(Clone, Debug)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        // xorshift has no zero state; splitmix the seed so 0 is usable too.
        let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        Self { state: if z == 0 { 0x6a09e667f3bcc909 } else { z } }
    }

    /// Stream for `label` under `master`. Uses the hop PRF as a mixer, keyed
    /// by the master seed in both halves.
    pub fn stream(master: u64, label: &str) -> Self {
        let mut key = [0u8; 16];
        key[..8].copy_from_slice(&master.to_le_bytes());
        key[8..].copy_from_slice(&master.to_le_bytes());
        let uid = crate::hopper::SessionUid::from_bytes(key);
        let mut mixed = 0u64;
        for (i, chunk) in label.as_bytes().chunks(4).enumerate() {
            let mut word = [0u8; 4];
            word[..chunk.len()].copy_from_slice(chunk);
            mixed ^= crate::hopper::hop_value(&uid, u32::from_le_bytes(word))
                .rotate_left((i % 64) as u32);
        }
        Self::new(master ^ mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545f4914f6cdd1d)
    }

    /// Uniform draw in `0..n` via widening multiply. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }
}
