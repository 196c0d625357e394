//! Keyed ChaCha20 substreams.
//!
//! Every random draw is addressed by `(seed, replicate, study, stream)`:
//! the seed and replicate select the cipher key, the study and stream
//! select the 64-bit ChaCha stream id. Streams never overlap, so any
//! replicate can be regenerated alone on any thread.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream index reserved for calibration-subset sampling within a study.
pub const CALIBRATION_STREAM: u32 = u32::MAX;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one `(seed, replicate, study, stream)` address.
pub fn substream(seed: u64, replicate: u64, study: u32, stream: u32) -> ChaCha20Rng {
    let mut state = seed ^ replicate.rotate_left(32) ^ 0x5043_414c_5f53_494d;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream((u64::from(study) << 32) | u64::from(stream));
    rng
}
