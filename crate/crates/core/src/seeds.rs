//! Counter-based random stream derivation.
//!
//! A single global seed fans out into independent streams by hashing
//! `(parent, tag)` pairs with SplitMix64. Each stage owns a fixed tag, so
//! enabling, disabling or reordering one stage never perturbs the stream of
//! another. Within a stage, per-item streams (one per rollout, one per worker)
//! are derived the same way from the stage seed and the item index, which keeps
//! results independent of thread count.
//!
//! ```text
//! stage_seed  = derive(global_seed, STAGE_TAG)
//! item_seed   = derive(stage_seed, item_index)
//! rng         = ChaCha8(item_seed)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stage tags. Values are part of the reproducibility contract.
pub mod tag {
    pub const WORLD: u64 = 0x10;
    pub const PROMPTS: u64 = 0x20;
    pub const DEMOS: u64 = 0x21;
    pub const DEMOS_STAGE2: u64 = 0x22;
    pub const HELDOUT: u64 = 0x23;
    pub const PRETRAIN: u64 = 0x30;
    pub const SFT: u64 = 0x40;
    pub const SFT_STAGE2: u64 = 0x41;
    pub const SFT_EXTENDED: u64 = 0x42;
    pub const POLICY_INIT: u64 = 0x50;
    pub const PPO: u64 = 0x60;
    pub const PPO_ORACLE: u64 = 0x62;
    pub const EVAL: u64 = 0x70;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a counter/tag.
#[inline]
pub fn derive(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for item `index` of the stage seeded by `stage_seed`.
pub fn item_rng(stage_seed: u64, index: u64) -> Rng {
    rng(derive(stage_seed, index))
}
