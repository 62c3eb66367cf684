//! Task-adaptive low-rank prompt tuning on a small frozen decoder-only
//! transformer: tensors and autodiff, the backbone, the prompt mechanism,
//! synthetic tasks, the three-phase training pipeline and analysis tools.

pub mod analysis;
pub mod backbone;
pub mod error;
pub mod numerics;
pub mod talora;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};

/// Sub-seed for `(stream, index)` under `base`, via the SplitMix64 finalizer.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
