//! darthkit: test-time adaptation for appearance-based multi-object tracking,
//! exercised end to end on a synthetic moving-shapes benchmark.
//!
//! The toolkit covers the whole loop at desk scale: a small convolutional
//! detector with an appearance embedding head, self-supervised adaptation of
//! that detector to a shifted target domain (teacher-student distillation plus
//! contrastive embedding learning over augmented views), an embedding-based
//! tracker, and exact implementations of the standard tracking metrics
//! (HOTA, CLEAR/MOTA, IDF1).
//!
//! Everything is deterministic under a fixed seed: randomness is derived from
//! counter-based streams keyed on (seed, frame, role), never from shared
//! mutable generator state.

pub mod adapt;
pub mod assignment;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod geometry;
pub mod image_data;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod motio;
pub mod rng;
pub mod synthbench;
pub mod tracker;
pub mod video;
pub mod views;

pub use error::{Error, Result};

use once_cell::sync::OnceCell;

static PARALLELISM: OnceCell<usize> = OnceCell::new();

/// Cap rayon's global thread pool from the `DARTHKIT_THREADS` environment
/// variable. Safe to call more than once; only the first call can build the
/// pool. Returns the effective thread count.
pub fn init_parallelism() -> usize {
    *PARALLELISM.get_or_init(|| {
        let requested = std::env::var("DARTHKIT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        if let Some(n) = requested {
            // Ignore the error: a pool built earlier in the process wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    })
}
