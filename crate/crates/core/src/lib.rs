//! Desk-scale cyclic, wind-conditioned normal-map animation.
//!
//! Pipeline: procedurally generated periodic normal-map sequences
//! ([`dataset`]), a cyclic conditioning code ([`encoding`]) feeding a
//! wind-conditioned UNet ([`model`]), supervised training ([`trainer`]),
//! normal-guided reshading of a still image into a looping cinemagraph
//! ([`reshade`]), loop detection ([`loopfind`]) and image quality metrics
//! ([`metrics`]).

pub mod dataset;
pub mod encoding;
pub mod error;
pub mod gifenc;
pub mod graph;
pub mod imageio;
pub mod loopfind;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reshade;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Initialize the global worker pool, honoring `CYCLEGRAPH_THREADS`.
/// Safe to call more than once; later calls are ignored.
pub fn init_thread_pool_from_env() {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CYCLEGRAPH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                builder = builder.num_threads(n);
            }
        }
    }
    let _ = builder.build_global();
}
