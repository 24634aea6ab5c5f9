//! FasterSNN: a hybrid spiking/artificial neural network for 3-class
//! volumetric classification, built from scratch on a small dense-tensor
//! autodiff core.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`volume`] — volumetric scan ingestion (NIfTI-1 subset, raw sidecar
//!   format), preprocessing, temporal encoding, dataset splits.
//! * [`tensor`] — dense rank-≤6 tensors and reverse-mode autodiff over a
//!   recorded graph.
//! * [`lif`] — leaky integrate-and-fire dynamics with a rectangular
//!   surrogate gradient.
//! * [`layers`] — spiking weighted attention, the region-adaptive block,
//!   and multi-scale fusion.
//! * [`model`] — full network assembly, parameter store, checkpointing.
//! * [`train`] — STBP training loop, Adam, gradient clipping, LR
//!   scheduling, cross-validation.
//! * [`metrics`] — classification metrics and the paired bootstrap test.
//! * [`efficiency`] — MAC/spike/energy accounting for a forward pass.

pub mod efficiency;
pub mod layers;
pub mod lif;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

/// Crate version embedded in checkpoints, logs, and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cap the global rayon thread pool. Reads `FSNN_THREADS` when `cap` is
/// `None`; silently keeps the existing pool if one was already built.
pub fn init_threads(cap: Option<usize>) {
    let n = cap.or_else(|| {
        std::env::var("FSNN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
