//! RAW vs RGB classification benchmark library.
//!
//! The crate covers the full desk-scale experiment:
//!
//! - [`isp`] — deterministic RAW→RGB conversion pipeline (linearization,
//!   white balance, bilinear demosaic, color correction, tone mapping,
//!   gamma, quantization) plus the `.craw` and PPM container formats.
//! - [`rawrep`] — the three RAW classifier-input strategies: Original-RAW
//!   passthrough, Packed-RAW quad rearrangement and the bidirectional
//!   cross-modal attention (BCA) fusion front-end.
//! - [`nn`] — a minimal from-scratch CNN stack (tensors, layers, losses,
//!   SGD with momentum) with tiny VGG- and ResNet-style classifiers.
//! - [`datagen`] — synthetic five-class grain dataset generator producing
//!   paired RAW mosaics and converted RGB images with 70/20/10 splits.
//! - [`bench`] — latency harness measuring per-stage and end-to-end times
//!   for the five input strategies.
//! - [`variant`] — glue assembling a trainable network for each strategy.

pub mod bench;
pub mod datagen;
pub mod isp;
pub mod nn;
pub mod rawrep;
pub mod util;
pub mod variant;
