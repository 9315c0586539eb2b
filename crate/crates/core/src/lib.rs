//! Adaptive focal losses, mask-adaptive matching, clicks-aware masked
//! attention and click-simulation evaluation for interactive segmentation,
//! exercised on small synthetic images.
//!
//! Start with [`losses`] and [`adaptive`] for the loss family, [`matching`]
//! for set prediction, [`attention`] for the toy decoder and [`clicksim`] for
//! NoC evaluation. [`commands`] backs the `adafocal` binary.

pub mod adaptive;
pub mod attention;
pub mod clicksim;
pub mod commands;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod matching;
pub mod rng;
pub mod synthgen;
pub mod trainer;
pub mod verify;

pub use adaptive::{afl, AflDiagnostics, AflParams};
pub use error::{Error, Result};
pub use field::{binarize, iou, pt_map, BinaryMask, Field, ProbMap, PtMap};
pub use losses::{LossOutput, LossSpec, Reduction};
pub use rng::Seed;
