//! Source-free universal domain adaptation of classifier heads over frozen
//! vision-language embeddings.
//!
//! A head trained on labeled source features is adapted to an unlabeled
//! target set whose classes only partly overlap the source classes. Target
//! features are clustered once, each source class claims its most similar
//! cluster as a positive prototype and treats the rest as negatives, and a
//! target sample becomes a pseudo-labeled known sample only when its text
//! similarity beats every negative. Training then combines those pseudo
//! labels with a text loss and a masked-image consistency loss against an
//! EMA teacher. At inference, high-entropy predictions are rejected as
//! unknown.

pub mod actp;
pub mod adapt;
pub mod classifier;
pub mod clustering;
pub mod data_io;
pub mod error;
pub mod metrics;
pub mod mieci;
pub mod numeric;
pub mod rng;

pub use error::{Error, Result};
