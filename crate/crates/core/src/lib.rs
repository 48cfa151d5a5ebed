//! Multi-source dynamic contrastive domain adaptation (MS-DCDA) for
//! cross-subject and cross-session EEG emotion recognition.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod io;
pub mod losses;
pub mod model;
pub mod ndiff;
pub mod trainer;

pub use error::{Error, Result};
