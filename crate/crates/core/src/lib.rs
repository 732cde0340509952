//! Abstractive summarization of arbitrarily long documents with an attentive
//! pointer-generator encoder-decoder whose encoder slides over fixed-size
//! windows of the source text.
//!
//! Three window-transition policies are supported:
//!
//! * [`Mode::Stan`] - a single window covering the (truncated) input.
//! * [`Mode::Swm`] - static windowing: per-window token budgets derived from
//!   training-corpus length statistics.
//! * [`Mode::Dwm`] - dynamic windowing: the decoder emits a shift token `-->`
//!   to move the encoder to the next window.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod inference;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod windowing;

mod error;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Window-transition policy of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Stan,
    Swm,
    Dwm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stan => "stan",
            Mode::Swm => "swm",
            Mode::Dwm => "dwm",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stan" => Ok(Mode::Stan),
            "swm" => Ok(Mode::Swm),
            "dwm" => Ok(Mode::Dwm),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected stan, swm or dwm)"))),
        }
    }
}
