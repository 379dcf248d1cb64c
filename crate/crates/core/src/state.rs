//! Two-valued ion state and bitstring helpers.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Readout state of a single ion.
///
/// `Bright` is the fluorescing qubit state |0⟩, `Dark` the shelved state |1⟩.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IonState {
    Bright,
    Dark,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstringError {
    #[error("invalid state symbol {0:?} (expected '0' or '1')")]
    InvalidSymbol(char),
}

impl IonState {
    /// Computational-basis bit: '0' for bright, '1' for dark.
    pub fn bit(self) -> char {
        match self {
            IonState::Bright => '0',
            IonState::Dark => '1',
        }
    }

    pub fn from_bit(c: char) -> Result<Self, BitstringError> {
        match c {
            '0' => Ok(IonState::Bright),
            '1' => Ok(IonState::Dark),
            other => Err(BitstringError::InvalidSymbol(other)),
        }
    }

    pub fn is_bright(self) -> bool {
        self == IonState::Bright
    }

    /// SVM class label: −1 for bright, +1 for dark.
    pub fn svm_label(self) -> f64 {
        match self {
            IonState::Bright => -1.0,
            IonState::Dark => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            IonState::Bright => IonState::Dark,
            IonState::Dark => IonState::Bright,
        }
    }
}

impl fmt::Display for IonState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IonState::Bright => f.write_str("bright"),
            IonState::Dark => f.write_str("dark"),
        }
    }
}

pub fn parse_bitstring(s: &str) -> Result<Vec<IonState>, BitstringError> {
    s.chars().map(IonState::from_bit).collect()
}

pub fn format_bitstring(states: &[IonState]) -> String {
    states.iter().map(|s| s.bit()).collect()
}
