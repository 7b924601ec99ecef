//! Accelerator memory needed to hold a model's parameters, and optionally
//! one gradient per parameter, at a given precision.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Bytes per decimal gigabyte.
pub const GB: u128 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float32,
    Float16,
}

impl Precision {
    pub fn bytes_per_parameter(self) -> u8 {
        match self {
            Precision::Float32 => 4,
            Precision::Float16 => 2,
        }
    }
}

impl FromStr for Precision {
    type Err = UnknownPrecision;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "float32" | "f32" => Ok(Precision::Float32),
            "fp16" | "float16" | "f16" => Ok(Precision::Float16),
            _ => Err(UnknownPrecision),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownPrecision;

impl fmt::Display for UnknownPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("precision must be fp32 or fp16")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub parameter_count: u64,
    pub bytes_per_parameter: u8,
    pub with_gradients: bool,
    pub total_bytes: u128,
}

impl MemoryEstimate {
    /// `parameter_count × bytes_per_parameter × (2 if with_gradients else 1)`.
    /// `None` for a zero parameter count.
    pub fn new(parameter_count: u64, precision: Precision, with_gradients: bool) -> Option<Self> {
        if parameter_count == 0 {
            return None;
        }
        let bytes_per_parameter = precision.bytes_per_parameter();
        let copies = if with_gradients { 2 } else { 1 };
        Some(MemoryEstimate {
            parameter_count,
            bytes_per_parameter,
            with_gradients,
            total_bytes: parameter_count as u128 * bytes_per_parameter as u128 * copies,
        })
    }

    /// Total in decimal gigabytes.
    pub fn gigabytes(&self) -> f64 {
        self.total_bytes as f64 / GB as f64
    }
}

impl fmt::Display for MemoryEstimate {
    /// `"<bytes> bytes (<gb> GB)"`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = if self.total_bytes == 1 { "byte" } else { "bytes" };
        write!(f, "{} {unit} ({} GB)", self.total_bytes, self.gigabytes())
    }
}
