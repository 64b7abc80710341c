//! Canonical float formatting for serialized artifacts.
//!
//! Every float written to JSON goes through [`fmt_f64`] so that re-serializing
//! parsed data is byte-identical. 17 significant digits round-trip any f64.

/// Formats with 17 significant digits in scientific notation, e.g. `2.5000000000000000e-1`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}
