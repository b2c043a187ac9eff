//! Decimal rendering shared by checkpoints and metric files.

/// Renders `x` in scientific notation with 17 significant digits.
///
/// Seventeen digits are enough for any `f64` to parse back to the same bits,
/// so files written with this format round-trip exactly.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}
