//! Unit conversions used at the interface of the library.
//!
//! All internal computations keep angular frequency deviations in rad/s; case
//! files, CSV output, and reports use Hz.

use std::f64::consts::PI;

/// Converts a frequency deviation in Hz to rad/s.
pub fn hz_to_rad_s(hz: f64) -> f64 {
    2.0 * PI * hz
}

/// Converts a frequency deviation in rad/s to Hz.
pub fn rad_s_to_hz(rad_s: f64) -> f64 {
    rad_s / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        assert_eq!(rad_s_to_hz(hz_to_rad_s(0.2)), 0.2);
        assert!((hz_to_rad_s(1.0) - 6.283185307179586).abs() < 1e-15);
    }
}
