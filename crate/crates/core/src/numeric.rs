//! Floating-point helpers shared by every metric.

use alloc::format;
use alloc::string::String;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if libm::fabs(self.sum) >= libm::fabs(x) {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Decimal places used for every published score.
pub const PUBLISHED_DECIMALS: i32 = 6;

/// Round half to even at `decimals` places.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scale = libm::pow(10.0, decimals as f64);
    let scaled = x * scale;
    let floor = libm::floor(scaled);
    let diff = scaled - floor;
    let rounded = if diff > 0.5 {
        floor + 1.0
    } else if diff < 0.5 {
        floor
    } else if libm::fmod(floor, 2.0) == 0.0 {
        floor
    } else {
        floor + 1.0
    };
    rounded / scale
}

/// Render a score for publication: half-even at six decimals, fixed width.
pub fn format_score(x: f64) -> String {
    let r = round_half_even(x, PUBLISHED_DECIMALS);
    // avoid "-0.000000"
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_beats_naive() {
        let xs = [1e16, 1.0, -1e16];
        let acc: CompensatedSum = xs.iter().copied().collect();
        assert_eq!(acc.value(), 1.0);
    }

    #[test]
    fn half_even() {
        assert_eq!(round_half_even(0.5, 0), 0.0);
        assert_eq!(round_half_even(1.5, 0), 2.0);
        assert_eq!(round_half_even(2.5, 0), 2.0);
        assert_eq!(round_half_even(2.51, 0), 3.0);
        assert_eq!(format_score(5.0 / 6.0), "0.833333");
        assert_eq!(format_score(0.75), "0.750000");
        assert_eq!(format_score(-0.0), "0.000000");
    }
}
