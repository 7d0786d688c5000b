//! Gray-mapped square QAM with unit average power.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qam {
    order: usize,
}

impl Qam {
    /// `order` in {4, 16, 64}.
    pub fn new(order: usize) -> Result<Self> {
        match order {
            4 | 16 | 64 => Ok(Self { order }),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported modulation order {order} (expected 4, 16 or 64)"
            ))),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.order.trailing_zeros() as usize
    }

    fn levels_per_axis(&self) -> usize {
        1 << (self.bits_per_symbol() / 2)
    }

    fn scale(&self) -> f64 {
        let l = self.levels_per_axis() as f64;
        // mean of (2i - L + 1)^2 over one axis, doubled for I and Q
        (2.0 * (l * l - 1.0) / 3.0).sqrt()
    }

    fn pam(&self, bits: &[u8]) -> f64 {
        let mut gray = 0usize;
        for &b in bits {
            gray = (gray << 1) | b as usize;
        }
        let mut bin = gray;
        let mut shift = gray >> 1;
        while shift != 0 {
            bin ^= shift;
            shift >>= 1;
        }
        2.0 * bin as f64 - (self.levels_per_axis() as f64 - 1.0)
    }

    fn pam_bits(&self, x: f64, out: &mut Vec<u8>) {
        let l = self.levels_per_axis();
        let idx = (((x + (l as f64 - 1.0)) / 2.0).round()).clamp(0.0, (l - 1) as f64) as usize;
        let gray = idx ^ (idx >> 1);
        let n = self.bits_per_symbol() / 2;
        for s in (0..n).rev() {
            out.push(((gray >> s) & 1) as u8);
        }
    }

    /// Maps `bits_per_symbol` bits: first half on I, second half on Q.
    pub fn modulate(&self, bits: &[u8]) -> Complex64 {
        let half = self.bits_per_symbol() / 2;
        Complex64::new(self.pam(&bits[..half]), self.pam(&bits[half..2 * half])) / self.scale()
    }

    /// Nearest-point hard decision, appending bits to `out`.
    pub fn demodulate(&self, z: Complex64, out: &mut Vec<u8>) {
        let s = self.scale();
        self.pam_bits(z.re * s, out);
        self.pam_bits(z.im * s, out);
    }
}
