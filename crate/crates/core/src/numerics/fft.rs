//! Radix-2 complex FFT with unitary scaling.
//!
//! Both directions scale by `1/sqrt(n)` per axis, so the 2D transform is
//! unitary and its adjoint is the inverse transform. Index 0 holds the zero
//! frequency (no shift).

use std::f64::consts::PI;

use super::tensor::{ComplexTensor, C64};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Precomputed twiddles and bit-reversal table for one length.
#[derive(Clone, Debug)]
pub struct Fft1d {
    n: usize,
    twiddles: Vec<C64>,
    reversed: Vec<usize>,
    scale: f64,
}

impl Fft1d {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "FFT length {n} is not a power of two"
            )));
        }
        let bits = n.trailing_zeros();
        let reversed = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| C64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self {
            n,
            twiddles,
            reversed,
            scale: 1.0 / (n as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform of a contiguous buffer of length `n`.
    pub fn process(&self, buf: &mut [C64], dir: Direction) {
        debug_assert_eq!(buf.len(), self.n);
        let n = self.n;
        for i in 0..n {
            let j = self.reversed[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let tw = self.twiddles[k * stride];
                    let tw = match dir {
                        Direction::Forward => tw,
                        Direction::Inverse => tw.conj(),
                    };
                    let a = buf[start + k];
                    let b = buf[start + k + half] * tw;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }
}

/// Reusable 2D plan for an `h × w` row-major grid.
#[derive(Clone, Debug)]
pub struct Fft2Plan {
    rows: Fft1d,
    cols: Fft1d,
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            rows: Fft1d::new(h)?,
            cols: Fft1d::new(w)?,
        })
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }

    pub fn process(&self, data: &mut [C64], dir: Direction) {
        let (h, w) = (self.rows.len(), self.cols.len());
        debug_assert_eq!(data.len(), h * w);
        for row in data.chunks_exact_mut(w) {
            self.cols.process(row, dir);
        }
        let mut column = vec![C64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            self.rows.process(&mut column, dir);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
    }
}

/// Unitary 2D FFT of an `H × W` tensor.
pub fn fft2(img: &ComplexTensor, dir: Direction) -> Result<ComplexTensor> {
    let dims = img.dims();
    if dims.len() != 2 {
        return Err(Error::Dimension(format!(
            "fft2 expects a 2D tensor, got dims {dims:?}"
        )));
    }
    let plan = Fft2Plan::new(dims[0], dims[1])?;
    let mut out = img.clone();
    plan.process(out.data_mut(), dir);
    Ok(out)
}
