//! Iterative radix-2 FFT, power-of-two lengths only.
//!
//! Feature extraction needs one 512-point transform per frame; a scalar
//! Cooley-Tukey loop covers that without pulling an FFT crate into a
//! `no_std` build.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Smallest power of two >= n.
pub fn next_pow2(n: usize) -> usize {
    let mut p = 1usize;
    while p < n {
        p <<= 1;
    }
    p
}

/// In-place complex FFT over split re/im buffers of power-of-two length.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() {
        return Err(Error::dim(format!("fft: re has {n} samples, im has {}", im.len())));
    }
    if n == 0 || n & (n - 1) != 0 {
        return Err(Error::contract(format!("fft: length {n} is not a power of two")));
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut bit = n >> 1;
        while bit > 0 && j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
    }
    // butterflies
    let mut len = 2usize;
    while len <= n {
        let ang = -2.0 * math::PI / len as f64;
        let (wr, wi) = (math::cos(ang), math::sin(ang));
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
    Ok(())
}

/// Power spectrum |X_k|^2 of a real frame, zero-padded to `fft_size`.
/// Returns `fft_size/2 + 1` bins.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if frame.len() > fft_size {
        return Err(Error::dim(format!(
            "power_spectrum: frame of {} exceeds fft size {fft_size}",
            frame.len()
        )));
    }
    let mut re = vec![0.0; fft_size];
    let mut im = vec![0.0; fft_size];
    re[..frame.len()].copy_from_slice(frame);
    fft_in_place(&mut re, &mut im)?;
    Ok((0..=fft_size / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}
