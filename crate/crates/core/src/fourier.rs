//! Naive separable 2D DFT and the radial high-pass filter used for detail tokens.

use num_complex::Complex;

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Twiddle table for a length-`n` transform: `e^{sign·2πi·k/n}` for k in 0..n.
fn twiddles<S: Scalar>(n: usize, sign: S) -> Vec<Complex<S>> {
    let tau = S::TAU();
    (0..n)
        .map(|k| {
            let ang = sign * tau * S::from_usize_lossy(k) / S::from_usize_lossy(n);
            Complex::new(ang.cos(), ang.sin())
        })
        .collect()
}

/// 1D DFT of `input`, strided view into a flat buffer. O(n²).
fn dft_line<S: Scalar>(input: &[Complex<S>], tw: &[Complex<S>], out: &mut [Complex<S>]) {
    let n = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex::new(S::zero(), S::zero());
        for (t, &v) in input.iter().enumerate() {
            acc = acc + v * tw[(k * t) % n];
        }
        *o = acc;
    }
}

/// Separable 2D DFT (`sign = -1` forward, `+1` inverse without normalisation).
fn dft2<S: Scalar>(buf: &mut [Complex<S>], h: usize, w: usize, sign: S) {
    let tw_w = twiddles(w, sign);
    let tw_h = twiddles(h, sign);
    let mut line = vec![Complex::new(S::zero(), S::zero()); h.max(w)];
    let mut tmp = line.clone();
    for y in 0..h {
        line[..w].copy_from_slice(&buf[y * w..(y + 1) * w]);
        dft_line(&line[..w], &tw_w, &mut tmp[..w]);
        buf[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            line[y] = buf[y * w + x];
        }
        dft_line(&line[..h], &tw_h, &mut tmp[..h]);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
}

/// Radial distance of frequency bin (u, v), using the signed (wrapped) index on each axis.
fn radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fu = u.min(h - u) as f64;
    let fv = v.min(w - v) as f64;
    (fu * fu + fv * fv).sqrt()
}

pub fn check_cutoff(cutoff_frac: f64) -> Result<()> {
    if !(cutoff_frac > 0.0 && cutoff_frac <= 1.0) {
        return Err(DapeError::Config(format!("high-pass cutoff must lie in (0, 1], got {cutoff_frac}")));
    }
    Ok(())
}

/// Remove every frequency bin whose radius is at most `cutoff_frac · r_max`.
///
/// `r_max` is the radius of the Nyquist corner, so `cutoff_frac = 1` removes
/// everything and `cutoff_frac → 0` removes only the DC bin.
pub fn highpass_fourier<S: Scalar>(x: &Tensor<S>, cutoff_frac: f64) -> Result<Tensor<S>> {
    check_cutoff(cutoff_frac)?;
    let (h, w) = x.require_matrix("highpass_fourier")?;
    let mut buf: Vec<Complex<S>> = x.data().iter().map(|&v| Complex::new(v, S::zero())).collect();
    dft2(&mut buf, h, w, -S::one());
    let r_max = radius(h / 2, w / 2, h, w);
    let cut = cutoff_frac * r_max;
    for u in 0..h {
        for v in 0..w {
            if radius(u, v, h, w) <= cut {
                buf[u * w + v] = Complex::new(S::zero(), S::zero());
            }
        }
    }
    dft2(&mut buf, h, w, S::one());
    let norm = S::from_usize_lossy(h * w);
    Tensor::new(&[h, w], buf.iter().map(|c| c.re / norm).collect())
}

/// Apply [`highpass_fourier`] to every channel of an `h×w×c` map.
pub fn highpass_channels<S: Scalar>(x: &Tensor<S>, cutoff_frac: f64) -> Result<Tensor<S>> {
    let (h, w, c) = x.require_rank3("highpass_channels")?;
    let mut out = vec![S::zero(); h * w * c];
    for ch in 0..c {
        let plane = Tensor::from_fn(&[h, w], |i| x.data()[i * c + ch]);
        let hp = highpass_fourier(&plane, cutoff_frac)?;
        for (i, &v) in hp.data().iter().enumerate() {
            out[i * c + ch] = v;
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Real multiply-accumulates performed by one separable forward+inverse pass.
pub fn highpass_macs(h: usize, w: usize) -> u64 {
    // each complex MAC is four real ones; rows then columns, twice
    let per_pass = (h * w * w + w * h * h) as u64;
    2 * 4 * per_pass
}
