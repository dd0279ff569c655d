use super::Matrix;
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centers evenly spaced in mel, each scaled by
/// `2 / (upper − lower)` so every filter has unit area in Hz.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Matrix> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
        return Err(Error::invalid(format!(
            "invalid mel range [{fmin}, {fmax}] for sample rate {sample_rate}"
        )));
    }
    let bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    let mut fb = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            let w = up.min(down).max(0.0);
            if w > 0.0 {
                fb.set(m, k, w * norm);
            }
        }
    }
    Ok(fb)
}

/// Power to dB relative to the peak, floored `top_db` below it. A silent
/// input has no reference and maps entirely to the floor.
pub fn power_to_db(power: &Matrix, top_db: f64) -> Matrix {
    const AMIN: f64 = 1e-10;
    let peak = power.data.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Matrix {
            rows: power.rows,
            cols: power.cols,
            data: vec![-top_db; power.data.len()],
        };
    }
    let ref_db = 10.0 * peak.max(AMIN).log10();
    let mut data: Vec<f64> = power.data.iter().map(|&p| 10.0 * p.max(AMIN).log10() - ref_db).collect();
    let top = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut data {
        *v = v.max(top - top_db);
    }
    Matrix {
        rows: power.rows,
        cols: power.cols,
        data,
    }
}
