use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioClip, Matrix};
use crate::error::{Error, Result};

/// Complex short-time spectrum, `[n_fft/2 + 1 × frames]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    #[inline]
    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> Matrix {
        Matrix {
            rows: self.bins,
            cols: self.frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    pub fn power(&self) -> Matrix {
        Matrix {
            rows: self.bins,
            cols: self.frames,
            data: self.data.iter().map(|c| c.norm_sqr()).collect(),
        }
    }
}

/// Periodic Hann window of length `n`.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Index into `x` after reflect-padding by `pad` on both sides (mirror
/// without repeating the edge sample, folding as many times as needed).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT with a periodic Hann window; frame `t` covers samples
/// `[t·hop − n_fft/2, t·hop + n_fft/2)` of the reflect-padded signal.
pub fn stft(clip: &AudioClip, n_fft: usize, hop_length: usize) -> Result<Spectrogram> {
    if n_fft < 2 || !n_fft.is_power_of_two() {
        return Err(Error::invalid(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop_length == 0 {
        return Err(Error::invalid("hop_length must be positive"));
    }
    let x = clip.samples();
    let frames = 1 + x.len() / hop_length;
    let bins = n_fft / 2 + 1;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    let half = (n_fft / 2) as isize;
    for t in 0..frames {
        let start = (t * hop_length) as isize - half;
        for (n, b) in buf.iter_mut().enumerate() {
            let s = x[reflect_index(start + n as isize, x.len())] as f64;
            *b = Complex64::new(s * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in buf.iter().take(bins).enumerate() {
            data[k * frames + t] = *v;
        }
    }
    Ok(Spectrogram { bins, frames, data })
}
