//! Audio clip → 3-channel (log-Mel, delta, delta-delta) feature image.

mod delta;
mod image;
mod mel;
mod resample;
mod stft;
mod wav;

pub use delta::delta;
pub use image::{read_feature_image, resize_bilinear, write_feature_image, FeatureImage, IMAGE_MAGIC, IMAGE_SIDE};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, power_to_db};
pub use resample::resample;
pub use stft::{stft, Spectrogram};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Analysis settings. Defaults reproduce the standard configuration:
/// 22.05 kHz, 2048-point FFT, hop 1024, Hann window, 224 Mel bands, 80 dB
/// range, 9-frame deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub top_db: f64,
    pub delta_width: usize,
    pub image_side: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 22_050,
            n_fft: 2048,
            hop_length: 1024,
            n_mels: 224,
            fmin: 0.0,
            fmax: None,
            top_db: 80.0,
            delta_width: 9,
            image_side: IMAGE_SIDE,
        }
    }
}

/// Reusable extractor: holds the filterbank and FFT plan for one config.
pub struct FeatureExtractor {
    config: FeatureConfig,
    filterbank: Matrix,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let fmax = config.fmax.unwrap_or(config.sample_rate as f64 / 2.0);
        let filterbank = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.fmin, fmax)?;
        Ok(FeatureExtractor { config, filterbank })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// Resamples to the analysis rate when needed.
    pub fn prepare(&self, clip: &AudioClip) -> Result<AudioClip> {
        if clip.sample_rate() == self.config.sample_rate {
            Ok(clip.clone())
        } else {
            resample(clip, self.config.sample_rate)
        }
    }

    /// Mel power spectrogram `[n_mels × frames]` of a clip already at the
    /// analysis rate.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<Matrix> {
        let spec = stft(clip, self.config.n_fft, self.config.hop_length)?;
        let power = spec.power();
        let fb = &self.filterbank;
        let mut out = Matrix::zeros(fb.rows, power.cols);
        for m in 0..fb.rows {
            let weights = fb.row(m);
            for (k, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let prow = power.row(k);
                let orow = &mut out.data[m * power.cols..(m + 1) * power.cols];
                for (o, p) in orow.iter_mut().zip(prow) {
                    *o += w * p;
                }
            }
        }
        Ok(out)
    }

    /// Log-Mel spectrogram in dB relative to the clip's peak, clipped to
    /// `top_db` below it.
    pub fn log_mel(&self, clip: &AudioClip) -> Result<Matrix> {
        let clip = self.prepare(clip)?;
        let mel = self.mel_power(&clip)?;
        Ok(power_to_db(&mel, self.config.top_db))
    }

    /// The `(log-Mel, delta, delta-delta)` image, resized to
    /// `image_side × image_side` and min-max normalized per channel.
    pub fn feature_image(&self, clip: &AudioClip) -> Result<FeatureImage> {
        let log_mel = self.log_mel(clip)?;
        self.image_from_log_mel(&log_mel)
    }

    pub fn image_from_log_mel(&self, log_mel: &Matrix) -> Result<FeatureImage> {
        let d1 = delta(log_mel, self.config.delta_width, 1)?;
        let d2 = delta(log_mel, self.config.delta_width, 2)?;
        let side = self.config.image_side;
        let channels = [log_mel, &d1, &d2].map(|m| normalize_unit(&resize_bilinear(m, side, side)));
        FeatureImage::from_channels(&channels)
    }
}

/// Min-max scale to `[0, 1]`; a constant matrix maps to 0.5.
fn normalize_unit(m: &Matrix) -> Matrix {
    let (lo, hi) = m.min_max();
    let span = hi - lo;
    let data = if span > 0.0 {
        m.data.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.5; m.data.len()]
    };
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

/// Convenience wrapper over a default [`FeatureExtractor`].
pub fn build_feature_image(clip: &AudioClip) -> Result<FeatureImage> {
    FeatureExtractor::new(FeatureConfig::default())?.feature_image(clip)
}

/// Log-Mel spectrogram with the default configuration.
pub fn log_mel_spectrogram(clip: &AudioClip) -> Result<Matrix> {
    FeatureExtractor::new(FeatureConfig::default())?.log_mel(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32, amp: f64) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, sr).unwrap()
    }

    #[test]
    fn clip_invariants() {
        assert!(AudioClip::new(vec![], 16_000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn image_is_always_224_square_with_three_channels() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        for (secs, sr) in [(0.05, 22_050), (1.3, 16_000), (3.0, 44_100)] {
            let img = fx.feature_image(&sine(440.0, secs, sr, 0.5)).unwrap();
            assert_eq!(img.shape(), (224, 224, 3));
            assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        // a single hop
        let img = fx.feature_image(&AudioClip::new(vec![0.1; 1024], 22_050).unwrap()).unwrap();
        assert_eq!(img.shape(), (224, 224, 3));
    }

    #[test]
    fn zero_clip_gives_floor_and_constant_channels() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let clip = AudioClip::new(vec![0.0; 22_050], 22_050).unwrap();
        let lm = fx.log_mel(&clip).unwrap();
        assert!(lm.data.iter().all(|&v| v == -80.0));
        let img = fx.feature_image(&clip).unwrap();
        for c in 0..3 {
            let first = img.get(0, 0, c);
            assert!((0..224).all(|y| (0..224).all(|x| img.get(y, x, c) == first)));
        }
    }

    #[test]
    fn log_mel_is_invariant_to_gain() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let a = sine(1000.0, 0.5, 22_050, 0.2);
        let b = sine(1000.0, 0.5, 22_050, 0.4);
        let (la, lb) = (fx.log_mel(&a).unwrap(), fx.log_mel(&b).unwrap());
        let diff = la.data.iter().zip(&lb.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn identity_resize_keeps_normalized_log_mel() {
        let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        // 1 + len/hop = 224 frames
        let n = 223 * 1024;
        let samples: Vec<f32> = (0..n).map(|i| ((i as f64 * 0.01).sin() * (i as f64 * 1e-4).cos()) as f32 * 0.3).collect();
        let clip = AudioClip::new(samples, 22_050).unwrap();
        let lm = fx.log_mel(&clip).unwrap();
        assert_eq!(lm.cols, 224);
        let img = fx.feature_image(&clip).unwrap();
        let norm = normalize_unit(&lm);
        for y in 0..224 {
            for x in 0..224 {
                assert!((img.get(y, x, 0) as f64 - norm.get(y, x)).abs() < 1e-6);
            }
        }
    }
}
