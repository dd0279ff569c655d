use std::f64::consts::PI;

use super::AudioClip;
use crate::error::Result;

/// Zero crossings of the sinc kernel on each side.
const HALF_TAPS: f64 = 16.0;

/// Band-limited resampling by Hann-windowed sinc interpolation. When
/// downsampling, the cutoff drops to the new Nyquist.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let src_rate = clip.sample_rate();
    if src_rate == target_rate {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let ratio = target_rate as f64 / src_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let out_len = ((x.len() as f64 * ratio).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 / ratio;
        let lo = ((t - half_width).ceil().max(0.0)) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - k as f64;
            acc += xk as f64 * kernel(d, cutoff, half_width);
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    AudioClip::new(out, target_rate)
}

fn kernel(d: f64, cutoff: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        return 0.0;
    }
    let arg = PI * cutoff * d;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    let window = 0.5 + 0.5 * (PI * d / half_width).cos();
    cutoff * sinc * window
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn length_scales_with_rate() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        assert_eq!(resample(&clip, 22_050).unwrap().samples().len(), 22_050);
        assert_eq!(resample(&clip, 8_000).unwrap().samples().len(), 8_000);
    }

    #[test]
    fn in_band_tone_survives_upsampling() {
        let clip = AudioClip::new(tone(440.0, 16_000, 16_000), 16_000).unwrap();
        let up = resample(&clip, 22_050).unwrap();
        let expect = tone(440.0, 22_050, 22_050);
        // away from the edges the interpolant matches the analytic tone
        let err = up.samples()[500..21_500]
            .iter()
            .zip(&expect[500..21_500])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn out_of_band_tone_is_suppressed_when_downsampling() {
        // 6 kHz is above the 4 kHz Nyquist of the target rate
        let clip = AudioClip::new(tone(6000.0, 16_000, 16_000), 16_000).unwrap();
        let down = resample(&clip, 8_000).unwrap();
        let rms = (down.samples()[200..7800].iter().map(|v| (v * v) as f64).sum::<f64>() / 7600.0).sqrt();
        assert!(rms < 0.02, "{rms}");
    }
}
