use rubato::{FftFixedInOut, Resampler};
use weaksep_core::signal::AudioClip;
use weaksep_core::{Error, Result};

/// Band-limited sample-rate conversion; output length is `round(len · to / from)`.
pub fn resample(clip: &AudioClip, to: u32) -> Result<AudioClip> {
    let from = clip.sample_rate;
    if from == to {
        return Ok(clip.clone());
    }
    let err = |e: &dyn std::fmt::Display| Error::Config(format!("resampling {from} Hz to {to} Hz: {e}"));
    let mut r = FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1).map_err(|e| err(&e))?;
    let target = (clip.len() as f64 * to as f64 / from as f64).round() as usize;
    let delay = r.output_delay();
    let mut out = Vec::with_capacity(target + delay);
    let mut pos = 0;
    while pos + r.input_frames_next() <= clip.len() {
        let n = r.input_frames_next();
        let y = r.process(&[&clip.samples[pos..pos + n]], None).map_err(|e| err(&e))?;
        out.extend_from_slice(&y[0]);
        pos += n;
    }
    let y = r.process_partial(Some(&[&clip.samples[pos..]]), None).map_err(|e| err(&e))?;
    out.extend_from_slice(&y[0]);
    while out.len() < target + delay {
        let y = r.process_partial::<&[f64]>(None, None).map_err(|e| err(&e))?;
        if y[0].is_empty() {
            break;
        }
        out.extend_from_slice(&y[0]);
    }
    let mut samples: Vec<f64> = out.into_iter().skip(delay).collect();
    samples.resize(target, 0.0);
    AudioClip::new(samples, to)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_survives_round_trip() {
        let sr = 8000;
        let x: Vec<f64> = (0..8000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()).collect();
        let clip = AudioClip::new(x.clone(), sr).unwrap();
        let up = resample(&clip, 11025).unwrap();
        assert_eq!(up.len(), 11025);
        let back = resample(&up, sr).unwrap();
        let upx: Vec<f64> = (0..11025).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 11025.0).sin()).collect();
        let up_err: f64 = (500..10000).map(|i| (upx[i] - up.samples[i]).powi(2)).sum();
        assert!(up_err < 1e-6, "{up_err}");
        assert_eq!(back.len(), x.len());
        let err: f64 = x[500..7500].iter().zip(&back.samples[500..7500]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let ref_e: f64 = x[500..7500].iter().map(|a| a * a).sum();
        // the downward path lands a fraction of a sample late
        assert!(err / ref_e < 5e-2, "{}", err / ref_e);
    }
}
