//! WAV ingestion, log-mel spectrograms and waveform mixing.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};

pub const TARGET_RATE: u32 = 16_000;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(IerError::domain("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(IerError::domain("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a PCM16 or float32 WAV file, downmixes to mono and resamples to
/// 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => IerError::io(path, io),
        other => IerError::Format(format!("{}: {other}", path.display())),
    })?;
    decode_wav(reader)
}

/// Like [`load_wav`] but from an in-memory byte buffer.
pub fn load_wav_bytes(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes))
        .map_err(|e| IerError::Format(e.to_string()))?;
    decode_wav(reader)
}

fn decode_wav<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(IerError::Format(format!(
            "unsupported channel count {channels}"
        )));
    }
    let fmt = |e: hound::Error| IerError::Format(e.to_string());
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(fmt)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(fmt)?,
        (format, bits) => {
            return Err(IerError::Format(format!(
                "unsupported codec: {format:?} with {bits} bits per sample"
            )))
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    Ok(resample_linear(&wave, TARGET_RATE))
}

/// Linear-interpolation resampling; `N` input samples become
/// `floor((N - 1) · target / rate) + 1` output samples.
pub fn resample_linear(wave: &Waveform, target: u32) -> Waveform {
    if wave.sample_rate == target || wave.samples.len() < 2 {
        return Waveform {
            samples: wave.samples.clone(),
            sample_rate: target,
        };
    }
    let n = wave.samples.len();
    let out_len = ((n - 1) as u64 * target as u64 / wave.sample_rate as u64) as usize + 1;
    let ratio = wave.sample_rate as f64 / target as f64;
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let lo = (t.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = t - lo as f64;
            wave.samples[lo] * (1.0 - frac) + wave.samples[hi] * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target,
    }
}

/// Writes a mono PCM16 WAV file.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => IerError::io(path, io),
        other => IerError::Format(other.to_string()),
    })?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| IerError::Format(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| IerError::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            window_s: 0.160,
            hop_s: 0.080,
            bins: 64,
            f_min: 20.0,
            f_max: 8000.0,
        }
    }
}

/// `T × F` log-mel matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
    pub window_s: f64,
    pub hop_s: f64,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `bins × (n_fft / 2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
    /// Lower edge, center and upper edge of each filter in Hz.
    pub edges: Vec<(f64, f64, f64)>,
}

impl MelFilterbank {
    pub fn new(bins: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let points: Vec<f64> = (0..bins + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (bins + 1) as f64))
            .collect();
        let n_freqs = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = Vec::with_capacity(bins);
        let mut edges = Vec::with_capacity(bins);
        for b in 0..bins {
            let (lo, mid, hi) = (points[b], points[b + 1], points[b + 2]);
            edges.push((lo, mid, hi));
            weights.push(
                (0..n_freqs)
                    .map(|k| triangle(k as f64 * bin_hz, lo, mid, hi))
                    .collect(),
            );
        }
        MelFilterbank { weights, edges }
    }

    /// Index of the filter with the largest response at `hz`.
    pub fn bin_for(&self, hz: f64) -> usize {
        let resp: Vec<f64> = self
            .edges
            .iter()
            .map(|&(lo, mid, hi)| triangle(hz, lo, mid, hi))
            .collect();
        crate::numerics::argmax(&resp).unwrap_or(0)
    }
}

fn triangle(f: f64, lo: f64, mid: f64, hi: f64) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f <= mid {
        (f - lo) / (mid - lo)
    } else {
        (hi - f) / (hi - mid)
    }
}

/// Hann-windowed DFT magnitudes pooled by a mel filterbank, then `ln(x + 1e-10)`.
///
/// Frames are not padded; a trailing partial window is dropped.
pub fn log_mel(wave: &Waveform, config: &MelConfig) -> Result<LogMelSpectrogram> {
    let win = (config.window_s * wave.sample_rate as f64).round() as usize;
    let hop = (config.hop_s * wave.sample_rate as f64).round() as usize;
    if win == 0 || hop == 0 || config.bins == 0 {
        return Err(IerError::domain("window, hop and bin count must be positive"));
    }
    if wave.samples.len() < win {
        return Err(IerError::domain(format!(
            "clip of {} samples is shorter than one {win}-sample window",
            wave.samples.len()
        )));
    }
    let frames = (wave.samples.len() - win) / hop + 1;
    let bank = MelFilterbank::new(config.bins, win, wave.sample_rate, config.f_min, config.f_max);
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut data = Vec::with_capacity(frames * config.bins);
    for t in 0..frames {
        let start = t * hop;
        for (dst, (s, w)) in buf
            .iter_mut()
            .zip(wave.samples[start..start + win].iter().zip(&hann))
        {
            *dst = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..win / 2 + 1].iter().map(|c| c.norm()).collect();
        for weights in &bank.weights {
            let energy: f64 = weights.iter().zip(&mags).map(|(w, m)| w * m).sum();
            data.push((energy + LOG_FLOOR).ln());
        }
    }
    Ok(LogMelSpectrogram {
        frames,
        bins: config.bins,
        data,
        window_s: config.window_s,
        hop_s: config.hop_s,
    })
}

/// Pointwise mean of the clips, truncated to the shortest one.
pub fn mix_waveforms(waves: &[Waveform]) -> Result<Waveform> {
    let first = waves
        .first()
        .ok_or_else(|| IerError::domain("cannot mix an empty list of waveforms"))?;
    if waves.iter().any(|w| w.sample_rate != first.sample_rate) {
        return Err(IerError::domain("sample rates differ"));
    }
    let len = waves.iter().map(Waveform::len).min().unwrap_or(0);
    let inv = 1.0 / waves.len() as f64;
    let samples = (0..len)
        .map(|i| waves.iter().map(|w| w.samples[i]).sum::<f64>() * inv)
        .collect();
    Waveform::new(samples, first.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * TARGET_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / TARGET_RATE as f64).sin())
            .collect();
        Waveform::new(samples, TARGET_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_eleven_frames() {
        let spec = log_mel(&sine(440.0, 1.0, 0.5), &MelConfig::default()).unwrap();
        assert_eq!((spec.frames, spec.bins), (11, 64));
        assert_eq!(spec.data.len(), 11 * 64);
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], TARGET_RATE).unwrap();
        let spec = log_mel(&w, &MelConfig::default()).unwrap();
        assert!(spec.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_clip_is_rejected() {
        let w = Waveform::new(vec![0.1; 2559], TARGET_RATE).unwrap();
        assert!(matches!(
            log_mel(&w, &MelConfig::default()),
            Err(IerError::Domain(_))
        ));
    }

    #[test]
    fn resample_length_formula() {
        let w = Waveform::new((0..101).map(|i| i as f64 / 200.0).collect(), 8000).unwrap();
        let r = resample_linear(&w, TARGET_RATE);
        assert_eq!(r.len(), 201);
        // linear ramp is reproduced exactly at the midpoints
        assert!((r.samples[1] - 0.5 / 200.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_examples() {
        let x = sine(300.0, 0.1, 0.4);
        assert_eq!(mix_waveforms(&[x.clone(), x.clone()]).unwrap(), x);
        let neg = Waveform::new(x.samples.iter().map(|v| -v).collect(), TARGET_RATE).unwrap();
        assert!(mix_waveforms(&[x.clone(), neg])
            .unwrap()
            .samples
            .iter()
            .all(|&v| v == 0.0));

        let peaks = [0.3, 0.6, 0.9];
        let waves: Vec<Waveform> = peaks.iter().map(|&a| sine(250.0, 0.05, a)).collect();
        let mixed = mix_waveforms(&waves).unwrap();
        let peak = mixed.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 0.6 + 1e-12);

        assert!(mix_waveforms(&[]).is_err());
        let other = Waveform::new(vec![0.0; 10], 8000).unwrap();
        assert!(mix_waveforms(&[x, other]).is_err());
    }

    #[test]
    fn mixing_truncates_to_shortest() {
        let a = Waveform::new(vec![1.0; 10], TARGET_RATE).unwrap();
        let b = Waveform::new(vec![0.0; 4], TARGET_RATE).unwrap();
        assert_eq!(mix_waveforms(&[a, b]).unwrap().samples, vec![0.5; 4]);
    }

    #[test]
    fn malformed_wav_is_a_format_error() {
        assert!(matches!(
            load_wav_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk"),
            Err(IerError::Format(_))
        ));
    }
}
