//! Audio front end: resampling, fixed-length segmentation, log-mel
//! spectrograms, channel stacking and bilinear resizing.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sonovis_diff::{par, Tensor};

use crate::error::{CoreError, Result};

/// Multi-channel audio with amplitudes in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(CoreError::invalid("audio clip needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(CoreError::invalid("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(CoreError::invalid("audio channels differ in length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("audio contains non-finite samples"));
        }
        Ok(AudioClip { channels, sample_rate })
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Zero crossings of the windowed-sinc kernel on each side.
const SINC_ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel. Kernel weights
/// are renormalised per output sample, so constant signals pass unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(CoreError::invalid("target rate must be positive"));
    }
    if clip.is_empty() {
        return Err(CoreError::invalid("cannot resample an empty clip"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = dst / src;
    let out_len = ((clip.len() as f64) * ratio).round().max(1.0) as usize;
    // cutoff in cycles per input sample
    let cutoff = 0.5 * ratio.min(1.0) * ROLLOFF;
    let half_width = SINC_ZERO_CROSSINGS / (2.0 * cutoff);
    let len = clip.len() as isize;
    let channels = par::map_range(clip.num_channels(), |c| {
        let x = &clip.channels[c];
        (0..out_len)
            .map(|n| {
                let t = n as f64 / ratio;
                let lo = ((t - half_width).ceil() as isize).max(0);
                let hi = ((t + half_width).floor() as isize).min(len - 1);
                let (mut acc, mut norm) = (0.0f64, 0.0f64);
                for j in lo..=hi {
                    let d = t - j as f64;
                    let w = sinc(2.0 * cutoff * d) * 0.5 * (1.0 + (PI * d / half_width).cos());
                    acc += w * x[j as usize] as f64;
                    norm += w;
                }
                if norm.abs() > 1e-12 {
                    (acc / norm) as f32
                } else {
                    0.0
                }
            })
            .collect::<Vec<f32>>()
    });
    AudioClip::new(channels, target_rate)
}

/// Splits into consecutive non-overlapping windows of
/// `round(window_seconds * rate)` samples; a short tail is dropped.
pub fn segment(clip: &AudioClip, window_seconds: f64) -> Result<Vec<AudioClip>> {
    if window_seconds.is_nan() || window_seconds <= 0.0 {
        return Err(CoreError::invalid("window length must be positive"));
    }
    let win = (window_seconds * clip.sample_rate as f64).round() as usize;
    if win == 0 {
        return Err(CoreError::invalid("window shorter than one sample"));
    }
    (0..clip.len() / win)
        .map(|s| {
            let chans = clip.channels.iter().map(|c| c[s * win..(s + 1) * win].to_vec()).collect();
            AudioClip::new(chans, clip.sample_rate)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumScale {
    /// `|X|`
    Magnitude,
    /// `|X|^2`
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    /// Window length in samples; also the FFT size.
    pub window_length: usize,
    pub hop_length: usize,
    pub mel_bins: usize,
    pub sample_rate: u32,
    pub scale: SpectrumScale,
    /// Apply `log(1 + x)` after the filterbank.
    pub log_compress: bool,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams {
            window_length: 2048,
            hop_length: 256,
            mel_bins: 256,
            sample_rate: 22_050,
            scale: SpectrumScale::Magnitude,
            log_compress: true,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.hop_length == 0 || self.mel_bins == 0 || self.sample_rate == 0 {
            return Err(CoreError::Config(format!("invalid mel parameters {self:?}")));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.window_length).then(|| (len - self.window_length) / self.hop_length + 1)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge frequencies (Hz) of `bins` triangular filters spanning 0 Hz to
/// Nyquist: filter `k` rises over `[e[k], e[k+1]]` and falls over
/// `[e[k+1], e[k+2]]`.
pub fn mel_edges(bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64))
        .collect()
}

/// Centre frequency of mel filter `k`.
pub fn mel_center_hz(k: usize, bins: usize, sample_rate: u32) -> f64 {
    mel_edges(bins, sample_rate)[k + 1]
}

/// Triangular filters (peak 1) sampled at the FFT bin frequencies.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    bins: usize,
    fft_bins: usize,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f32>)>,
}

impl MelFilterbank {
    pub fn new(params: &MelParams) -> Self {
        let fft_bins = params.window_length / 2 + 1;
        let edges = mel_edges(params.mel_bins, params.sample_rate);
        let bin_hz = params.sample_rate as f64 / params.window_length as f64;
        let filters = (0..params.mel_bins)
            .map(|k| {
                let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
                let weights: Vec<(usize, f32)> = (0..fft_bins)
                    .filter_map(|j| {
                        let f = j as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((j, w as f32))
                    })
                    .collect();
                let start = weights.first().map_or(0, |w| w.0);
                (start, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();
        MelFilterbank {
            bins: params.mel_bins,
            fft_bins,
            filters,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn apply(&self, spectrum: &[f32], out: &mut [f32]) {
        debug_assert_eq!(spectrum.len(), self.fft_bins);
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&spectrum[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// `N x T x W` mel spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor<f32>,
    pub params: MelParams,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Reusable STFT + filterbank state for one parameter set.
pub struct MelAnalyzer {
    params: MelParams,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    filterbank: MelFilterbank,
}

impl MelAnalyzer {
    pub fn new(params: MelParams) -> Result<Self> {
        params.validate()?;
        let l = params.window_length;
        // periodic Hann
        let window = (0..l)
            .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / l as f64).cos()) as f32)
            .collect();
        Ok(MelAnalyzer {
            params,
            window,
            fft: FftPlanner::new().plan_fft_forward(l),
            filterbank: MelFilterbank::new(&params),
        })
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Single-channel spectrogram (`1 x T x W`). Frames lie fully inside
    /// the signal; there is no padding.
    pub fn spectrogram(&self, samples: &[f32], sample_rate: u32) -> Result<Spectrogram> {
        let p = &self.params;
        if sample_rate != p.sample_rate {
            return Err(CoreError::invalid(format!(
                "signal at {sample_rate} Hz, analyzer configured for {} Hz",
                p.sample_rate
            )));
        }
        let frames = p.frames(samples.len()).ok_or_else(|| {
            CoreError::invalid(format!(
                "segment of {} samples is shorter than the {}-sample window",
                samples.len(),
                p.window_length
            ))
        })?;
        let l = p.window_length;
        let w = p.mel_bins;
        let mut out = vec![0.0f32; frames * w];
        let mut buf = vec![Complex::new(0.0f32, 0.0); l];
        let mut spectrum = vec![0.0f32; l / 2 + 1];
        for t in 0..frames {
            let frame = &samples[t * p.hop_length..t * p.hop_length + l];
            for ((b, &x), &win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x * win, 0.0);
            }
            self.fft.process(&mut buf);
            for (s, b) in spectrum.iter_mut().zip(&buf) {
                *s = match p.scale {
                    SpectrumScale::Magnitude => b.norm(),
                    SpectrumScale::Power => b.norm_sqr(),
                };
            }
            let row = &mut out[t * w..(t + 1) * w];
            self.filterbank.apply(&spectrum, row);
            if p.log_compress {
                row.iter_mut().for_each(|v| *v = v.ln_1p());
            }
        }
        Ok(Spectrogram {
            values: Tensor::new(vec![1, frames, w], out)?,
            params: *p,
        })
    }
}

pub fn mel_spectrogram(samples: &[f32], sample_rate: u32, params: MelParams) -> Result<Spectrogram> {
    MelAnalyzer::new(params)?.spectrogram(samples, sample_rate)
}

/// Concatenates single- or multi-channel spectrograms along the channel
/// axis, preserving order.
pub fn stack_channels(specs: &[Spectrogram]) -> Result<Spectrogram> {
    let first = specs.first().ok_or_else(|| CoreError::invalid("no spectrograms to stack"))?;
    let mut data = Vec::new();
    let mut n = 0;
    for s in specs {
        if s.frames() != first.frames() || s.bins() != first.bins() || s.params != first.params {
            return Err(CoreError::invalid(format!(
                "cannot stack {:?} with {:?}",
                s.values.shape(),
                first.values.shape()
            )));
        }
        n += s.channels();
        data.extend_from_slice(s.values.data());
    }
    Ok(Spectrogram {
        values: Tensor::new(vec![n, first.frames(), first.bins()], data)?,
        params: first.params,
    })
}

/// Per-channel bilinear resize of a `C x H x W` tensor with the pixel-centre
/// convention (corners not aligned). Output values stay inside the input
/// range.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::invalid("resize target must be positive"));
    }
    let (c, h, w) = match t.shape() {
        &[c, h, w] if h > 0 && w > 0 => (c, h, w),
        s => return Err(CoreError::invalid(format!("resize expects C x H x W, got {s:?}"))),
    };
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = t.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out)?)
}

/// End-to-end preprocessing: resample, segment, per-channel mel, stack,
/// resize to `size x size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioPipeline {
    pub window_seconds: f64,
    pub mel: MelParams,
    pub size: usize,
}

impl Default for AudioPipeline {
    fn default() -> Self {
        AudioPipeline {
            window_seconds: 1.0,
            mel: MelParams::default(),
            size: 128,
        }
    }
}

impl AudioPipeline {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.size == 0 || !(self.window_seconds > 0.0) {
            return Err(CoreError::Config("pipeline size and window must be positive".into()));
        }
        let win = (self.window_seconds * self.mel.sample_rate as f64).round() as usize;
        if win < self.mel.window_length {
            return Err(CoreError::Config(format!(
                "{win}-sample segments cannot hold a {}-sample window",
                self.mel.window_length
            )));
        }
        Ok(())
    }

    /// One `N x size x size` tensor per full segment of `clip`.
    pub fn process(&self, clip: &AudioClip) -> Result<Vec<Tensor<f32>>> {
        self.validate()?;
        let clip = resample(clip, self.mel.sample_rate)?;
        let analyzer = MelAnalyzer::new(self.mel)?;
        segment(&clip, self.window_seconds)?
            .iter()
            .map(|s| self.segment_tensor(&analyzer, s))
            .collect()
    }

    /// The first segment only; errors if the clip is shorter than a window.
    pub fn process_first(&self, clip: &AudioClip) -> Result<Tensor<f32>> {
        self.validate()?;
        let clip = resample(clip, self.mel.sample_rate)?;
        let seg = segment(&clip, self.window_seconds)?
            .into_iter()
            .next()
            .ok_or_else(|| CoreError::invalid(format!("audio of {:.3} s is shorter than one window", clip.duration_seconds())))?;
        self.segment_tensor(&MelAnalyzer::new(self.mel)?, &seg)
    }

    fn segment_tensor(&self, analyzer: &MelAnalyzer, seg: &AudioClip) -> Result<Tensor<f32>> {
        let specs = seg
            .channels()
            .iter()
            .map(|c| analyzer.spectrogram(c, seg.sample_rate()))
            .collect::<Result<Vec<_>>>()?;
        let stacked = stack_channels(&specs)?;
        resize_bilinear(&stacked.values, self.size, self.size)
    }
}

/// Writes 32-bit float PCM, channels interleaved.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| CoreError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..clip.len() {
        for c in &clip.channels {
            w.write_sample(c[i]).map_err(wav_err)?;
        }
    }
    w.finalize().map_err(wav_err)
}

/// Reads integer or float PCM into [-1, 1] samples.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    if !path.exists() {
        return Err(CoreError::MissingFile(path.to_path_buf()));
    }
    let wav_err = |e: hound::Error| CoreError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let m = spec.channels as usize;
    let channels = (0..m).map(|c| interleaved.iter().skip(c).step_by(m).copied().collect()).collect();
    AudioClip::new(channels, spec.sample_rate)
}
