//! Labels, epoch batches, hypnograms and the signal preparation steps that
//! turn a recording into network inputs: rational resampling, 30 s epoch
//! slicing and one-hot hypnogram encoding.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// AASM sleep stage. The discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl StageLabel {
    pub const ALL: [StageLabel; 5] = [
        StageLabel::W,
        StageLabel::N1,
        StageLabel::N2,
        StageLabel::N3,
        StageLabel::Rem,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageLabel::W => "W",
            StageLabel::N1 => "N1",
            StageLabel::N2 => "N2",
            StageLabel::N3 => "N3",
            StageLabel::Rem => "REM",
        }
    }

    /// Character used in label files: `W`, `1`, `2`, `3`, `R`.
    pub fn to_char(self) -> char {
        match self {
            StageLabel::W => 'W',
            StageLabel::N1 => '1',
            StageLabel::N2 => '2',
            StageLabel::N3 => '3',
            StageLabel::Rem => 'R',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'W' | 'w' | '0' => Some(StageLabel::W),
            '1' => Some(StageLabel::N1),
            '2' => Some(StageLabel::N2),
            // S3 and S4 of the older R&K scoring both map to N3.
            '3' | '4' => Some(StageLabel::N3),
            'R' | 'r' | '5' => Some(StageLabel::Rem),
            _ => None,
        }
    }

    /// Maps a scoring annotation (`"Sleep stage 4"`, `"N2"`, `"R"`, ...) to a
    /// stage. Movement and unknown epochs give `None`.
    pub fn from_annotation(text: &str) -> Option<Self> {
        let t = text.trim();
        let t = t.strip_prefix("Sleep stage ").unwrap_or(t);
        match t {
            "W" | "Wake" => Some(StageLabel::W),
            "N1" | "1" => Some(StageLabel::N1),
            "N2" | "2" => Some(StageLabel::N2),
            "N3" | "3" | "4" => Some(StageLabel::N3),
            "R" | "REM" => Some(StageLabel::Rem),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthLabel {
    Healthy = 0,
    Unhealthy = 1,
}

impl HealthLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(HealthLabel::Healthy),
            1 => Some(HealthLabel::Unhealthy),
            _ => None,
        }
    }
}

/// Ordered channel names fed to the stage model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub names: Vec<String>,
}

impl Default for ChannelSpec {
    /// Two EOG, six EEG, chin EMG (`X1`) and ECG (`X2`).
    fn default() -> Self {
        Self::new(&[
            "LOC-A2", "ROC-A1", "F3-A2", "C3-A2", "O1-A2", "F4-A1", "C4-A1", "O2-A1", "X1", "X2",
        ])
        .expect("default channels are unique")
    }
}

impl ChannelSpec {
    pub fn new(names: &[&str]) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(alloc::format!("duplicate channel name {n}")));
            }
        }
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One network input with its class and the subject it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
    pub subject: String,
}

/// Fixed-length multichannel epochs: `data[B×C×S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochBatch {
    pub data: Tensor,
    pub labels: Vec<StageLabel>,
    pub subjects: Vec<String>,
}

impl EpochBatch {
    pub fn new(data: Tensor, labels: Vec<StageLabel>, subjects: Vec<String>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(crate::dim_err!(
                "epoch batch must be [B, C, S], got {:?}",
                data.shape()
            ));
        }
        let b = data.shape()[0];
        if labels.len() != b || subjects.len() != b {
            return Err(crate::dim_err!(
                "batch axis 0 has {} epochs but {} labels and {} subject ids",
                b,
                labels.len(),
                subjects.len()
            ));
        }
        if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "epoch batch".into(),
                index: i,
            });
        }
        Ok(Self {
            data,
            labels,
            subjects,
        })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let inputs: Vec<Tensor> = samples.iter().map(|s| s.input.clone()).collect();
        let labels = samples
            .iter()
            .map(|s| {
                StageLabel::from_index(s.label).ok_or(Error::Index {
                    what: "stage label",
                    index: s.label,
                    bound: StageLabel::COUNT,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            Tensor::stack(&inputs)?,
            labels,
            samples.iter().map(|s| s.subject.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.len())
            .map(|i| {
                Ok(Sample {
                    input: self.data.index_outer(i)?,
                    label: self.labels[i].index(),
                    subject: self.subjects[i].clone(),
                })
            })
            .collect()
    }
}

/// Per-subject stage sequence. `mask[i] == false` marks a position that
/// carries no stage information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub subject: String,
    pub stages: Vec<StageLabel>,
    pub mask: Vec<bool>,
    pub health: Option<HealthLabel>,
}

impl Hypnogram {
    pub fn new(subject: &str, stages: Vec<StageLabel>) -> Self {
        let mask = vec![true; stages.len()];
        Self {
            subject: subject.to_string(),
            stages,
            mask,
            health: None,
        }
    }

    pub fn with_health(mut self, health: HealthLabel) -> Self {
        self.health = Some(health);
        self
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Stages at valid positions, in order.
    pub fn valid_stages(&self) -> impl Iterator<Item = StageLabel> + '_ {
        self.stages
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&s, _)| s)
    }
}

pub const HEALTH_INPUT_ROWS: usize = StageLabel::COUNT + 1;
pub const DEFAULT_MAX_CYCLES: usize = 850;

/// One-hot stages in rows 0-4 and a validity mask in row 5, over
/// `max_cycles` columns. Valid stages are packed to the front; anything past
/// `max_cycles` is dropped and the tail is zero with mask 0.
pub fn encode_health_input(h: &Hypnogram, max_cycles: usize) -> Tensor {
    let mut out = Tensor::zeros(&[HEALTH_INPUT_ROWS, max_cycles]);
    let d = out.data_mut();
    for (t, s) in h.valid_stages().take(max_cycles).enumerate() {
        d[s.index() * max_cycles + t] = 1.0;
        d[StageLabel::COUNT * max_cycles + t] = 1.0;
    }
    out
}

/// Best rational approximation `up/down` of `to/from` with `down` bounded by
/// 10 000 (continued fractions).
pub fn rational_ratio(from_hz: f64, to_hz: f64) -> Result<(usize, usize)> {
    if !(from_hz > 0.0 && to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite()) {
        return Err(Error::Domain(alloc::format!(
            "sampling rates must be finite and > 0, got {from_hz} -> {to_hz}"
        )));
    }
    let target = to_hz / from_hz;
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut x = target;
    let (mut best_num, mut best_den) = (1u64, 1u64);
    for _ in 0..64 {
        let a = math::floor(x) as u64;
        let h2 = a * h1 + h0;
        let k2 = a * k1 + k0;
        if k2 > 10_000 {
            break;
        }
        best_num = h2;
        best_den = k2;
        if ((h2 as f64) / (k2 as f64) - target).abs() <= 1e-12 * target {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = x - a as f64;
        if frac < 1e-12 {
            break;
        }
        x = 1.0 / frac;
    }
    if best_num == 0 {
        return Err(Error::Domain(alloc::format!(
            "rate ratio {target} too small to represent"
        )));
    }
    Ok((best_num as usize, best_den as usize))
}

/// Polyphase rational resampler with a Kaiser-windowed sinc low-pass.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    half: usize,
    taps: Vec<f64>,
    phase_gain: Vec<f64>,
}

/// Sinc zero crossings on each side of the filter centre.
const ZERO_CROSSINGS: usize = 16;
const KAISER_BETA: f64 = 8.0;

impl Resampler {
    /// Cutoff at half the lower of the two rates.
    pub fn new(up: usize, down: usize) -> Result<Self> {
        if up == 0 || down == 0 {
            return Err(Error::Domain("resampling factors must be >= 1".into()));
        }
        let g = gcd(up, down);
        let (up, down) = (up / g, down / g);
        let m = up.max(down);
        let half = ZERO_CROSSINGS * m;
        let i0b = math::bessel_i0(KAISER_BETA);
        let taps: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let d = i as f64 - half as f64;
                let r = d / half as f64;
                let win = math::bessel_i0(KAISER_BETA * math::sqrt((1.0 - r * r).max(0.0))) / i0b;
                let arg = d / m as f64;
                let sinc = if arg == 0.0 {
                    1.0
                } else {
                    math::sin(math::PI * arg) / (math::PI * arg)
                };
                sinc * win
            })
            .collect();
        // Normalize each polyphase branch to unit DC gain.
        let mut phase_gain = vec![0.0; up];
        for (i, &h) in taps.iter().enumerate() {
            let d = i as isize - half as isize;
            phase_gain[d.rem_euclid(up as isize) as usize] += h;
        }
        Ok(Self {
            up,
            down,
            half,
            taps,
            phase_gain,
        })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up + self.down / 2) / self.down
    }

    /// Resamples `x`, holding the edge values beyond both ends.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        if self.up == 1 && self.down == 1 {
            return x.to_vec();
        }
        let n = x.len() as isize;
        let (up, down, half) = (self.up as isize, self.down as isize, self.half as isize);
        (0..self.output_len(x.len()) as isize)
            .map(|m| {
                let base = m * down;
                let j0 = (base - half).div_euclid(up) + if (base - half).rem_euclid(up) == 0 { 0 } else { 1 };
                let j1 = (base + half).div_euclid(up);
                let mut acc = 0.0;
                for j in j0..=j1 {
                    let d = base - j * up;
                    acc += self.taps[(d + half) as usize] * x[j.clamp(0, n - 1) as usize];
                }
                acc / self.phase_gain[base.rem_euclid(up) as usize]
            })
            .collect()
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Resamples `x` from `from_hz` to `to_hz`; output length is
/// `round(len · to/from)`.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "resample input".into(),
            index: i,
        });
    }
    let (up, down) = rational_ratio(from_hz, to_hz)?;
    Ok(Resampler::new(up, down)?.process(x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceOptions {
    pub epoch_seconds: f64,
    pub epoch_samples: usize,
    /// Number of trailing scored epochs to discard per subject.
    pub drop_tail_epochs: usize,
}

impl SliceOptions {
    pub fn new(epoch_samples: usize) -> Self {
        Self {
            epoch_seconds: 30.0,
            epoch_samples,
            drop_tail_epochs: 0,
        }
    }

    /// Drops the last 30 epochs of every subject.
    pub fn isruc(epoch_samples: usize) -> Self {
        Self {
            drop_tail_epochs: 30,
            ..Self::new(epoch_samples)
        }
    }
}

/// Epochs cut from one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicedEpochs {
    pub samples: Vec<Sample>,
    /// Input epoch index of each emitted sample.
    pub epoch_index: Vec<usize>,
    pub dropped_unscored: usize,
    pub dropped_tail: usize,
}

/// One channel's samples and sampling rate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelSignal<'a> {
    pub samples: &'a [f64],
    pub rate_hz: f64,
}

/// Resamples every channel to `epoch_samples` per epoch and cuts
/// non-overlapping epochs aligned with `labels`. `None` labels (movement,
/// unscored) are skipped and counted.
pub fn slice_epochs(channels: &[ChannelSignal<'_>], labels: &[Option<StageLabel>], subject: &str, opts: &SliceOptions) -> Result<SlicedEpochs> {
    if channels.is_empty() {
        return Err(Error::Contract("no channels to slice".into()));
    }
    if !(opts.epoch_seconds > 0.0) || opts.epoch_samples == 0 {
        return Err(Error::Config(alloc::format!(
            "invalid epoch geometry: {} s, {} samples",
            opts.epoch_seconds, opts.epoch_samples
        )));
    }
    let needed_s = labels.len() as f64 * opts.epoch_seconds;
    for (c, ch) in channels.iter().enumerate() {
        let dur = ch.samples.len() as f64 / ch.rate_hz;
        if dur + 1e-9 < needed_s {
            return Err(Error::Alignment(alloc::format!(
                "{} labels need {needed_s} s but channel {c} of subject {subject} lasts {dur} s",
                labels.len()
            )));
        }
    }
    let target_hz = opts.epoch_samples as f64 / opts.epoch_seconds;
    let mut resampled = Vec::with_capacity(channels.len());
    for ch in channels {
        // Only the labelled span is needed.
        let keep = (math::round(needed_s * ch.rate_hz) as usize).min(ch.samples.len());
        let r = resample(&ch.samples[..keep], ch.rate_hz, target_hz)?;
        if r.len() < labels.len() * opts.epoch_samples {
            return Err(Error::Alignment(alloc::format!(
                "resampled channel of subject {subject} has {} samples, need {}",
                r.len(),
                labels.len() * opts.epoch_samples
            )));
        }
        resampled.push(r);
    }
    let kept = labels.len().saturating_sub(opts.drop_tail_epochs);
    let dropped_tail = labels.len() - kept;
    let s = opts.epoch_samples;
    let mut out = SlicedEpochs {
        samples: Vec::new(),
        epoch_index: Vec::new(),
        dropped_unscored: 0,
        dropped_tail,
    };
    for (e, label) in labels[..kept].iter().enumerate() {
        let Some(label) = label else {
            out.dropped_unscored += 1;
            continue;
        };
        let mut data = Vec::with_capacity(channels.len() * s);
        for r in &resampled {
            data.extend_from_slice(&r[e * s..(e + 1) * s]);
        }
        out.samples.push(Sample {
            input: Tensor::new(&[channels.len(), s], data)?,
            label: label.index(),
            subject: subject.to_string(),
        });
        out.epoch_index.push(e);
    }
    Ok(out)
}

/// Per-channel standardization fitted on training inputs `[C×L]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in inputs {
            let (c, l) = match *x.shape() {
                [c, l] => (c, l),
                _ => return Err(crate::dim_err!("expected [C, L] input, got {:?}", x.shape())),
            };
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(crate::dim_err!(
                    "channel count changed from {} to {}",
                    sum.len(),
                    c
                ));
            }
            for ch in 0..c {
                for &v in x.row(ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += l;
        }
        if count == 0 {
            return Err(Error::Contract("cannot fit normalization on no data".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                let s = math::sqrt(var);
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_chars_roundtrip() {
        for s in StageLabel::ALL {
            assert_eq!(StageLabel::from_char(s.to_char()), Some(s));
            assert_eq!(StageLabel::from_index(s.index()), Some(s));
        }
        assert_eq!(StageLabel::from_char('4'), Some(StageLabel::N3));
        assert_eq!(StageLabel::from_char('M'), None);
        assert_eq!(StageLabel::from_annotation("Sleep stage 4"), Some(StageLabel::N3));
        assert_eq!(StageLabel::from_annotation("Sleep stage R"), Some(StageLabel::Rem));
        assert_eq!(StageLabel::from_annotation("Movement time"), None);
        assert_eq!(StageLabel::from_annotation("Sleep stage ?"), None);
    }

    #[test]
    fn default_channels() {
        let c = ChannelSpec::default();
        assert_eq!(c.len(), 10);
        assert_eq!(c.names[8], "X1");
        assert!(ChannelSpec::new(&["a", "b", "a"]).is_err());
    }

    #[test]
    fn health_encoding_two_stages() {
        let h = Hypnogram::new("s", vec![StageLabel::W, StageLabel::N2]);
        let x = encode_health_input(&h, 850);
        assert_eq!(x.shape(), &[6, 850]);
        let col = |t: usize| (0..6).map(|r| x.at2(r, t)).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(col(1), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        for t in 2..850 {
            assert!(col(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn health_encoding_truncates_and_packs() {
        let stages: Vec<StageLabel> = (0..900).map(|i| StageLabel::ALL[i % 5]).collect();
        let x = encode_health_input(&Hypnogram::new("s", stages), 850);
        assert!((0..850).all(|t| x.at2(5, t) == 1.0));
        for t in 0..850 {
            let ones: f64 = (0..5).map(|r| x.at2(r, t)).sum();
            assert_eq!(ones, x.at2(5, t));
        }
        let mut h = Hypnogram::new("s", vec![StageLabel::N1, StageLabel::N3, StageLabel::W]);
        h.mask[1] = false;
        let x = encode_health_input(&h, 4);
        assert_eq!(x.row(5), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.at2(0, 1), 1.0);
    }

    #[test]
    fn ratios() {
        assert_eq!(rational_ratio(200.0, 100.0).unwrap(), (1, 2));
        assert_eq!(rational_ratio(100.0, 1000.0 / 30.0).unwrap(), (1, 3));
        assert_eq!(rational_ratio(256.0, 100.0).unwrap(), (25, 64));
        assert!(rational_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn resample_identity_and_dc() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(resample(&x, 128.0, 128.0).unwrap(), x);
        let c = vec![3.25; 601];
        for (f, g) in [(200.0, 100.0), (100.0, 1000.0 / 30.0), (100.0, 256.0), (100.0, 50.0 / 3.0)] {
            let y = resample(&c, f, g).unwrap();
            assert_eq!(y.len(), (601.0 * g / f + 0.5) as usize);
            assert!(y.iter().all(|v| (v - 3.25).abs() < 1e-6), "{f}->{g}");
        }
        assert!(matches!(resample(&[1.0, f64::NAN], 2.0, 1.0), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn slice_counts_and_alignment() {
        // 100 epochs of 30 s at 10 Hz, sample value = time in seconds.
        let fs = 10.0;
        let sig: Vec<f64> = (0..30_000).map(|i| i as f64 / fs).collect();
        let labels: Vec<Option<StageLabel>> = (0..100).map(|i| StageLabel::from_index(i % 5)).collect();
        let ch = [ChannelSignal { samples: &sig, rate_hz: fs }];
        let out = slice_epochs(&ch, &labels, "s1", &SliceOptions::isruc(300)).unwrap();
        assert_eq!(out.samples.len(), 70);
        assert_eq!(out.dropped_tail, 30);
        // 300 samples per epoch is the native rate; sample i of epoch e is time e*30 + i/10.
        let e = 17;
        let x = &out.samples[e].input;
        for i in [0, 1, 150, 299] {
            assert!((x.at2(0, i) - (e as f64 * 30.0 + i as f64 * 30.0 / 300.0)).abs() < 1e-9);
        }
        assert_eq!(out.samples[e].label, e % 5);

        let mut labels2 = labels.clone();
        labels2[3] = None;
        let out = slice_epochs(&ch, &labels2, "s1", &SliceOptions::new(300)).unwrap();
        assert_eq!(out.samples.len() + out.dropped_unscored, 100);
        assert_eq!(out.epoch_index[3], 4);

        let too_many = vec![Some(StageLabel::W); 101];
        assert!(matches!(
            slice_epochs(&ch, &too_many, "s1", &SliceOptions::new(300)),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn norm_fit() {
        let a = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let n = ChannelNorm::fit([&a]).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
    }
}
