//! Synthetic polysomnography and hypnograms.
//!
//! Each stage has a dominant frequency band. Informative channels carry a
//! few sinusoids drawn from the band of the current stage plus white noise;
//! distractor channels carry a band drawn independently of the stage. The
//! bands sit below 7 Hz so they survive resampling to 500 samples per 30 s
//! epoch.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{slice_epochs, ChannelSignal, HealthLabel, Hypnogram, Sample, SliceOptions, StageLabel};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive, normal, seeded, uniform, SeededRng};

/// Stage counts W, N1, N2, N3, REM of the ten-subject ISRUC-S3 subset.
pub const ISRUC_S3_COUNTS: [f64; 5] = [1674.0, 1217.0, 2616.0, 2016.0, 1066.0];

/// Frequency band (Hz) carrying the stage signature.
pub fn stage_band(s: StageLabel) -> (f64, f64) {
    match s {
        StageLabel::N3 => (0.5, 1.5),
        StageLabel::Rem => (2.0, 2.6),
        StageLabel::N2 => (3.0, 3.8),
        StageLabel::N1 => (4.3, 5.1),
        StageLabel::W => (5.6, 6.5),
    }
}

fn stage_amplitude(s: StageLabel) -> f64 {
    match s {
        StageLabel::W => 2.0,
        StageLabel::N3 => 1.5,
        _ => 1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub rate_hz: f64,
    pub channels: usize,
    /// Channels `0..informative` carry the stage signature.
    pub informative: usize,
    pub noise_std: f64,
    /// Relative class frequencies W, N1, N2, N3, REM.
    pub class_weights: [f64; 5],
    /// Exponent on `class_weights`: 1 reproduces them, 0 balances classes.
    pub skew: f64,
    /// Mean length of a run of identical stages, in epochs.
    pub mean_run: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_subjects: usize, epochs_per_subject: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            epochs_per_subject,
            rate_hz: 100.0,
            channels: 10,
            informative: 10,
            noise_std: 0.5,
            class_weights: ISRUC_S3_COUNTS,
            skew: 1.0,
            mean_run: 4.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.epochs_per_subject == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic dataset must be non-empty".into()));
        }
        if self.informative > self.channels {
            return Err(Error::Config(format!(
                "{} informative channels but only {} channels",
                self.informative, self.channels
            )));
        }
        if !(self.rate_hz >= 16.0) {
            return Err(Error::Config(format!(
                "sampling rate {} Hz too low for the stage bands",
                self.rate_hz
            )));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) || !self.skew.is_finite() {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if !(self.mean_run >= 1.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("mean_run must be >= 1 and noise_std >= 0".into()));
        }
        Ok(())
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("synth{i:03}")
    }
}

/// Splits `n` into five counts proportional to `weights^skew` by largest
/// remainder.
pub fn label_counts(n: usize, weights: &[f64; 5], skew: f64) -> [usize; 5] {
    let w: Vec<f64> = weights.iter().map(|&x| math::exp(skew * math::ln(x))).collect();
    let total: f64 = w.iter().sum();
    let quota: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
    let mut counts = [0usize; 5];
    for (c, q) in counts.iter_mut().zip(&quota) {
        *c = math::floor(*q) as usize;
    }
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - counts[a] as f64;
        let rb = quota[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts
}

/// Stage sequence of subject `index`: exact class counts arranged in runs.
pub fn subject_labels(cfg: &SynthConfig, index: usize) -> Vec<StageLabel> {
    let mut rng = seeded(derive(cfg.seed, &[0x1abe1, index as u64]));
    let counts = label_counts(cfg.epochs_per_subject, &cfg.class_weights, cfg.skew);
    let mut runs: Vec<(StageLabel, usize)> = Vec::new();
    let p_stop = 1.0 / cfg.mean_run;
    for (s, &count) in StageLabel::ALL.iter().zip(&counts) {
        let mut left = count;
        while left > 0 {
            let mut len = 1;
            while len < left && rng.gen::<f64>() >= p_stop {
                len += 1;
            }
            runs.push((*s, len));
            left -= len;
        }
    }
    runs.shuffle(&mut rng);
    runs.into_iter()
        .flat_map(|(s, n)| core::iter::repeat_n(s, n))
        .collect()
}

/// One synthetic recording at `rate_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecording {
    pub subject: String,
    pub rate_hz: f64,
    pub channels: Vec<Vec<f64>>,
    pub labels: Vec<StageLabel>,
}

fn add_band(out: &mut [f64], band: (f64, f64), amp: f64, rate: f64, rng: &mut SeededRng) {
    for _ in 0..3 {
        let f = uniform(rng, band.0, band.1);
        let phase = uniform(rng, 0.0, 2.0 * math::PI);
        let a = amp * uniform(rng, 0.6, 1.0);
        let w = 2.0 * math::PI * f / rate;
        for (i, v) in out.iter_mut().enumerate() {
            *v += a * math::sin(w * i as f64 + phase);
        }
    }
}

/// Slow eye movements: a few smooth bumps of random sign.
fn add_eog_bursts(out: &mut [f64], rate: f64, rng: &mut SeededRng) {
    let n = out.len() as f64;
    let width = 0.4 * rate;
    for _ in 0..3 {
        let centre = uniform(rng, 0.1 * n, 0.9 * n);
        let amp = if rng.gen::<bool>() { 3.0 } else { -3.0 };
        for (i, v) in out.iter_mut().enumerate() {
            let d = (i as f64 - centre) / width;
            if d.abs() < 4.0 {
                *v += amp * math::exp(-0.5 * d * d);
            }
        }
    }
}

pub fn synth_subject(cfg: &SynthConfig, index: usize) -> Result<SynthRecording> {
    cfg.validate()?;
    let labels = subject_labels(cfg, index);
    let per_epoch = math::round(30.0 * cfg.rate_hz) as usize;
    let mut channels = vec![vec![0.0; per_epoch * labels.len()]; cfg.channels];
    for (c, ch) in channels.iter_mut().enumerate() {
        let mut rng = seeded(derive(cfg.seed, &[0x5197, index as u64, c as u64]));
        let gain = uniform(&mut rng, 0.8, 1.2);
        for (e, &s) in labels.iter().enumerate() {
            let seg = &mut ch[e * per_epoch..(e + 1) * per_epoch];
            if c < cfg.informative {
                add_band(seg, stage_band(s), gain * stage_amplitude(s), cfg.rate_hz, &mut rng);
                if s == StageLabel::Rem && c < 2 {
                    add_eog_bursts(seg, cfg.rate_hz, &mut rng);
                }
            } else {
                let decoy = StageLabel::ALL[rng.gen_range(0..5)];
                add_band(seg, stage_band(decoy), gain * stage_amplitude(decoy), cfg.rate_hz, &mut rng);
            }
            for v in seg.iter_mut() {
                *v += cfg.noise_std * normal(&mut rng);
            }
        }
    }
    Ok(SynthRecording {
        subject: cfg.subject_id(index),
        rate_hz: cfg.rate_hz,
        channels,
        labels,
    })
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthRecording>> {
    (0..cfg.n_subjects).map(|i| synth_subject(cfg, i)).collect()
}

/// Generates every subject and cuts it into network inputs with
/// `epoch_samples` per epoch, one subject at a time.
pub fn synth_epochs(cfg: &SynthConfig, epoch_samples: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for i in 0..cfg.n_subjects {
        let rec = synth_subject(cfg, i)?;
        out.extend(recording_epochs(&rec, epoch_samples)?);
    }
    Ok(out)
}

pub fn recording_epochs(rec: &SynthRecording, epoch_samples: usize) -> Result<Vec<Sample>> {
    let signals: Vec<ChannelSignal<'_>> = rec
        .channels
        .iter()
        .map(|c| ChannelSignal {
            samples: c,
            rate_hz: rec.rate_hz,
        })
        .collect();
    let labels: Vec<Option<StageLabel>> = rec.labels.iter().map(|&s| Some(s)).collect();
    Ok(slice_epochs(&signals, &labels, &rec.subject, &SliceOptions::new(epoch_samples))?.samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthSynthConfig {
    pub n_healthy: usize,
    pub n_unhealthy: usize,
    pub seed: u64,
}

impl HealthSynthConfig {
    /// 110 healthy and 100 disordered nights.
    pub fn balanced(seed: u64) -> Self {
        Self {
            n_healthy: 110,
            n_unhealthy: 100,
            seed,
        }
    }
}

fn push_run(out: &mut Vec<StageLabel>, s: StageLabel, n: usize) {
    out.extend(core::iter::repeat_n(s, n));
}

fn night(rng: &mut SeededRng, disordered: bool) -> Vec<StageLabel> {
    use StageLabel::*;
    let mut h = Vec::new();
    // Sleep onset latency.
    let onset = if disordered { rng.gen_range(15..60) } else { rng.gen_range(6..25) };
    push_run(&mut h, W, onset);
    let cycles = rng.gen_range(4..7);
    for c in 0..cycles {
        push_run(&mut h, N1, rng.gen_range(2..7));
        let n2 = rng.gen_range(25..50);
        if disordered {
            // Fragmented N2: short bouts broken by arousals.
            let mut left = n2;
            while left > 0 {
                let bout = rng.gen_range(3..9).min(left);
                push_run(&mut h, N2, bout);
                left -= bout;
                if left > 0 {
                    if rng.gen::<f64>() < 0.6 {
                        push_run(&mut h, W, rng.gen_range(1..5));
                    } else {
                        push_run(&mut h, N1, rng.gen_range(1..4));
                    }
                }
            }
        } else {
            push_run(&mut h, N2, n2);
        }
        let deep = if c < 2 { rng.gen_range(15..40) } else { rng.gen_range(0..12) };
        push_run(&mut h, N3, if disordered { deep / 2 } else { deep });
        push_run(&mut h, N2, rng.gen_range(8..20));
        push_run(&mut h, Rem, rng.gen_range(5..12) + 4 * c);
        let wake_p = if disordered { 0.9 } else { 0.3 };
        if rng.gen::<f64>() < wake_p {
            let n = if disordered { rng.gen_range(4..20) } else { rng.gen_range(1..3) };
            push_run(&mut h, W, n);
        }
    }
    push_run(&mut h, W, rng.gen_range(3..15));
    h
}

/// Whole-night hypnograms. Disordered nights have longer sleep onset, more
/// and longer awakenings, fragmented N2 and less N3.
pub fn synth_health(cfg: &HealthSynthConfig) -> Vec<Hypnogram> {
    let mut out = Vec::with_capacity(cfg.n_healthy + cfg.n_unhealthy);
    for (group, n, label) in [
        (0u64, cfg.n_healthy, HealthLabel::Healthy),
        (1, cfg.n_unhealthy, HealthLabel::Unhealthy),
    ] {
        for i in 0..n {
            let mut rng = seeded(derive(cfg.seed, &[0x4ea1, group, i as u64]));
            let stages = night(&mut rng, label == HealthLabel::Unhealthy);
            let id = format!("{}{i:03}", if group == 0 { "h" } else { "u" });
            out.push(Hypnogram::new(&id, stages).with_health(label));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_weights() {
        let c = label_counts(8589, &ISRUC_S3_COUNTS, 1.0);
        assert_eq!(c, [1674, 1217, 2616, 2016, 1066]);
        assert_eq!(label_counts(10, &ISRUC_S3_COUNTS, 0.0), [2; 5]);
        assert_eq!(label_counts(7, &ISRUC_S3_COUNTS, 1.0).iter().sum::<usize>(), 7);
    }

    #[test]
    fn labels_have_exact_counts() {
        let cfg = SynthConfig::new(2, 200, 3);
        let l = subject_labels(&cfg, 1);
        assert_eq!(l.len(), 200);
        let want = label_counts(200, &cfg.class_weights, 1.0);
        for s in StageLabel::ALL {
            assert_eq!(l.iter().filter(|&&x| x == s).count(), want[s.index()]);
        }
        assert_ne!(subject_labels(&cfg, 0), l);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = SynthConfig::new(1, 3, 9);
        cfg.rate_hz = 20.0;
        let a = synth_subject(&cfg, 0).unwrap();
        assert_eq!(a, synth_subject(&cfg, 0).unwrap());
        cfg.seed = 10;
        assert_ne!(a.channels, synth_subject(&cfg, 0).unwrap().channels);
        assert_eq!(a.channels[0].len(), 3 * 600);
    }

    #[test]
    fn health_groups_differ() {
        let hs = synth_health(&HealthSynthConfig { n_healthy: 30, n_unhealthy: 30, seed: 1 });
        let wake = |h: &Hypnogram| h.stages.iter().filter(|&&s| s == StageLabel::W).count() as f64 / h.len() as f64;
        let mean = |lab| {
            let v: Vec<f64> = hs.iter().filter(|h| h.health == Some(lab)).map(wake).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(HealthLabel::Unhealthy) > 2.0 * mean(HealthLabel::Healthy));
    }
}
