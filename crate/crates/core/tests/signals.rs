use std::f64::consts::PI;

use bimamba_core::data::{resample, StageLabel};
use bimamba_core::rng::{seeded, uniform};
use bimamba_core::synth::{label_counts, stage_band, synth_generate, SynthConfig, ISRUC_S3_COUNTS};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let n = x.len() as f64;
    buf[..x.len() / 2 + 1].iter().map(|c| 2.0 * c.norm() / n).collect()
}

fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate + 0.3).sin()).collect()
}

/// Central 10 s (1000 samples at 100 Hz) of the output, away from edge
/// transients.
fn centre(y: &[f64]) -> &[f64] {
    let start = (y.len() - 1000) / 2;
    &y[start..start + 1000]
}

#[test]
fn passband_sine_keeps_amplitude() {
    let y = resample(&sine(10.0, 200.0, 6000), 200.0, 100.0).unwrap();
    assert_eq!(y.len(), 3000);
    let spec = spectrum(centre(&y));
    let amp = spec[100];
    assert!((amp - 1.0).abs() < 0.01, "amplitude {amp}");
}

#[test]
fn stopband_sine_is_attenuated() {
    let y = resample(&sine(70.0, 200.0, 6000), 200.0, 100.0).unwrap();
    let peak = spectrum(centre(&y)).into_iter().fold(0.0, f64::max);
    let db = 20.0 * peak.log10();
    assert!(db <= -40.0, "attenuation {db} dB");
}

#[test]
fn band_limited_energy_is_preserved() {
    let mut rng = seeded(4);
    let n = 8000;
    let mut x = vec![0.0; n];
    for _ in 0..12 {
        let f = uniform(&mut rng, 0.5, 35.0);
        let a = uniform(&mut rng, 0.2, 1.0);
        let ph = uniform(&mut rng, 0.0, 2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / 200.0 + ph).sin();
        }
    }
    let y = resample(&x, 200.0, 100.0).unwrap();
    let ex: f64 = x[1000..7000].iter().map(|v| v * v).sum::<f64>() / 6000.0;
    let ey: f64 = y[500..3500].iter().map(|v| v * v).sum::<f64>() / 3000.0;
    assert!((ey / ex - 1.0).abs() < 0.02, "energy ratio {}", ey / ex);
}

#[test]
fn upsampling_keeps_amplitude() {
    let y = resample(&sine(5.0, 100.0, 1500), 100.0, 256.0).unwrap();
    assert_eq!(y.len(), 3840);
    let start = (y.len() - 2560) / 2;
    let spec = spectrum(&y[start..start + 2560]);
    assert!((spec[50] - 1.0).abs() < 0.01, "amplitude {}", spec[50]);
}

#[test]
fn class_spectral_peaks_lie_in_bands() {
    let cfg = SynthConfig::new(2, 60, 9);
    let recs = synth_generate(&cfg).unwrap();
    let per_epoch = 3000;
    for stage in StageLabel::ALL {
        let mut mean = vec![0.0; per_epoch / 2 + 1];
        let mut count = 0;
        for rec in &recs {
            for (e, &s) in rec.labels.iter().enumerate() {
                if s != stage {
                    continue;
                }
                let seg = &rec.channels[2][e * per_epoch..(e + 1) * per_epoch];
                for (m, p) in mean.iter_mut().zip(spectrum(seg)) {
                    *m += p * p;
                }
                count += 1;
            }
        }
        assert!(count > 0, "{stage:?} missing");
        // Bins are 1/30 Hz wide; skip DC.
        let peak = (1..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let f = peak as f64 / 30.0;
        let (lo, hi) = stage_band(stage);
        assert!(f >= lo && f <= hi, "{stage:?} peak at {f} Hz, band {lo}-{hi}");
    }
}

#[test]
fn class_ratios_follow_isruc_counts() {
    let total: f64 = ISRUC_S3_COUNTS.iter().sum();
    let cfg = SynthConfig::new(20, 500, 3);
    let mut counts = [0usize; 5];
    for i in 0..cfg.n_subjects {
        for s in bimamba_core::synth::subject_labels(&cfg, i) {
            counts[s.index()] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    for k in 0..5 {
        let got = counts[k] as f64 / n as f64;
        let want = ISRUC_S3_COUNTS[k] / total;
        assert!((got - want).abs() < 0.02, "class {k}: {got} vs {want}");
    }
    assert_eq!(label_counts(1000, &ISRUC_S3_COUNTS, 0.0), [200; 5]);
}

#[test]
fn seeds_differ_but_marginals_agree() {
    let a = synth_generate(&SynthConfig::new(1, 20, 1)).unwrap();
    let b = synth_generate(&SynthConfig::new(1, 20, 2)).unwrap();
    assert_ne!(a[0].channels[0], b[0].channels[0]);
    let hist = |r: &bimamba_core::synth::SynthRecording| {
        let mut h = [0; 5];
        r.labels.iter().for_each(|s| h[s.index()] += 1);
        h
    };
    assert_eq!(hist(&a[0]), hist(&b[0]));
}
