use bimamba::edf::{parse_edf, write_edf, EdfRecording, EdfSignal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ascii(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    let s: String = (0..n).map(|_| rng.gen_range(b'!'..=b'~') as char).collect();
    s
}

fn random_recording(rng: &mut ChaCha8Rng) -> EdfRecording {
    let ns = rng.gen_range(1..=6);
    let n_records = rng.gen_range(1..=8);
    let signals = (0..ns)
        .map(|i| {
            let spr = rng.gen_range(1..=64);
            let dmin = rng.gen_range(-32768..0);
            let dmax = rng.gen_range(1..=32767);
            let pmin = -(rng.gen_range(1..100000) as f64) / 100.0;
            let pmax = rng.gen_range(1..100000) as f64 / 10.0;
            EdfSignal {
                label: format!("S{i}{}", ascii(rng, 10)),
                transducer: ascii(rng, 40),
                physical_dimension: ascii(rng, 4),
                physical_min: pmin,
                physical_max: pmax,
                digital_min: dmin,
                digital_max: dmax,
                prefiltering: ascii(rng, 40),
                samples_per_record: spr,
                reserved: ascii(rng, 8),
                digital: (0..spr * n_records).map(|_| rng.gen_range(dmin..=dmax) as i16).collect(),
            }
        })
        .collect();
    let mut rec = EdfRecording::new(&ascii(rng, 60), [0.5, 1.0, 10.0, 30.0][rng.gen_range(0..4)], signals);
    rec.recording = ascii(rng, 60);
    rec.start_date = format!("{:02}.{:02}.{:02}", rng.gen_range(1..=28), rng.gen_range(1..=12), rng.gen_range(0..100));
    rec.start_time = format!("{:02}.{:02}.{:02}", rng.gen_range(0..24), rng.gen_range(0..60), rng.gen_range(0..60));
    rec
}

#[test]
fn fifty_random_files_round_trip_byte_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xedf);
    for i in 0..50 {
        let rec = random_recording(&mut rng);
        let first = write_edf(&rec).unwrap();
        let parsed = parse_edf(&first).unwrap_or_else(|e| panic!("file {i}: {e}"));
        let second = write_edf(&parsed).unwrap();
        assert_eq!(first, second, "file {i}");
        assert_eq!(parsed, parse_edf(&second).unwrap());
        for (a, b) in rec.signals.iter().zip(&parsed.signals) {
            assert_eq!(a.digital, b.digital);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(parsed.n_records, rec.n_records);
    }
}

fn put(bytes: &mut [u8], at: usize, text: &str, width: usize) {
    let mut field = text.as_bytes().to_vec();
    field.resize(width, b' ');
    bytes[at..at + width].copy_from_slice(&field);
}

#[test]
fn corrupt_headers_report_field_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rec = random_recording(&mut rng);
    let ns = rec.signals.len();
    let good = write_edf(&rec).unwrap();
    // Offset of a per-signal field block: 256 + ns * (sum of preceding widths).
    let block = |preceding: usize| 256 + ns * preceding;
    let cases: Vec<(usize, &str, usize, usize)> = vec![
        (184, "12", 8, 184),
        (236, "many", 8, 236),
        (244, "-2", 8, 244),
        (252, "-3", 4, 252),
        (block(16 + 80 + 8), "low", 8, block(16 + 80 + 8)),
        (block(16 + 80 + 8 + 8 + 8), "x", 8, block(16 + 80 + 8 + 8 + 8)),
        (block(16 + 80 + 8 + 8 + 8 + 8 + 8 + 80), "0", 8, block(16 + 80 + 8 + 8 + 8 + 8 + 8 + 80)),
    ];
    for (at, text, width, want) in cases {
        let mut b = good.clone();
        put(&mut b, at, text, width);
        let e = parse_edf(&b).expect_err(text);
        assert_eq!(e.offset, want, "{text:?} at {at}: {e}");
        assert!(e.to_string().starts_with(&format!("EDF byte {want}: ")), "{e}");
    }
}

#[test]
fn mutation_corpus_never_panics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut errors = 0;
    for _ in 0..20 {
        let rec = random_recording(&mut rng);
        let good = write_edf(&rec).unwrap();
        let header = rec.header_bytes();
        for cut in (0..good.len()).step_by(7) {
            let e = parse_edf(&good[..cut]).expect_err("truncated file parses");
            assert!(e.offset <= good.len(), "{e}");
            errors += 1;
        }
        for _ in 0..200 {
            let mut b = good.clone();
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..header);
                b[at] = rng.gen();
            }
            if let Err(e) = parse_edf(&b) {
                assert!(e.offset <= b.len() && !e.message.is_empty(), "{e}");
                errors += 1;
            }
        }
    }
    assert!(errors > 1000);
}
