//! European Data Format: a 256-byte ASCII header, 256 header bytes per
//! signal, then data records of 16-bit little-endian samples.
//!
//! Samples are kept in digital units so that writing a parsed recording
//! reproduces the input bytes. Physical values are derived on demand.

use std::fmt;

use bimamba_core::data::StageLabel;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdfError {
    /// Byte offset of the offending field or record.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for EdfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EDF byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for EdfError {}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, EdfError> {
    Err(EdfError {
        offset,
        message: message.into(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfSignal {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
    /// All samples of the signal, record after record, in digital units.
    pub digital: Vec<i16>,
}

impl EdfSignal {
    /// Quantizes `values` to 16 bits over `[physical_min, physical_max]`.
    pub fn from_physical(label: &str, values: &[f64], physical_min: f64, physical_max: f64, samples_per_record: usize) -> Result<Self, EdfError> {
        let (dmin, dmax) = (-32768i32, 32767i32);
        if !(physical_max > physical_min) {
            return err(0, format!("signal {label}: physical_min {physical_min} >= physical_max {physical_max}"));
        }
        let scale = (dmax - dmin) as f64 / (physical_max - physical_min);
        let digital = values
            .iter()
            .map(|&v| {
                let d = ((v - physical_min) * scale + dmin as f64).round();
                d.clamp(dmin as f64, dmax as f64) as i16
            })
            .collect();
        Ok(Self {
            label: label.to_string(),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min,
            physical_max,
            digital_min: dmin,
            digital_max: dmax,
            prefiltering: String::new(),
            samples_per_record,
            reserved: String::new(),
            digital,
        })
    }

    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min) as f64
    }

    pub fn to_physical(&self, d: i16) -> f64 {
        (d as i32 - self.digital_min) as f64 * self.gain() + self.physical_min
    }

    pub fn physical(&self) -> Vec<f64> {
        self.digital.iter().map(|&d| self.to_physical(d)).collect()
    }

    pub fn is_annotation(&self) -> bool {
        self.label == "EDF Annotations"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfRecording {
    pub version: String,
    pub patient: String,
    pub recording: String,
    /// `dd.mm.yy`
    pub start_date: String,
    /// `hh.mm.ss`
    pub start_time: String,
    pub reserved: String,
    pub n_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<EdfSignal>,
}

impl EdfRecording {
    pub fn new(patient: &str, record_duration_s: f64, signals: Vec<EdfSignal>) -> Self {
        let n_records = signals
            .first()
            .map_or(0, |s| s.digital.len() / s.samples_per_record.max(1));
        Self {
            version: "0".into(),
            patient: patient.into(),
            recording: String::new(),
            start_date: "01.01.00".into(),
            start_time: "00.00.00".into(),
            reserved: String::new(),
            n_records,
            record_duration_s,
            signals,
        }
    }

    pub fn header_bytes(&self) -> usize {
        256 * (self.signals.len() + 1)
    }

    /// Samples per second of signal `i`.
    pub fn rate_hz(&self, i: usize) -> f64 {
        self.signals[i].samples_per_record as f64 / self.record_duration_s
    }

    pub fn duration_s(&self) -> f64 {
        self.n_records as f64 * self.record_duration_s
    }

    pub fn signal(&self, label: &str) -> Option<&EdfSignal> {
        self.signals.iter().find(|s| s.label == label)
    }
}

const HEADER_FIELDS: [(&str, usize); 10] = [
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("start date", 8),
    ("start time", 8),
    ("header bytes", 8),
    ("reserved", 44),
    ("number of records", 8),
    ("record duration", 8),
    ("number of signals", 4),
];

const SIGNAL_FIELDS: [(&str, usize); 10] = [
    ("label", 16),
    ("transducer", 80),
    ("physical dimension", 8),
    ("physical minimum", 8),
    ("physical maximum", 8),
    ("digital minimum", 8),
    ("digital maximum", 8),
    ("prefiltering", 80),
    ("samples per record", 8),
    ("reserved", 32),
];

/// Shortest decimal rendering of `x` that fits `width` characters.
fn format_number(x: f64, width: usize) -> Option<String> {
    if !x.is_finite() {
        return None;
    }
    for decimals in (0..width).rev() {
        let mut s = format!("{x:.decimals$}");
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
        if s == "-0" {
            s = "0".into();
        }
        if s.len() <= width {
            return Some(s);
        }
    }
    None
}

fn put(out: &mut Vec<u8>, value: &str, width: usize, field: &str) -> Result<(), EdfError> {
    let offset = out.len();
    if !value.is_ascii() || value.bytes().any(|b| !(0x20..=0x7e).contains(&b)) {
        return err(offset, format!("{field} {value:?} is not printable ASCII"));
    }
    if value.len() > width {
        return err(offset, format!("{field} {value:?} longer than {width} characters"));
    }
    out.extend_from_slice(value.as_bytes());
    out.resize(offset + width, b' ');
    Ok(())
}

fn put_num(out: &mut Vec<u8>, x: f64, width: usize, field: &str) -> Result<(), EdfError> {
    match format_number(x, width) {
        Some(s) => put(out, &s, width, field),
        None => err(out.len(), format!("{field} {x} does not fit {width} characters")),
    }
}

/// Serializes `rec`. Fails when a field does not fit its slot or the
/// signal lengths disagree with `n_records`.
pub fn write_edf(rec: &EdfRecording) -> Result<Vec<u8>, EdfError> {
    let ns = rec.signals.len();
    let mut out = Vec::with_capacity(rec.header_bytes());
    put(&mut out, &rec.version, 8, "version")?;
    put(&mut out, &rec.patient, 80, "patient")?;
    put(&mut out, &rec.recording, 80, "recording")?;
    put(&mut out, &rec.start_date, 8, "start date")?;
    put(&mut out, &rec.start_time, 8, "start time")?;
    put(&mut out, &rec.header_bytes().to_string(), 8, "header bytes")?;
    put(&mut out, &rec.reserved, 44, "reserved")?;
    put(&mut out, &rec.n_records.to_string(), 8, "number of records")?;
    put_num(&mut out, rec.record_duration_s, 8, "record duration")?;
    put(&mut out, &ns.to_string(), 4, "number of signals")?;
    let sigs = &rec.signals;
    for s in sigs {
        put(&mut out, &s.label, 16, "label")?;
    }
    for s in sigs {
        put(&mut out, &s.transducer, 80, "transducer")?;
    }
    for s in sigs {
        put(&mut out, &s.physical_dimension, 8, "physical dimension")?;
    }
    for s in sigs {
        put_num(&mut out, s.physical_min, 8, "physical minimum")?;
    }
    for s in sigs {
        put_num(&mut out, s.physical_max, 8, "physical maximum")?;
    }
    for s in sigs {
        put(&mut out, &s.digital_min.to_string(), 8, "digital minimum")?;
    }
    for s in sigs {
        put(&mut out, &s.digital_max.to_string(), 8, "digital maximum")?;
    }
    for s in sigs {
        put(&mut out, &s.prefiltering, 80, "prefiltering")?;
    }
    for s in sigs {
        put(&mut out, &s.samples_per_record.to_string(), 8, "samples per record")?;
    }
    for s in sigs {
        put(&mut out, &s.reserved, 32, "reserved")?;
    }
    for (i, s) in sigs.iter().enumerate() {
        if s.digital.len() != s.samples_per_record * rec.n_records {
            return err(
                out.len(),
                format!(
                    "signal {i} ({}) has {} samples, expected {} records x {}",
                    s.label,
                    s.digital.len(),
                    rec.n_records,
                    s.samples_per_record
                ),
            );
        }
    }
    for r in 0..rec.n_records {
        for s in sigs {
            let k = s.samples_per_record;
            for &d in &s.digital[r * k..(r + 1) * k] {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, width: usize, name: &str) -> Result<(usize, &'a str), EdfError> {
        let start = self.pos;
        if self.bytes.len() < start + width {
            return err(start, format!("file truncated inside header field {name}"));
        }
        let raw = &self.bytes[start..start + width];
        if let Some(i) = raw.iter().position(|&b| !(0x20..=0x7e).contains(&b)) {
            return err(start + i, format!("non-ASCII byte 0x{:02x} in header field {name}", raw[i]));
        }
        self.pos += width;
        // Checked above: every byte is printable ASCII.
        let text = std::str::from_utf8(raw).expect("ASCII is UTF-8");
        Ok((start, text.trim_end_matches(' ')))
    }

    fn text(&mut self, width: usize, name: &str) -> Result<String, EdfError> {
        Ok(self.field(width, name)?.1.to_string())
    }

    fn int(&mut self, width: usize, name: &str) -> Result<(usize, i64), EdfError> {
        let (off, s) = self.field(width, name)?;
        match s.trim().parse::<i64>() {
            Ok(v) => Ok((off, v)),
            Err(_) => err(off, format!("{name} {s:?} is not an integer")),
        }
    }

    fn real(&mut self, width: usize, name: &str) -> Result<(usize, f64), EdfError> {
        let (off, s) = self.field(width, name)?;
        match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((off, v)),
            _ => err(off, format!("{name} {s:?} is not a number")),
        }
    }
}

/// Parses an EDF file. A record count of `-1` is inferred from the file
/// length.
pub fn parse_edf(bytes: &[u8]) -> Result<EdfRecording, EdfError> {
    let mut c = Cursor { bytes, pos: 0 };
    let version = c.text(8, HEADER_FIELDS[0].0)?;
    let patient = c.text(80, HEADER_FIELDS[1].0)?;
    let recording = c.text(80, HEADER_FIELDS[2].0)?;
    let start_date = c.text(8, HEADER_FIELDS[3].0)?;
    let start_time = c.text(8, HEADER_FIELDS[4].0)?;
    let (hb_off, header_bytes) = c.int(8, HEADER_FIELDS[5].0)?;
    let reserved = c.text(44, HEADER_FIELDS[6].0)?;
    let (nr_off, n_records) = c.int(8, HEADER_FIELDS[7].0)?;
    let (dur_off, record_duration_s) = c.real(8, HEADER_FIELDS[8].0)?;
    let (ns_off, ns) = c.int(4, HEADER_FIELDS[9].0)?;
    if !(0..=4096).contains(&ns) {
        return err(ns_off, format!("number of signals {ns} outside 0..=4096"));
    }
    let ns = ns as usize;
    if header_bytes != 256 * (ns as i64 + 1) {
        return err(hb_off, format!("header bytes {header_bytes} but {ns} signals need {}", 256 * (ns + 1)));
    }
    if !(record_duration_s > 0.0) {
        return err(dur_off, format!("record duration {record_duration_s} must be > 0"));
    }
    let mut cols: Vec<Vec<String>> = Vec::new();
    let mut offsets: Vec<Vec<usize>> = Vec::new();
    for (name, width) in SIGNAL_FIELDS {
        let mut vals = Vec::with_capacity(ns);
        let mut offs = Vec::with_capacity(ns);
        for _ in 0..ns {
            let (off, s) = c.field(width, name)?;
            vals.push(s.to_string());
            offs.push(off);
        }
        cols.push(vals);
        offsets.push(offs);
    }
    let parse_int = |col: usize, i: usize| -> Result<i64, EdfError> {
        let s = cols[col][i].trim();
        s.parse::<i64>()
            .or_else(|_| err(offsets[col][i], format!("{} {s:?} of signal {i} is not an integer", SIGNAL_FIELDS[col].0)))
    };
    let parse_real = |col: usize, i: usize| -> Result<f64, EdfError> {
        let s = cols[col][i].trim();
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => err(offsets[col][i], format!("{} {s:?} of signal {i} is not a number", SIGNAL_FIELDS[col].0)),
        }
    };
    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let physical_min = parse_real(3, i)?;
        let physical_max = parse_real(4, i)?;
        let digital_min = parse_int(5, i)?;
        let digital_max = parse_int(6, i)?;
        for (col, v) in [(5, digital_min), (6, digital_max)] {
            if !(i16::MIN as i64..=i16::MAX as i64).contains(&v) {
                return err(offsets[col][i], format!("{} {v} of signal {i} outside the 16-bit range", SIGNAL_FIELDS[col].0));
            }
        }
        if digital_min >= digital_max {
            return err(offsets[5][i], format!("signal {i}: digital minimum {digital_min} >= digital maximum {digital_max}"));
        }
        if physical_min == physical_max {
            return err(offsets[3][i], format!("signal {i}: physical minimum equals physical maximum ({physical_min})"));
        }
        let spr = parse_int(8, i)?;
        if spr < 1 {
            return err(offsets[8][i], format!("signal {i}: samples per record {spr} must be >= 1"));
        }
        signals.push(EdfSignal {
            label: cols[0][i].clone(),
            transducer: cols[1][i].clone(),
            physical_dimension: cols[2][i].clone(),
            physical_min,
            physical_max,
            digital_min: digital_min as i32,
            digital_max: digital_max as i32,
            prefiltering: cols[7][i].clone(),
            samples_per_record: spr as usize,
            reserved: cols[9][i].clone(),
            digital: Vec::new(),
        });
    }
    let header_len = 256 * (ns + 1);
    let record_bytes: usize = signals.iter().map(|s| 2 * s.samples_per_record).sum();
    let data_len = bytes.len() - header_len;
    let n_records = match n_records {
        -1 => {
            if record_bytes == 0 {
                0
            } else {
                if !data_len.is_multiple_of(record_bytes) {
                    let whole = data_len / record_bytes;
                    return err(
                        header_len + whole * record_bytes,
                        format!("trailing partial data record ({} of {record_bytes} bytes)", data_len % record_bytes),
                    );
                }
                data_len / record_bytes
            }
        }
        n if n < 0 => return err(nr_off, format!("number of records {n} is negative")),
        n => n as usize,
    };
    let need = n_records.saturating_mul(record_bytes);
    if data_len < need {
        let whole = data_len / record_bytes.max(1);
        return err(
            header_len + whole * record_bytes,
            format!("file truncated: {n_records} records of {record_bytes} bytes declared, {data_len} data bytes present"),
        );
    }
    if data_len > need {
        return err(header_len + need, format!("{} bytes after the last data record", data_len - need));
    }
    for s in &mut signals {
        s.digital.reserve(n_records * s.samples_per_record);
    }
    let mut pos = header_len;
    for _ in 0..n_records {
        for (i, s) in signals.iter_mut().enumerate() {
            let annotation = s.is_annotation();
            for _ in 0..s.samples_per_record {
                let d = i16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
                if !annotation && !(s.digital_min..=s.digital_max).contains(&(d as i32)) {
                    return err(pos, format!("signal {i} sample {d} outside [{}, {}]", s.digital_min, s.digital_max));
                }
                s.digital.push(d);
                pos += 2;
            }
        }
    }
    Ok(EdfRecording {
        version,
        patient,
        recording,
        start_date,
        start_time,
        reserved,
        n_records,
        record_duration_s,
        signals,
    })
}

/// One EDF+ time-stamped annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub text: String,
}

/// Annotations from every `EDF Annotations` signal, in file order.
/// Record time-keeping entries (empty text) are skipped.
pub fn annotations(rec: &EdfRecording) -> Result<Vec<Annotation>, EdfError> {
    let mut out = Vec::new();
    for s in rec.signals.iter().filter(|s| s.is_annotation()) {
        let bytes: Vec<u8> = s.digital.iter().flat_map(|d| d.to_le_bytes()).collect();
        let per_record = 2 * s.samples_per_record;
        for record in bytes.chunks(per_record.max(1)) {
            for tal in record.split(|&b| b == 0).filter(|t| !t.is_empty()) {
                let text = String::from_utf8_lossy(tal);
                let mut parts = text.split('\u{14}');
                let head = parts.next().unwrap_or_default();
                let mut head_parts = head.split('\u{15}');
                let onset_s = head_parts.next().unwrap_or_default().parse::<f64>().map_err(|_| EdfError {
                    offset: 0,
                    message: format!("annotation onset {head:?} is not a number"),
                })?;
                let duration_s = head_parts.next().and_then(|d| d.parse::<f64>().ok()).unwrap_or(0.0);
                for t in parts.filter(|t| !t.is_empty()) {
                    out.push(Annotation {
                        onset_s,
                        duration_s,
                        text: t.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Per-epoch stages from sleep-stage annotations. Epochs not covered by a
/// recognized stage are `None`; the second value counts epochs carrying
/// an annotation that is not one of the five stages.
pub fn hypnogram_from_annotations(annots: &[Annotation], epoch_s: f64, n_epochs: usize) -> (Vec<Option<StageLabel>>, usize) {
    let mut stages = vec![None; n_epochs];
    let mut dropped = 0;
    for a in annots {
        let first = (a.onset_s / epoch_s).round() as usize;
        let count = ((a.duration_s / epoch_s).round() as usize).max(1);
        let label = StageLabel::from_annotation(&a.text);
        if label.is_none() && !a.text.starts_with("Sleep stage") && !a.text.starts_with("Movement") {
            continue;
        }
        for e in first..(first + count).min(n_epochs) {
            match label {
                Some(l) => stages[e] = Some(l),
                None => dropped += 1,
            }
        }
    }
    (stages, dropped)
}
