//! Differential-entropy band features from raw multichannel signals.
//!
//! Each band is isolated with a zero-phase Butterworth band-pass (second-order
//! sections, run forward then backward with odd-extension padding and
//! steady-state initial conditions), the filtered signal is cut into
//! non-overlapping windows, and every (band, channel, window) cell becomes
//! `0.5 ln(2πe σ²)` with σ² the unbiased sample variance.

use std::f64::consts::PI;

use ndarray::{s, Array1, Axis};
use num_complex::Complex64;

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::ndiff::Matrix;

pub const BUTTERWORTH_ORDER: usize = 4;
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    /// channels × time
    pub samples: Matrix,
    pub sampling_rate_hz: f64,
    pub duration_s: f64,
}

impl SignalSegment {
    pub fn new(samples: Matrix, sampling_rate_hz: f64) -> Result<Self> {
        if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
            return Err(Error::config("sampling rate must be positive"));
        }
        if let Some((idx, _)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let cols = samples.ncols().max(1);
            return Err(Error::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        let duration_s = samples.ncols() as f64 / sampling_rate_hz;
        Ok(Self {
            samples,
            sampling_rate_hz,
            duration_s,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, low_hz: f64, high_hz: f64) -> Self {
        Self {
            name: name.into(),
            low_hz,
            high_hz,
        }
    }

    pub fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        if !(self.low_hz > 0.0 && self.high_hz > self.low_hz) {
            return Err(Error::config(format!(
                "band {}: need 0 < low < high, got {}..{}",
                self.name, self.low_hz, self.high_hz
            )));
        }
        if self.high_hz >= sampling_rate_hz / 2.0 {
            return Err(Error::config(format!(
                "band {}: upper edge {} Hz is not below Nyquist ({} Hz)",
                self.name,
                self.high_hz,
                sampling_rate_hz / 2.0
            )));
        }
        Ok(())
    }
}

/// The five standard EEG bands: delta, theta, alpha, beta, gamma.
pub fn standard_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("delta", 1.0, 4.0),
        BandSpec::new("theta", 4.0, 8.0),
        BandSpec::new("alpha", 8.0, 14.0),
        BandSpec::new("beta", 14.0, 31.0),
        BandSpec::new("gamma", 31.0, 50.0),
    ]
}

/// One biquad `[b0, b1, b2, a0=1, a1, a2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }

    /// Steady-state transposed direct-form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let gain = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let z2 = self.b[2] - self.a[2] * gain;
        let z1 = self.b[1] - self.a[1] * gain + z2;
        [z1, z2]
    }
}

/// Digital Butterworth band-pass as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandpassFilter {
    pub sections: Vec<Biquad>,
    pub sampling_rate_hz: f64,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl BandpassFilter {
    /// Bilinear-transform design with pre-warped band edges.
    pub fn design(band: &BandSpec, sampling_rate_hz: f64, order: usize) -> Result<Self> {
        band.validate(sampling_rate_hz)?;
        if order == 0 || order % 2 == 1 {
            return Err(Error::config("band-pass design supports even prototype orders only"));
        }
        let fs2 = 2.0 * sampling_rate_hz;
        let warp = |f: f64| fs2 * (PI * f / sampling_rate_hz).tan();
        let (lo, hi) = (warp(band.low_hz), warp(band.high_hz));
        let bw = hi - lo;
        let w0_sq = lo * hi;

        // Analog low-pass prototype poles on the unit circle, left half plane.
        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let m = -(order as f64) + 1.0 + 2.0 * k as f64;
            let p = -Complex64::from_polar(1.0, PI * m / (2.0 * order as f64));
            let p_lp = p * (bw / 2.0);
            let root = (p_lp * p_lp - w0_sq).sqrt();
            poles.push(p_lp + root);
            poles.push(p_lp - root);
        }
        // Low-pass → band-pass adds `order` zeros at s = 0; bilinear maps them
        // to z = 1 and the remaining `order` zeros at infinity to z = -1.
        let analog_gain = bw.powi(order as i32);
        let mut gain = Complex64::new(analog_gain, 0.0);
        for _ in 0..order {
            gain *= Complex64::new(fs2, 0.0); // (2fs - 0) for each zero at origin
        }
        let digital: Vec<Complex64> = poles
            .iter()
            .map(|&p| {
                gain /= fs2 - p;
                (fs2 + p) / (fs2 - p)
            })
            .collect();
        let mut upper: Vec<Complex64> = digital.into_iter().filter(|p| p.im > 0.0).collect();
        if upper.len() != order {
            return Err(Error::Numeric(format!(
                "band-pass design produced {} complex pole pairs, expected {order}",
                upper.len()
            )));
        }
        // Poles closest to the unit circle go last.
        upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|p| Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * p.re, p.norm_sqr()],
            })
            .collect();
        for v in sections[0].b.iter_mut() {
            *v *= gain.re;
        }
        Ok(Self {
            sections,
            sampling_rate_hz,
            low_hz: band.low_hz,
            high_hz: band.high_hz,
            order,
        })
    }

    /// Complex response of one forward pass at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sampling_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    fn filter_once(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for sec in &self.sections {
            let zi = sec.step_state();
            let (mut z1, mut z2) = (zi[0] * scale, zi[1] * scale);
            scale *= sec.b.iter().sum::<f64>() / sec.a.iter().sum::<f64>();
            for v in x.iter_mut() {
                let input = *v;
                let y = sec.b[0] * input + z1;
                z1 = sec.b[1] * input - sec.a[1] * y + z2;
                z2 = sec.b[2] * input - sec.a[2] * y;
                *v = y;
            }
        }
    }

    pub fn pad_len(&self, n: usize) -> usize {
        (3 * (2 * self.sections.len() + 1)).min(n.saturating_sub(1))
    }

    /// Zero-phase forward-backward filtering of one channel.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len(n);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_once(&mut ext);
        ext.reverse();
        self.filter_once(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Splits `signal` (channels × time) into non-overlapping windows; the
/// trailing remainder is dropped.
pub fn segment(signal: &Matrix, sampling_rate_hz: f64, window_s: f64) -> Result<Vec<SignalSegment>> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(Error::config("window length must be positive"));
    }
    let win = (window_s * sampling_rate_hz).round() as usize;
    if win == 0 {
        return Err(Error::config("window shorter than one sample"));
    }
    let time = signal.ncols();
    if win > time {
        return Err(Error::config(format!(
            "window of {win} samples is longer than the signal ({time} samples)"
        )));
    }
    (0..time / win)
        .map(|k| SignalSegment::new(signal.slice(s![.., k * win..(k + 1) * win]).to_owned(), sampling_rate_hz))
        .collect()
}

pub fn bandpass(segment: &SignalSegment, band: &BandSpec) -> Result<SignalSegment> {
    let filter = BandpassFilter::design(band, segment.sampling_rate_hz, BUTTERWORTH_ORDER)?;
    Ok(apply_filter(segment, &filter))
}

fn apply_filter(segment: &SignalSegment, filter: &BandpassFilter) -> SignalSegment {
    let mut out = Matrix::zeros(segment.samples.raw_dim());
    for (src, mut dst) in segment.samples.rows().into_iter().zip(out.rows_mut()) {
        let filtered = filter.filtfilt(&src.to_vec());
        dst.assign(&Array1::from(filtered));
    }
    SignalSegment {
        samples: out,
        sampling_rate_hz: segment.sampling_rate_hz,
        duration_s: segment.duration_s,
    }
}

/// Unbiased sample variance.
pub fn sample_variance(x: ndarray::ArrayView1<f64>) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// `0.5 ln(2πe σ²)` with σ² floored at [`VARIANCE_FLOOR`].
pub fn gaussian_de(variance: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * variance.max(VARIANCE_FLOOR)).ln()
}

pub fn differential_entropy(band_segment: &SignalSegment, channel: usize) -> Result<f64> {
    if channel >= band_segment.channels() {
        return Err(Error::shape(format!(
            "channel {channel} out of range ({} channels)",
            band_segment.channels()
        )));
    }
    if band_segment.len() < 2 {
        return Err(Error::shape("differential entropy needs at least 2 samples"));
    }
    Ok(gaussian_de(sample_variance(band_segment.samples.row(channel))))
}

/// DE features with columns ordered band-major, then channel. The full
/// recording is filtered per band before windowing. Subject/session ids and
/// labels are left for the caller to fill in.
pub fn extract_features(
    signal: &Matrix,
    sampling_rate_hz: f64,
    bands: &[BandSpec],
    window_s: f64,
) -> Result<FeatureMatrix> {
    if bands.is_empty() {
        return Err(Error::config("at least one band is required"));
    }
    let full = SignalSegment::new(signal.clone(), sampling_rate_hz)?;
    let n_windows = segment(signal, sampling_rate_hz, window_s)?.len();
    let channels = full.channels();
    let mut out = Matrix::zeros((n_windows, channels * bands.len()));
    for (bi, band) in bands.iter().enumerate() {
        let filtered = bandpass(&full, band)?;
        for (w, seg) in segment(&filtered.samples, sampling_rate_hz, window_s)?.iter().enumerate() {
            for ch in 0..channels {
                out[[w, bi * channels + ch]] = differential_entropy(seg, ch)?;
            }
        }
    }
    FeatureMatrix::new(out, None, "", "")
}

/// Per-column z-score within one subject. Columns with (numerically) zero
/// spread become all zeros.
pub fn normalize_electrodewise(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.rows() < 2 {
        return Err(Error::shape("electrode-wise normalisation needs at least 2 rows"));
    }
    let mut values = features.values.clone();
    for mut col in values.axis_iter_mut(Axis(1)) {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
    FeatureMatrix::new(
        values,
        features.labels.clone(),
        features.subject_id.clone(),
        features.session_id.clone(),
    )
}

/// Reads a raw signal CSV laid out one channel per row, one sample per column.
pub fn read_raw_signal(path: &std::path::Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("row {r}, column {c}: `{f}` is not a number"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { row: r, col: c })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(format!("{}: ragged rows", path.display())));
    }
    Matrix::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| Error::shape(e.to_string()))
}
