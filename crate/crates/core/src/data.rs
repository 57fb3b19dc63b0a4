//! Small labelled image datasets: procedural generation and a text CSV format.
//!
//! File layout: a header line `count,height,width,channels,classes`, then one line per
//! sample holding the label followed by `height * width * channels` values in row-major
//! `(row, column, channel)` order.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

/// Procedural dataset: class 0 rings, class 1 centred blobs, class 2 horizontal bars,
/// class 3 vertical bars, each with jitter and pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { count: 64, height: 8, width: 8, channels: 1, classes: 2, noise: 0.05 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return Err(Error::InvalidConfig("synthetic data needs count >= 1, images of at least 4x4 and a channel".into()));
        }
        if !(2..=4).contains(&self.classes) {
            return Err(Error::InvalidConfig(format!("synthetic data supports 2 to 4 classes, got {}", self.classes)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

fn pattern(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5);
    let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5);
    let r0 = h.min(w) as f64 * rng.random_range(0.28..0.36);
    let phase = rng.random_range(0..2usize);
    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let r = (dy * dy + dx * dx).sqrt();
            img[i * w + j] = match class {
                0 => (-((r - r0) / 0.7).powi(2)).exp(),
                1 => (-(r / (0.45 * r0)).powi(2)).exp(),
                2 => ((i + phase) % 2) as f64,
                _ => ((j + phase) % 2) as f64,
            };
        }
    }
    img
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let (h, w, c) = (spec.height, spec.width, spec.channels);
        let samples = (0..spec.count)
            .map(|k| {
                let label = k % spec.classes;
                let img = pattern(label, h, w, &mut rng);
                let mut values = Vec::with_capacity(h * w * c);
                for px in img {
                    for ch in 0..c {
                        // Extra channels are attenuated copies so they carry signal too.
                        let base = px / (1 + ch) as f64;
                        let eps = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        values.push(base + eps);
                    }
                }
                Sample { label, values }
            })
            .collect();
        Ok(Dataset { height: h, width: w, channels: c, classes: spec.classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset { height: self.height, width: self.width, channels: self.channels, classes: self.classes, samples }
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Appends zero channels up to `channels`.
    pub fn padded(&self, channels: usize) -> Result<Dataset> {
        if channels < self.channels {
            return Err(Error::InvalidConfig(format!(
                "cannot pad {} channels down to {channels}",
                self.channels
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut values = Vec::with_capacity(self.height * self.width * channels);
                for px in s.values.chunks_exact(self.channels) {
                    values.extend_from_slice(px);
                    values.extend(std::iter::repeat_n(0.0, channels - self.channels));
                }
                Sample { label: s.label, values }
            })
            .collect();
        Ok(Dataset { channels, ..self.with_samples(samples) })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{},{},{},{}", self.len(), self.height, self.width, self.channels, self.classes);
        for s in &self.samples {
            let _ = write!(out, "{}", s.label);
            for v in &s.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV format. Row numbers in errors are 1-based file lines.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Dataset { row: 1, reason: "missing header".into() })?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Dataset { row: 1, reason: format!("bad header: {e}") })?;
        let [count, height, width, channels, classes] = dims[..] else {
            return Err(Error::Dataset {
                row: 1,
                reason: "header must be count,height,width,channels,classes".into(),
            });
        };
        if height == 0 || width == 0 || channels == 0 || classes == 0 {
            return Err(Error::Dataset { row: 1, reason: "header extents must be positive".into() });
        }
        let k = height * width * channels;
        let mut samples = Vec::with_capacity(count);
        for (idx, line) in lines {
            let row = idx + 1;
            let mut fields = line.split(',');
            let label_field = fields.next().unwrap_or_default().trim();
            let label: usize = label_field
                .parse()
                .map_err(|_| Error::Dataset { row, reason: format!("label `{label_field}` is not an integer") })?;
            if label >= classes {
                return Err(Error::Dataset { row, reason: format!("label {label} outside [0, {classes})") });
            }
            let values: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset { row, reason: format!("bad value: {e}") })?;
            if values.len() != k {
                return Err(Error::Dataset { row, reason: format!("expected {k} values, found {}", values.len()) });
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Dataset { row, reason: format!("non-finite value {v}") });
            }
            samples.push(Sample { label, values });
        }
        if samples.len() != count {
            return Err(Error::Dataset {
                row: 1,
                reason: format!("header declares {count} samples, file has {}", samples.len()),
            });
        }
        Ok(Dataset { height, width, channels, classes, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
