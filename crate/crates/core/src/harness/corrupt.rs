use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BrightnessShift,
    ContrastScale,
    BlockPixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BrightnessShift,
        CorruptionKind::ContrastScale,
        CorruptionKind::BlockPixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BrightnessShift => "brightness_shift",
            CorruptionKind::ContrastScale => "contrast_scale",
            CorruptionKind::BlockPixelate => "block_pixelate",
        }
    }

    /// Report grouping, mirroring the image-corruption families.
    pub fn group(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise => "noise",
            CorruptionKind::BlockPixelate => "blur",
            CorruptionKind::BrightnessShift => "weather",
            CorruptionKind::ContrastScale => "digital",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

/// A corruption kind at severity 1 to 5. Serialized as `kind:severity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.05, 0.1, 0.2, 0.35, 0.5];
const IMPULSE_FRACTION: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.3];
const BRIGHTNESS_OFFSET: [f64; 5] = [0.1, 0.2, 0.4, 0.6, 0.8];
const CONTRAST_FACTOR: [f64; 5] = [0.8, 0.6, 0.45, 0.3, 0.2];
const PIXELATE_BLOCK: [usize; 5] = [2, 2, 4, 4, 8];

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity must be 1 to 5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    fn slot(&self) -> usize {
        usize::from(self.severity - 1)
    }

    /// Kind-specific parameter from the severity table.
    pub fn parameter(&self) -> f64 {
        let i = self.slot();
        match self.kind {
            CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA[i],
            CorruptionKind::ImpulseNoise => IMPULSE_FRACTION[i],
            CorruptionKind::BrightnessShift => BRIGHTNESS_OFFSET[i],
            CorruptionKind::ContrastScale => CONTRAST_FACTOR[i],
            CorruptionKind::BlockPixelate => PIXELATE_BLOCK[i] as f64,
        }
    }

    /// Parameter oriented so that larger means stronger.
    pub fn intensity(&self) -> f64 {
        match self.kind {
            CorruptionKind::ContrastScale => 1.0 - self.parameter(),
            _ => self.parameter(),
        }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.severity)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("corruption `{s}` is not of the form kind:severity")))?;
        let severity = sev
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("corruption `{s}` has a non-integer severity")))?;
        CorruptionSpec::new(kind.parse()?, severity)
    }
}

impl Serialize for CorruptionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CorruptionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Contrast scaling by an arbitrary factor around each row's mean.
pub fn scale_contrast(x: &Tensor, factor: f64) -> Tensor {
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        for v in row.iter_mut() {
            *v = factor * *v + (1.0 - factor) * mean;
        }
    }
    out
}

/// Applies `spec` to every row of `x`, deterministically in `seed`.
pub fn corrupt(x: &Tensor, spec: CorruptionSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.last_dim();
    let p = spec.parameter();
    let mut out = x.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, p).expect("positive table entry");
            for v in out.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        CorruptionKind::ImpulseNoise => {
            let count = ((p * d as f64).round() as usize).clamp(1, d);
            for row in out.data_mut().chunks_exact_mut(d) {
                let magnitude = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for j in rand::seq::index::sample(&mut rng, d, count) {
                    let mut value = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                    if row[j] == value {
                        value = -value;
                    }
                    row[j] = value;
                }
            }
        }
        CorruptionKind::BrightnessShift => {
            for v in out.data_mut() {
                *v += p;
            }
        }
        CorruptionKind::ContrastScale => out = scale_contrast(x, p),
        CorruptionKind::BlockPixelate => {
            let block = p as usize;
            for row in out.data_mut().chunks_exact_mut(d) {
                for chunk in row.chunks_mut(block) {
                    let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
                    chunk.fill(mean);
                }
            }
        }
    }
    out
}
