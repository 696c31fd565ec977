use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    /// Severity parameter for levels 1..=5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.17],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.9, 1.3, 1.8],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.22, 0.30],
            CorruptionKind::Contrast => [0.85, 0.70, 0.55, 0.40, 0.30],
        }
    }

    fn index(self) -> u64 {
        CorruptionKind::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown corruption `{s}` (expected one of gaussian_noise, impulse_noise, gaussian_blur, brightness, contrast)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::Config(format!("corruption level must be 1..5, got {level}")));
        }
        Ok(CorruptionSpec { kind, level })
    }

    pub fn severity(&self) -> f64 {
        self.kind.table()[usize::from(self.level) - 1]
    }

    /// All 25 cells, kind-major.
    pub fn grid() -> impl Iterator<Item = CorruptionSpec> {
        CorruptionKind::ALL
            .into_iter()
            .flat_map(|kind| (1..=5).map(move |level| CorruptionSpec { kind, level }))
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.level)
    }
}

/// Independent stream for one evaluation cell, so each cell is reproducible
/// on its own.
pub fn cell_prng(seed: u64, spec: CorruptionSpec) -> Prng {
    Prng::new(seed).fork(spec.kind.index() * 16 + u64::from(spec.level))
}

fn gaussian_kernel(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| v / total)
}

/// Separable 5x5 blur of one `h x w` plane with replicated borders.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, k: &[f64; 5]) {
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (0..5)
                .map(|t| k[t] * plane[i * w + clampi(j as isize + t as isize - 2, w)])
                .sum();
        }
    }
    for i in 0..h {
        for j in 0..w {
            plane[i * w + j] = (0..5)
                .map(|t| k[t] * tmp[clampi(i as isize + t as isize - 2, h) * w + j])
                .sum();
        }
    }
}

/// Applies one corruption at one severity, then clamps to `[0, 1]`.
/// Shape and labels are untouched.
pub fn corrupt(ds: &ImageDataset, spec: CorruptionSpec, prng: &mut Prng) -> ImageDataset {
    let s = spec.severity();
    let [_, h, w] = ds.image_dims();
    let mut x: Tensor = ds.images().clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in x.data_mut() {
                *v += s * prng.next_gaussian();
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in x.data_mut() {
                if prng.next_f64() < s {
                    *v = if prng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => {
            let k = gaussian_kernel(s);
            for plane in x.data_mut().chunks_mut(h * w) {
                blur_plane(plane, h, w, &k);
            }
        }
        CorruptionKind::Brightness => {
            for v in x.data_mut() {
                *v += s;
            }
        }
        CorruptionKind::Contrast => {
            let len = ds.images().len() / ds.len().max(1);
            for img in x.data_mut().chunks_mut(len) {
                let x0 = img[0];
                let mean = x0 + img.iter().map(|v| v - x0).sum::<f64>() / len as f64;
                for v in img {
                    *v = mean + (*v - mean) * s;
                }
            }
        }
    }
    ds.with_images(x, format!("{}+{spec}", ds.name))
}
