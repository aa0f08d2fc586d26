//! Synthetic zonally advected wave fields.
//!
//! `X_c(t, i, j) = Σ_k a_k·cos(m_k·λ_j − ω_k·t + φ_k + c·δ)·exp(−(θ_i/σ_k)²) + r_c(t, i, j)`
//!
//! with integer wavenumbers `m_k` (so every field is exactly periodic in
//! longitude), a per-channel phase offset `δ`, and AR(1) red noise `r`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LatLonGrid;
use crate::io::gt1;
use crate::model::NormStats;
use crate::rng::Streams;
use crate::tensor::Tensor;

/// Hours represented by one synthetic time step.
pub const STEP_HOURS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Zonal wavenumber.
    pub m: i32,
    /// Meridional e-folding width, degrees.
    pub sigma: f64,
    /// Angular frequency, radians per step.
    pub omega: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Wave {
    /// Eastward drift in grid columns per step on a grid of `n_lon` columns.
    pub fn columns_per_step(&self, n_lon: usize) -> f64 {
        self.omega / self.m as f64 * n_lon as f64 / std::f64::consts::TAU
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub channels: usize,
    pub steps: usize,
    pub waves: Vec<Wave>,
    /// Stationary standard deviation of the red noise.
    pub noise_amplitude: f64,
    /// Lag-one autocorrelation of the red noise, in `[0, 1)`.
    pub noise_decorrelation: f64,
    /// Phase offset between consecutive channels, radians.
    #[serde(default)]
    pub channel_phase_step: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `n_waves` random waves with integer wavenumbers 1–4 drifting 0.5–1.5
    /// columns per step.
    pub fn random(n_lat: usize, n_lon: usize, channels: usize, steps: usize, n_waves: usize, seed: u64) -> Self {
        let mut rng = Streams::new(seed).stream("synth-waves");
        let waves = (0..n_waves)
            .map(|_| {
                let m = rng.random_range(1..=4);
                let cols = rng.random_range(0.5..1.5);
                Wave {
                    m,
                    sigma: rng.random_range(25.0..60.0),
                    omega: cols * m as f64 * std::f64::consts::TAU / n_lon as f64,
                    amplitude: rng.random_range(0.5..1.5),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self {
            n_lat,
            n_lon,
            channels,
            steps,
            waves,
            noise_amplitude: 0.02,
            noise_decorrelation: 0.9,
            channel_phase_step: 0.7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 || self.n_lon == 0 || self.channels == 0 {
            return Err(Error::config("grid and channel counts must be positive"));
        }
        if let Some(w) = self
            .waves
            .iter()
            .find(|w| w.m < 0 || !w.sigma.is_finite() || w.sigma <= 0.0)
        {
            return Err(Error::config(format!(
                "invalid wave {w:?}: wavenumber must be a non-negative integer, width positive"
            )));
        }
        if !(0.0..1.0).contains(&self.noise_decorrelation) || self.noise_amplitude < 0.0 {
            return Err(Error::config("noise decorrelation must be in [0, 1) and amplitude ≥ 0"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<LatLonGrid> {
        LatLonGrid::cell_centered(self.n_lat, self.n_lon)
    }

    /// Noise-free value at fractional longitude index `j`.
    pub fn wave_value(&self, t: f64, c: usize, latitude: f64, j: f64) -> f64 {
        let lambda = j * std::f64::consts::TAU / self.n_lon as f64;
        self.waves
            .iter()
            .map(|w| {
                let arg = w.m as f64 * lambda - w.omega * t + w.phase + c as f64 * self.channel_phase_step;
                w.amplitude * arg.cos() * (-(latitude / w.sigma).powi(2)).exp()
            })
            .sum()
    }
}

/// Every time step as a `[C, H, W]` field.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Tensor<f64>>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let (c, h, w) = (cfg.channels, cfg.n_lat, cfg.n_lon);
    let mut rng = Streams::new(cfg.seed).stream("synth-noise");
    let rho = cfg.noise_decorrelation;
    let innov = cfg.noise_amplitude * (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = (0..c * h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.noise_amplitude * z
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        if t > 0 {
            for n in noise.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *n = rho * *n + innov * e;
            }
        }
        let field = Tensor::from_fn(vec![c, h, w], |idx| {
            let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
            cfg.wave_value(t as f64, ch, grid.latitudes()[i], j as f64) + noise[idx]
        });
        out.push(field);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config: SynthConfig,
    pub step_hours: f64,
    pub latitudes: Vec<f64>,
    pub files: Vec<String>,
    pub stats: NormStats,
}

pub const MANIFEST: &str = "manifest.json";

pub fn step_file(t: usize) -> String {
    format!("step_{t:06}.gt1")
}

/// Writes one GT1 file per step plus `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<DataManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = generate(cfg)?;
    let mut files = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let name = step_file(t);
        gt1::write_tensor(dir.join(&name), f)?;
        files.push(name);
    }
    let manifest = DataManifest {
        config: cfg.clone(),
        step_hours: STEP_HOURS,
        latitudes: cfg.grid()?.latitudes().to_vec(),
        files,
        stats: NormStats::from_fields(&frames)?,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Manifest and raw (unnormalised) frames of a dataset directory.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DataManifest, Vec<Tensor<f64>>)> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    let frames = manifest
        .files
        .iter()
        .map(|f| gt1::read_tensor(dir.join(f)).map(|t| t.to::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, frames))
}
