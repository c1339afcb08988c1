//! Training configuration as flat `key = value` text.
//!
//! The canonical form lists every key in a fixed order with normalized
//! values; its SHA-256 digest identifies a configuration in checkpoints and
//! reports.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::appearance::HeadConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// How the MPI orientations are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One forward MPI.
    Single,
    /// Front, left, right and below.
    Kitti,
    /// Front, back, left, right, below, plus the centered cube.
    Scannet,
    /// Orientations from `mpi_yaw` / `mpi_pitch`.
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Single => "single",
            Preset::Kitti => "kitti",
            Preset::Scannet => "scannet",
            Preset::Custom => "custom",
        }
    }

    /// `(yaw, pitch)` in degrees relative to the scene frame.
    pub fn orientations(self) -> Vec<(f64, f64)> {
        match self {
            Preset::Single => vec![(0.0, 0.0)],
            Preset::Kitti => vec![(0.0, 0.0), (90.0, 0.0), (-90.0, 0.0), (0.0, -90.0)],
            Preset::Scannet => vec![(0.0, 0.0), (180.0, 0.0), (90.0, 0.0), (-90.0, 0.0), (0.0, -90.0)],
            Preset::Custom => vec![],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Preset::Single),
            "kitti" => Ok(Preset::Kitti),
            "scannet" => Ok(Preset::Scannet),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected single, kitti, scannet or custom)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Explicit yaw angles in degrees; used by the custom preset.
    pub mpi_yaw: Vec<f64>,
    /// Explicit pitch angles in degrees; used by the custom preset.
    pub mpi_pitch: Vec<f64>,
    /// Full horizontal / vertical field of view of every MPI in degrees.
    /// Zero derives it from the training cameras plus `fov_margin`.
    pub mpi_fov_x: f64,
    pub mpi_fov_y: f64,
    pub fov_margin: f64,
    /// Near plane as a fraction of the scene depth hint.
    pub near_fraction: f64,
    /// Absolute near plane; overrides `near_fraction` when positive.
    pub near: f64,
    pub mpi_res_x: usize,
    pub mpi_res_y: usize,
    pub planes: usize,
    pub cube: bool,
    pub cube_res: usize,
    /// Half edge of the cube; zero derives it from the camera spread.
    pub cube_half_extent: f64,
    pub cube_step_ratio: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub lr_grid: f64,
    pub lr_head: f64,
    pub lr_reliability: f64,
    pub lr_final_factor: f64,
    pub seed: u64,
    pub background: [f64; 3],
    pub reliability: bool,
    pub head: HeadConfig,
    pub alpha_init: f64,
    pub feature_init: f64,
    /// Training renders skip shading samples with weight below this.
    pub color_skip: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Single,
            mpi_yaw: vec![],
            mpi_pitch: vec![],
            mpi_fov_x: 0.0,
            mpi_fov_y: 0.0,
            fov_margin: 0.1,
            near_fraction: 0.3,
            near: 0.0,
            mpi_res_x: 64,
            mpi_res_y: 64,
            planes: 32,
            cube: false,
            cube_res: 48,
            cube_half_extent: 0.0,
            cube_step_ratio: 0.5,
            stage1_iters: 3000,
            stage2_iters: 1000,
            batch_size: 4096,
            loss: LossWeights::default(),
            lr_grid: 0.1,
            lr_head: 1e-3,
            lr_reliability: 1e-2,
            lr_final_factor: 0.1,
            seed: 0,
            background: [1.0, 1.0, 1.0],
            reliability: true,
            head: HeadConfig::default(),
            alpha_init: 1e-3,
            feature_init: 1e-2,
            color_skip: 1e-4,
            log_every: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_color(key: &str, value: &str) -> Result<[f64; 3]> {
    match value {
        "white" => return Ok([1.0; 3]),
        "black" => return Ok([0.0; 3]),
        _ => {}
    }
    let v = parse_list(key, value)?;
    match v.as_slice() {
        &[r, g, b] => Ok([r, g, b]),
        &[x] => Ok([x; 3]),
        _ => Err(Error::Config(format!("'{key}' needs one or three components"))),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.parse()?,
            "mpi_yaw" => self.mpi_yaw = parse_list(key, v)?,
            "mpi_pitch" => self.mpi_pitch = parse_list(key, v)?,
            "mpi_fov_x" => self.mpi_fov_x = parse(key, v)?,
            "mpi_fov_y" => self.mpi_fov_y = parse(key, v)?,
            "fov_margin" => self.fov_margin = parse(key, v)?,
            "near_fraction" => self.near_fraction = parse(key, v)?,
            "near" => self.near = parse(key, v)?,
            "mpi_res_x" => self.mpi_res_x = parse(key, v)?,
            "mpi_res_y" => self.mpi_res_y = parse(key, v)?,
            "planes" => self.planes = parse(key, v)?,
            "cube" => self.cube = parse_bool(key, v)?,
            "cube_res" => self.cube_res = parse(key, v)?,
            "cube_half_extent" => self.cube_half_extent = parse(key, v)?,
            "cube_step_ratio" => self.cube_step_ratio = parse(key, v)?,
            "stage1_iters" => self.stage1_iters = parse(key, v)?,
            "stage2_iters" => self.stage2_iters = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda_pt_rgb" => self.loss.pt_rgb = parse(key, v)?,
            "lambda_bg" => self.loss.bg = parse(key, v)?,
            "lambda_dist" => self.loss.dist = parse(key, v)?,
            "lambda_tv" => self.loss.tv = parse(key, v)?,
            "lr_grid" => self.lr_grid = parse(key, v)?,
            "lr_head" => self.lr_head = parse(key, v)?,
            "lr_reliability" => self.lr_reliability = parse(key, v)?,
            "lr_final_factor" => self.lr_final_factor = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "background" => self.background = parse_color(key, v)?,
            "reliability" => self.reliability = parse_bool(key, v)?,
            "feature_dim" => self.head.feature_dim = parse(key, v)?,
            "pe_freqs_x" => self.head.pe_freqs_x = parse(key, v)?,
            "pe_freqs_d" => self.head.pe_freqs_d = parse(key, v)?,
            "hidden_width" => self.head.hidden_width = parse(key, v)?,
            "hidden_layers" => self.head.hidden_layers = parse(key, v)?,
            "alpha_init" => self.alpha_init = parse(key, v)?,
            "feature_init" => self.feature_init = parse(key, v)?,
            "color_skip" => self.color_skip = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Every key with its normalized value, in canonical order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("preset", self.preset.name().to_string()),
            ("mpi_yaw", fmt_list(&self.mpi_yaw)),
            ("mpi_pitch", fmt_list(&self.mpi_pitch)),
            ("mpi_fov_x", format!("{:?}", self.mpi_fov_x)),
            ("mpi_fov_y", format!("{:?}", self.mpi_fov_y)),
            ("fov_margin", format!("{:?}", self.fov_margin)),
            ("near_fraction", format!("{:?}", self.near_fraction)),
            ("near", format!("{:?}", self.near)),
            ("mpi_res_x", self.mpi_res_x.to_string()),
            ("mpi_res_y", self.mpi_res_y.to_string()),
            ("planes", self.planes.to_string()),
            ("cube", self.cube.to_string()),
            ("cube_res", self.cube_res.to_string()),
            ("cube_half_extent", format!("{:?}", self.cube_half_extent)),
            ("cube_step_ratio", format!("{:?}", self.cube_step_ratio)),
            ("stage1_iters", self.stage1_iters.to_string()),
            ("stage2_iters", self.stage2_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda_pt_rgb", format!("{:?}", self.loss.pt_rgb)),
            ("lambda_bg", format!("{:?}", self.loss.bg)),
            ("lambda_dist", format!("{:?}", self.loss.dist)),
            ("lambda_tv", format!("{:?}", self.loss.tv)),
            ("lr_grid", format!("{:?}", self.lr_grid)),
            ("lr_head", format!("{:?}", self.lr_head)),
            ("lr_reliability", format!("{:?}", self.lr_reliability)),
            ("lr_final_factor", format!("{:?}", self.lr_final_factor)),
            ("seed", self.seed.to_string()),
            ("background", fmt_list(&self.background)),
            ("reliability", self.reliability.to_string()),
            ("feature_dim", self.head.feature_dim.to_string()),
            ("pe_freqs_x", self.head.pe_freqs_x.to_string()),
            ("pe_freqs_d", self.head.pe_freqs_d.to_string()),
            ("hidden_width", self.head.hidden_width.to_string()),
            ("hidden_layers", self.head.hidden_layers.to_string()),
            ("alpha_init", format!("{:?}", self.alpha_init)),
            ("feature_init", format!("{:?}", self.feature_init)),
            ("color_skip", format!("{:?}", self.color_skip)),
            ("log_every", self.log_every.to_string()),
        ]
    }

    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `(yaw, pitch)` of every MPI in degrees.
    pub fn orientations(&self) -> Result<Vec<(f64, f64)>> {
        if self.preset != Preset::Custom {
            return Ok(self.preset.orientations());
        }
        if self.mpi_yaw.is_empty() {
            return Err(Error::Config("custom preset needs at least one entry in mpi_yaw".into()));
        }
        let pitch = if self.mpi_pitch.is_empty() {
            vec![0.0; self.mpi_yaw.len()]
        } else {
            self.mpi_pitch.clone()
        };
        if pitch.len() != self.mpi_yaw.len() {
            return Err(Error::Config("mpi_yaw and mpi_pitch must have the same length".into()));
        }
        Ok(self.mpi_yaw.iter().cloned().zip(pitch).collect())
    }

    pub fn uses_cube(&self) -> bool {
        self.cube || self.preset == Preset::Scannet
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.orientations()?.len();
        if self.planes < 2 || self.mpi_res_x < 2 || self.mpi_res_y < 2 {
            return Err(Error::Config("MPIs need at least 2 planes and 2×2 texels".into()));
        }
        if self.uses_cube() && self.cube_res < 2 {
            return Err(Error::Config("cube resolution must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage2_iters > 0 && self.reliability && k < 2 {
            log::debug!("stage 2 is skipped with a single MPI");
        }
        if !(self.near_fraction > 0.0) && !(self.near > 0.0) {
            return Err(Error::Config("either near or near_fraction must be positive".into()));
        }
        for (name, v) in [
            ("lr_grid", self.lr_grid),
            ("lr_head", self.lr_head),
            ("lr_reliability", self.lr_reliability),
            ("lr_final_factor", self.lr_final_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.head.hidden_layers == 0 && self.head.hidden_width == 0 {
            return Err(Error::Config("color head needs a layer width".into()));
        }
        self.loss.validate()
    }
}
