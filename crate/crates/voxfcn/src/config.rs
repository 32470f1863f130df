//! Flat `key = value` configuration with `#` comments. Unknown keys are
//! rejected; every key has a documented default. Precedence is
//! command-line overrides > file > defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::eval::DifficultyMode;
use crate::fcn3d::{ArchConfig, TrainConfig};
use crate::synth::SceneSpec;
use crate::voxel::{GridSpec, VoxelError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("duplicate config key {0:?}")]
    DuplicateKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error(transparent)]
    Grid(#[from] VoxelError),
}

/// Everything a run needs, resolved to typed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid: GridSpec,
    pub sphere_radius_fraction: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalSettings,
    pub synth: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// Foreground probability threshold for candidate extraction.
    pub threshold: f64,
    /// Mean-corner-distance radius for neighbor counting, meters.
    pub neighbor_radius: f64,
    /// Ground-plane IoU above which a lower-scored detection is suppressed.
    pub suppress_overlap: f64,
    /// Keep at most this many candidates (by objectness) before scoring;
    /// bounds worst-case cost on degenerate maps.
    pub max_candidates: usize,
    /// Keep at most this many detections (by score) before suppression.
    pub max_detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub difficulty_mode: DifficultyMode,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            // full-scale scans: 0.2 m cells over x [0, 51.2), y [-25.6, 25.6),
            // z [-3.2, 3.2); the synthetic walkthrough overrides grid.* to the
            // desk-scale 64x64x16 grid at 0.4 m
            grid: GridSpec::new([0.0, -25.6, -3.2], 0.2, [256, 256, 32]).unwrap(),
            sphere_radius_fraction: 0.25,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig {
                threshold: 0.5,
                neighbor_radius: 1.0,
                suppress_overlap: 0.1,
                max_candidates: 50_000,
                max_detections: 2_000,
            },
            eval: EvalSettings {
                iou_threshold: 0.7,
                difficulty_mode: DifficultyMode::Range3d,
            },
            synth: SceneSpec::default(),
        }
    }
}

/// `(key, default, description)` for every recognized key, in display order.
pub const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("grid.origin", "0,-25.6,-3.2", "world coordinate of the low grid corner, meters"),
    ("grid.voxel_size", "0.2", "cubic cell edge, meters"),
    ("grid.dims", "256,256,32", "cell counts (x,y,z), each divisible by 8"),
    ("targets.sphere_radius_fraction", "0.25", "positive-sphere radius as a fraction of min(length,width)"),
    ("arch.channels", "16,32,64", "trunk channel widths"),
    ("arch.kernels", "5,5,3", "trunk kernel extents (odd)"),
    ("train.box_weight", "0.02", "weight on the box loss"),
    ("train.lr", "0.005", "SGD learning rate"),
    ("train.momentum", "0.9", "SGD momentum in [0,1)"),
    ("train.epochs", "12", "passes over the training scenes"),
    ("train.neg_pos_ratio", "8", "sampled negatives per positive (min 256 total)"),
    ("train.seed", "0", "parameter init and shuffling seed"),
    ("infer.threshold", "0.5", "foreground probability cut for candidates"),
    ("infer.neighbor_radius", "1.0", "neighbor-count radius, meters"),
    ("infer.suppress_overlap", "0.1", "ground-plane IoU suppression threshold"),
    ("infer.max_candidates", "50000", "cap on candidates entering scoring"),
    ("infer.max_detections", "2000", "cap on detections entering suppression"),
    ("eval.iou_threshold", "0.7", "IoU above which a detection matches"),
    ("eval.difficulty_mode", "range_3d", "difficulty binning: range_3d or image_2d"),
    ("synth.vehicles", "1,3", "vehicles per scene, inclusive range"),
    ("synth.x_range", "3,22.5", "vehicle center x placement, meters"),
    ("synth.y_range", "-10,10", "vehicle center y placement, meters"),
    ("synth.length_range", "3.5,4.5", "vehicle length range, meters"),
    ("synth.width_range", "1.6,1.9", "vehicle width range, meters"),
    ("synth.height_range", "1.4,1.7", "vehicle height range, meters"),
    ("synth.yaw_range", "-3.14159265,3.14159265", "vehicle yaw range, radians"),
    ("synth.points_per_m2", "24", "surface sampling density"),
    ("synth.ground_z", "-1.7", "ground plane height, meters"),
    ("synth.ground_noise_sigma", "0.02", "ground height noise, meters"),
    ("synth.clutter_count", "6", "clutter blobs per scene"),
    ("synth.seed", "0", "base seed for scene generation"),
];

impl Config {
    /// Defaults, then file (if any), then overrides, with strict keys.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(ConfigError::Syntax {
                        line: lineno + 1,
                        reason: format!("expected key = value, got {raw:?}"),
                    });
                };
                let key = key.trim().to_string();
                if kv.insert(key.clone(), value.trim().to_string()).is_some() {
                    return Err(ConfigError::DuplicateKey(key));
                }
            }
        }
        for (key, value) in overrides {
            kv.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(kv)
    }

    fn from_map(kv: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let known: Vec<&str> = KEY_DOCS.iter().map(|(k, _, _)| *k).collect();
        if let Some(bad) = kv.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(bad.clone()));
        }
        let mut cfg = Config::default();

        let get = |key: &str| kv.get(key).map(|s| s.as_str());
        macro_rules! set {
            ($key:expr, $target:expr, $parse:expr) => {
                if let Some(raw) = get($key) {
                    $target = $parse(raw).map_err(|reason: String| ConfigError::BadValue {
                        key: $key.to_string(),
                        reason,
                    })?;
                }
            };
        }

        let mut origin = cfg.grid.origin();
        let mut voxel_size = cfg.grid.voxel_size();
        let mut dims = cfg.grid.dims();
        set!("grid.origin", origin, parse_f64_triple);
        set!("grid.voxel_size", voxel_size, parse_f64);
        set!("grid.dims", dims, parse_usize_triple);
        cfg.grid = GridSpec::new(origin, voxel_size, dims)?;

        set!("targets.sphere_radius_fraction", cfg.sphere_radius_fraction, parse_f64);

        let mut channels = cfg.arch.channels;
        let mut kernels = cfg.arch.kernels;
        set!("arch.channels", channels, parse_usize_triple_arr);
        set!("arch.kernels", kernels, parse_usize_triple_arr);
        cfg.arch = ArchConfig { channels, kernels };

        set!("train.box_weight", cfg.train.box_weight, parse_f64);
        set!("train.lr", cfg.train.lr, parse_f32);
        set!("train.momentum", cfg.train.momentum, parse_f32);
        set!("train.epochs", cfg.train.epochs, parse_usize);
        set!("train.neg_pos_ratio", cfg.train.neg_pos_ratio, parse_usize);
        set!("train.seed", cfg.train.seed, parse_u64);

        set!("infer.threshold", cfg.infer.threshold, parse_f64);
        set!("infer.neighbor_radius", cfg.infer.neighbor_radius, parse_f64);
        set!("infer.suppress_overlap", cfg.infer.suppress_overlap, parse_f64);
        set!("infer.max_candidates", cfg.infer.max_candidates, parse_usize);
        set!("infer.max_detections", cfg.infer.max_detections, parse_usize);

        set!("eval.iou_threshold", cfg.eval.iou_threshold, parse_f64);
        set!("eval.difficulty_mode", cfg.eval.difficulty_mode, parse_difficulty_mode);

        set!("synth.vehicles", cfg.synth.vehicles, parse_usize_pair);
        set!("synth.x_range", cfg.synth.x_range, parse_f64_pair);
        set!("synth.y_range", cfg.synth.y_range, parse_f64_pair);
        set!("synth.length_range", cfg.synth.length_range, parse_f64_pair);
        set!("synth.width_range", cfg.synth.width_range, parse_f64_pair);
        set!("synth.height_range", cfg.synth.height_range, parse_f64_pair);
        set!("synth.yaw_range", cfg.synth.yaw_range, parse_f64_pair);
        set!("synth.points_per_m2", cfg.synth.points_per_m2, parse_f64);
        set!("synth.ground_z", cfg.synth.ground_z, parse_f64);
        set!("synth.ground_noise_sigma", cfg.synth.ground_noise_sigma, parse_f64);
        set!("synth.clutter_count", cfg.synth.clutter_count, parse_usize);
        set!("synth.seed", cfg.synth.seed, parse_u64);

        if !(0.0..=1.0).contains(&cfg.eval.iou_threshold) || cfg.eval.iou_threshold == 0.0 {
            return Err(ConfigError::BadValue {
                key: "eval.iou_threshold".into(),
                reason: format!("must be in (0, 1], got {}", cfg.eval.iou_threshold),
            });
        }
        if !(0.0..=1.0).contains(&cfg.infer.threshold) {
            return Err(ConfigError::BadValue {
                key: "infer.threshold".into(),
                reason: format!("must be in [0, 1], got {}", cfg.infer.threshold),
            });
        }
        Ok(cfg)
    }
}

impl fmt::Display for Config {
    /// Emits the configuration back in file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.grid.origin();
        let d = self.grid.dims();
        writeln!(f, "grid.origin = {},{},{}", o[0], o[1], o[2])?;
        writeln!(f, "grid.voxel_size = {}", self.grid.voxel_size())?;
        writeln!(f, "grid.dims = {},{},{}", d[0], d[1], d[2])?;
        writeln!(f, "targets.sphere_radius_fraction = {}", self.sphere_radius_fraction)?;
        writeln!(f, "arch.channels = {},{},{}", self.arch.channels[0], self.arch.channels[1], self.arch.channels[2])?;
        writeln!(f, "arch.kernels = {},{},{}", self.arch.kernels[0], self.arch.kernels[1], self.arch.kernels[2])?;
        writeln!(f, "train.box_weight = {}", self.train.box_weight)?;
        writeln!(f, "train.lr = {}", self.train.lr)?;
        writeln!(f, "train.momentum = {}", self.train.momentum)?;
        writeln!(f, "train.epochs = {}", self.train.epochs)?;
        writeln!(f, "train.neg_pos_ratio = {}", self.train.neg_pos_ratio)?;
        writeln!(f, "train.seed = {}", self.train.seed)?;
        writeln!(f, "infer.threshold = {}", self.infer.threshold)?;
        writeln!(f, "infer.neighbor_radius = {}", self.infer.neighbor_radius)?;
        writeln!(f, "infer.suppress_overlap = {}", self.infer.suppress_overlap)?;
        writeln!(f, "infer.max_candidates = {}", self.infer.max_candidates)?;
        writeln!(f, "infer.max_detections = {}", self.infer.max_detections)?;
        writeln!(f, "eval.iou_threshold = {}", self.eval.iou_threshold)?;
        writeln!(
            f,
            "eval.difficulty_mode = {}",
            match self.eval.difficulty_mode {
                DifficultyMode::Range3d => "range_3d",
                DifficultyMode::Image2d => "image_2d",
            }
        )?;
        writeln!(f, "synth.vehicles = {},{}", self.synth.vehicles.0, self.synth.vehicles.1)?;
        writeln!(f, "synth.x_range = {},{}", self.synth.x_range.0, self.synth.x_range.1)?;
        writeln!(f, "synth.y_range = {},{}", self.synth.y_range.0, self.synth.y_range.1)?;
        writeln!(f, "synth.length_range = {},{}", self.synth.length_range.0, self.synth.length_range.1)?;
        writeln!(f, "synth.width_range = {},{}", self.synth.width_range.0, self.synth.width_range.1)?;
        writeln!(f, "synth.height_range = {},{}", self.synth.height_range.0, self.synth.height_range.1)?;
        writeln!(f, "synth.yaw_range = {},{}", self.synth.yaw_range.0, self.synth.yaw_range.1)?;
        writeln!(f, "synth.points_per_m2 = {}", self.synth.points_per_m2)?;
        writeln!(f, "synth.ground_z = {}", self.synth.ground_z)?;
        writeln!(f, "synth.ground_noise_sigma = {}", self.synth.ground_noise_sigma)?;
        writeln!(f, "synth.clutter_count = {}", self.synth.clutter_count)?;
        writeln!(f, "synth.seed = {}", self.synth.seed)
    }
}

fn parse_f64(raw: &str) -> Result<f64, String> {
    raw.parse().map_err(|_| format!("not a number: {raw:?}"))
}

fn parse_f32(raw: &str) -> Result<f32, String> {
    raw.parse().map_err(|_| format!("not a number: {raw:?}"))
}

fn parse_usize(raw: &str) -> Result<usize, String> {
    raw.parse().map_err(|_| format!("not a non-negative integer: {raw:?}"))
}

fn parse_u64(raw: &str) -> Result<u64, String> {
    raw.parse().map_err(|_| format!("not a non-negative integer: {raw:?}"))
}

fn split_n(raw: &str, n: usize) -> Result<Vec<&str>, String> {
    let parts: Vec<&str> = raw.split(',').map(|s| s.trim()).collect();
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated values, got {raw:?}"));
    }
    Ok(parts)
}

fn parse_f64_triple(raw: &str) -> Result<[f64; 3], String> {
    let p = split_n(raw, 3)?;
    Ok([parse_f64(p[0])?, parse_f64(p[1])?, parse_f64(p[2])?])
}

fn parse_usize_triple(raw: &str) -> Result<[usize; 3], String> {
    let p = split_n(raw, 3)?;
    Ok([parse_usize(p[0])?, parse_usize(p[1])?, parse_usize(p[2])?])
}

fn parse_usize_triple_arr(raw: &str) -> Result<[usize; 3], String> {
    parse_usize_triple(raw)
}

fn parse_f64_pair(raw: &str) -> Result<(f64, f64), String> {
    let p = split_n(raw, 2)?;
    Ok((parse_f64(p[0])?, parse_f64(p[1])?))
}

fn parse_usize_pair(raw: &str) -> Result<(usize, usize), String> {
    let p = split_n(raw, 2)?;
    Ok((parse_usize(p[0])?, parse_usize(p[1])?))
}

fn parse_difficulty_mode(raw: &str) -> Result<DifficultyMode, String> {
    match raw {
        "range_3d" => Ok(DifficultyMode::Range3d),
        "image_2d" => Ok(DifficultyMode::Image2d),
        other => Err(format!("expected range_3d or image_2d, got {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = Config::load(None, &[]).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.grid.dims(), [256, 256, 32]);
    }

    #[test]
    fn file_values_override_defaults() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "# desk-scale grid").unwrap();
        writeln!(f, "grid.voxel_size = 0.4").unwrap();
        writeln!(f, "grid.dims = 64,64,16").unwrap();
        writeln!(f, "grid.origin = 0,-12.8,-2.0").unwrap();
        writeln!(f, "train.epochs = 3  # quick run").unwrap();
        let cfg = Config::load(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.grid.voxel_size(), 0.4);
        assert_eq!(cfg.grid.dims(), [64, 64, 16]);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn overrides_beat_the_file() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "train.epochs = 3").unwrap();
        let cfg = Config::load(
            Some(f.path()),
            &[("train.epochs".into(), "7".into())],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "train.eppochs = 3").unwrap();
        assert!(matches!(
            Config::load(Some(f.path()), &[]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "train.epochs = 3").unwrap();
        writeln!(f, "train.epochs = 4").unwrap();
        assert!(matches!(
            Config::load(Some(f.path()), &[]),
            Err(ConfigError::DuplicateKey(_))
        ));
    }

    #[test]
    fn bad_grid_dims_are_rejected() {
        let cfg = Config::load(None, &[("grid.dims".into(), "60,64,16".into())]);
        assert!(matches!(cfg, Err(ConfigError::Grid(_))));
    }

    #[test]
    fn display_roundtrips_through_load() {
        let cfg = Config::load(
            None,
            &[
                ("grid.dims".into(), "64,64,16".into()),
                ("grid.voxel_size".into(), "0.4".into()),
                ("train.lr".into(), "0.0025".into()),
            ],
        )
        .unwrap();
        let mut f = NamedTempFile::new().unwrap();
        write!(f, "{cfg}").unwrap();
        let back = Config::load(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn every_documented_default_parses() {
        let overrides: Vec<(String, String)> = KEY_DOCS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        let cfg = Config::load(None, &overrides).unwrap();
        assert_eq!(cfg.grid.dims(), [256, 256, 32]);
    }
}
