//! `key = value` run configuration with defaults for every module.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Every accepted key with its default. Empty means "not set".
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("synth.sequences", "20"),
    ("synth.frames", "8"),
    ("synth.size", "64"),
    ("synth.tracks", "256"),
    ("synth.yaw", "0.5"),
    ("synth.pitch", "0.2"),
    ("synth.roll", "0.1"),
    ("synth.translation", "0.1"),
    ("synth.deform", "0.8"),
    ("model.frequencies", "6"),
    ("model.hidden", "64"),
    ("model.grid_resolution", "32"),
    ("model.feature_dim", "16"),
    ("model.sigma", "1.0"),
    ("train.data", ""),
    ("train.steps", "2000"),
    ("train.batch_pairs", "2"),
    ("train.lr_embedder", "1e-2"),
    ("train.lr_grid", "4e-2"),
    ("train.lr_seghead", "2e-3"),
    ("train.warmup_steps", "100"),
    ("train.weight_decay", "1e-4"),
    ("train.mode", "canonical"),
    ("train.augment", "true"),
    ("train.lambda_lmks", "50"),
    ("train.lambda_segm", "1"),
    ("embed.checkpoint", ""),
    ("embed.image", ""),
    ("embed.mask", ""),
    ("warp.source_map", ""),
    ("warp.source_image", ""),
    ("warp.target_map", ""),
    ("warp.tracks", ""),
    ("query.maps", ""),
    ("query.pixels", ""),
    ("query.targets", ""),
    ("query.radius", "0"),
    ("triangulate.maps", ""),
    ("triangulate.cameras", ""),
    ("triangulate.images", ""),
    ("stereo.downsample_factor", "4.0"),
    ("stereo.min_track_len", "2"),
    ("stereo.uvw_tol", "0.05"),
    ("stereo.track_tol", "0.1"),
    ("stereo.reproj_thresh_px", "10"),
    ("fit.map", ""),
    ("fit.camera", ""),
    ("fit.init", "0 0 0 0 0 0 0"),
    ("fit.iters", "50"),
    ("fit.free_scale", "false"),
    ("eval.checkpoint", ""),
    ("eval.data", ""),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected \"key = value\"", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(CliError::Usage(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    /// A path that must be set.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.str(key) {
            "" => Err(CliError::Usage(format!("{key} is required"))),
            v => Ok(PathBuf::from(v)),
        }
    }

    /// Comma-separated paths; empty when unset.
    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect()
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
