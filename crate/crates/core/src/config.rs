//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors; missing keys keep the defaults listed in [`KEYS`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::duet::{NoiseInit, RotationPolicy, SamplerConfig, Site, ToyConfig, TrainConfig};
use crate::error::{Error, Result};

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("grid.height", "64"),
    ("rig.n", "20"),
    ("rig.fov", "90"),
    ("eppa.sigma", "1"),
    ("eppa.sites", "down2,mid,up2"),
    ("train.steps", "2000"),
    ("train.lr", "0.01"),
    ("train.samples", "32"),
    ("train.noise", "joint"),
    ("train.randomize_yaw", "false"),
    ("sample.ddim_steps", "50"),
    ("sample.eta", "0"),
    ("sample.rotation", "lockstep"),
    ("sample.init", "joint"),
    ("sample.decode_pad", "true"),
    ("seed", "0"),
    ("paths.out", "out"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_height: usize,
    pub rig_fov: f64,
    pub eppa_sigma: f64,
    pub eppa_sites: Vec<Site>,
    pub train_steps: usize,
    pub train_lr: f64,
    pub train_samples: usize,
    pub train_noise: NoiseInit,
    pub train_randomize_yaw: bool,
    pub ddim_steps: usize,
    pub eta: f64,
    pub rotation: RotationPolicy,
    pub sample_init: NoiseInit,
    pub decode_pad: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Format(format!("config key {key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_sites(v: &str) -> Result<Vec<Site>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().map_err(|e: Error| Error::Format(format!("config key eppa.sites: {e}")))).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<(&str, String)> = KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("config line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = values.iter_mut().find(|(key, _)| *key == k).ok_or_else(|| Error::Format(format!("config line {}: unknown key {k:?}", no + 1)))?;
            if !seen.insert(k.to_string()) {
                return Err(Error::Format(format!("config line {}: key {k:?} repeated", no + 1)));
            }
            slot.1 = v.to_string();
        }
        let get = |k: &str| values.iter().find(|(key, _)| *key == k).map(|(_, v)| v.as_str()).expect("known key");
        let rig_n: usize = parse_value("rig.n", get("rig.n"))?;
        if rig_n != 20 {
            return Err(Error::Domain(format!("rig.n is fixed at 20 (icosahedral rig), got {rig_n}")));
        }
        let map_err = |k: &'static str| move |e: Error| Error::Format(format!("config key {k}: {e}"));
        let cfg = Self {
            grid_height: parse_value("grid.height", get("grid.height"))?,
            rig_fov: parse_value("rig.fov", get("rig.fov"))?,
            eppa_sigma: parse_value("eppa.sigma", get("eppa.sigma"))?,
            eppa_sites: parse_sites(get("eppa.sites"))?,
            train_steps: parse_value("train.steps", get("train.steps"))?,
            train_lr: parse_value("train.lr", get("train.lr"))?,
            train_samples: parse_value("train.samples", get("train.samples"))?,
            train_noise: get("train.noise").parse().map_err(map_err("train.noise"))?,
            train_randomize_yaw: parse_bool("train.randomize_yaw", get("train.randomize_yaw"))?,
            ddim_steps: parse_value("sample.ddim_steps", get("sample.ddim_steps"))?,
            eta: parse_value("sample.eta", get("sample.eta"))?,
            rotation: get("sample.rotation").parse().map_err(map_err("sample.rotation"))?,
            sample_init: get("sample.init").parse().map_err(map_err("sample.init"))?,
            decode_pad: parse_bool("sample.decode_pad", get("sample.decode_pad"))?,
            seed: parse_value("seed", get("seed"))?,
            out: PathBuf::from(get("paths.out")),
        };
        cfg.toy()?.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let sites: Vec<_> = self.eppa_sites.iter().map(|s| s.name()).collect();
        let noise = |n: NoiseInit| match n {
            NoiseInit::Joint => "joint",
            NoiseInit::Independent => "independent",
        };
        let rotation = match self.rotation {
            RotationPolicy::None => "none",
            RotationPolicy::Lockstep => "lockstep",
        };
        let lines = [
            format!("grid.height = {}", self.grid_height),
            "rig.n = 20".to_string(),
            format!("rig.fov = {:?}", self.rig_fov),
            format!("eppa.sigma = {:?}", self.eppa_sigma),
            format!("eppa.sites = {}", if sites.is_empty() { "none".to_string() } else { sites.join(",") }),
            format!("train.steps = {}", self.train_steps),
            format!("train.lr = {:?}", self.train_lr),
            format!("train.samples = {}", self.train_samples),
            format!("train.noise = {}", noise(self.train_noise)),
            format!("train.randomize_yaw = {}", self.train_randomize_yaw),
            format!("sample.ddim_steps = {}", self.ddim_steps),
            format!("sample.eta = {:?}", self.eta),
            format!("sample.rotation = {rotation}"),
            format!("sample.init = {}", noise(self.sample_init)),
            format!("sample.decode_pad = {}", self.decode_pad),
            format!("seed = {}", self.seed),
            format!("paths.out = {}", self.out.display()),
        ];
        lines.join("\n") + "\n"
    }

    pub fn toy(&self) -> Result<ToyConfig> {
        let cfg = ToyConfig {
            height: self.grid_height,
            fov_deg: self.rig_fov,
            sigma: self.eppa_sigma,
            sites: self.eppa_sites.clone(),
            ..ToyConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig { steps: self.train_steps, lr: self.train_lr, seed: self.seed, noise: self.train_noise, randomize_yaw: self.train_randomize_yaw }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.ddim_steps, eta: self.eta, rotation: self.rotation, decode_pad: self.decode_pad, init: self.sample_init, seed: self.seed }
    }
}
