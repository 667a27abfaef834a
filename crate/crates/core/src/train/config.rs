//! Training hyperparameters and their `key = value` form.

use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::InterpMode;
use crate::losses::LossWeights;
use crate::medium::{BackscatterMode, DEFAULT_PE_FREQS};
use crate::scene::MAX_SH_DEGREE;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    /// Start of the exponential position schedule, times the scene extent.
    pub position: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub backscatter: f64,
    pub medium: f64,
    pub gamma: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            backscatter: 2.5e-3,
            medium: 1e-3,
            gamma: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            position_final: 0.0,
            sh_dc: 0.0,
            sh_rest: 0.0,
            opacity: 0.0,
            scale: 0.0,
            rotation: 0.0,
            backscatter: 0.0,
            medium: 0.0,
            gamma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub iterations: usize,
    pub sh_degree: usize,
    /// Raise the active SH degree by one every this many iterations.
    pub sh_increase_interval: usize,
    pub densify: bool,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Split rather than clone above this fraction of the scene extent.
    pub percent_dense: f64,
    pub ifi: bool,
    pub afw: bool,
    pub esl: bool,
    pub decouple: bool,
    pub shallow_mlp: bool,
    pub interp_mode: InterpMode,
    pub backscatter_mode: BackscatterMode,
    pub pe_freqs: usize,
    pub split_modulus: usize,
    pub realign_interval: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    /// Divide the smoothness sum by the pixel count.
    pub smooth_normalize: bool,
    pub train_gaussians: bool,
    pub train_medium: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            iterations: 20_000,
            sh_degree: MAX_SH_DEGREE,
            sh_increase_interval: 1000,
            densify: true,
            densify_from: 500,
            densify_until: 15_000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            ifi: true,
            afw: true,
            esl: true,
            decouple: true,
            shallow_mlp: false,
            interp_mode: InterpMode::Flow,
            backscatter_mode: BackscatterMode::Blend,
            pe_freqs: DEFAULT_PE_FREQS,
            split_modulus: 8,
            realign_interval: 500,
            checkpoint_interval: 0,
            smooth_normalize: true,
            train_gaussians: true,
            train_medium: true,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn show<T: Display>(v: T) -> String {
    v.to_string()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.split_modulus < 2 {
            return Err(Error::Config("split_modulus must be >= 2".into()));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree must be <= {MAX_SH_DEGREE}")));
        }
        if self.pe_freqs == 0 {
            return Err(Error::Config("pe_freqs must be positive".into()));
        }
        let lr = &self.lr;
        let rates = [
            lr.position,
            lr.position_final,
            lr.sh_dc,
            lr.sh_rest,
            lr.opacity,
            lr.scale,
            lr.rotation,
            lr.backscatter,
            lr.medium,
            lr.gamma,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Set one field from its textual form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        let lr = &mut self.lr;
        match key {
            "lambda_r" => w.lambda_r = parse(key, value)?,
            "lambda_d" => w.lambda_d = parse(key, value)?,
            "lambda_ca" => w.lambda_ca = parse(key, value)?,
            "lambda_s" => w.lambda_s = parse(key, value)?,
            "lambda_b" => w.lambda_b = parse(key, value)?,
            "alpha_afw" => w.alpha_afw = parse(key, value)?,
            "lr_position" => lr.position = parse(key, value)?,
            "lr_position_final" => lr.position_final = parse(key, value)?,
            "lr_sh_dc" => lr.sh_dc = parse(key, value)?,
            "lr_sh_rest" => lr.sh_rest = parse(key, value)?,
            "lr_opacity" => lr.opacity = parse(key, value)?,
            "lr_scale" => lr.scale = parse(key, value)?,
            "lr_rotation" => lr.rotation = parse(key, value)?,
            "lr_backscatter" => lr.backscatter = parse(key, value)?,
            "lr_medium" => lr.medium = parse(key, value)?,
            "lr_gamma" => lr.gamma = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "sh_degree" => self.sh_degree = parse(key, value)?,
            "sh_increase_interval" => self.sh_increase_interval = parse(key, value)?,
            "densify" => self.densify = parse_bool(key, value)?,
            "densify_from" => self.densify_from = parse(key, value)?,
            "densify_until" => self.densify_until = parse(key, value)?,
            "densify_interval" => self.densify_interval = parse(key, value)?,
            "densify_grad_threshold" => self.densify_grad_threshold = parse(key, value)?,
            "prune_opacity" => self.prune_opacity = parse(key, value)?,
            "percent_dense" => self.percent_dense = parse(key, value)?,
            "ifi" => self.ifi = parse_bool(key, value)?,
            "afw" => self.afw = parse_bool(key, value)?,
            "esl" => self.esl = parse_bool(key, value)?,
            "decouple" => self.decouple = parse_bool(key, value)?,
            "shallow_mlp" => self.shallow_mlp = parse_bool(key, value)?,
            "interp_mode" => self.interp_mode = parse(key, value)?,
            "backscatter_mode" => self.backscatter_mode = parse(key, value)?,
            "pe_freqs" => self.pe_freqs = parse(key, value)?,
            "split_modulus" => self.split_modulus = parse(key, value)?,
            "realign_interval" => self.realign_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "smooth_normalize" => self.smooth_normalize = parse_bool(key, value)?,
            "train_gaussians" => self.train_gaussians = parse_bool(key, value)?,
            "train_medium" => self.train_medium = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        let lr = &self.lr;
        vec![
            ("lambda_r", show(w.lambda_r)),
            ("lambda_d", show(w.lambda_d)),
            ("lambda_ca", show(w.lambda_ca)),
            ("lambda_s", show(w.lambda_s)),
            ("lambda_b", show(w.lambda_b)),
            ("alpha_afw", show(w.alpha_afw)),
            ("lr_position", show(lr.position)),
            ("lr_position_final", show(lr.position_final)),
            ("lr_sh_dc", show(lr.sh_dc)),
            ("lr_sh_rest", show(lr.sh_rest)),
            ("lr_opacity", show(lr.opacity)),
            ("lr_scale", show(lr.scale)),
            ("lr_rotation", show(lr.rotation)),
            ("lr_backscatter", show(lr.backscatter)),
            ("lr_medium", show(lr.medium)),
            ("lr_gamma", show(lr.gamma)),
            ("iterations", show(self.iterations)),
            ("sh_degree", show(self.sh_degree)),
            ("sh_increase_interval", show(self.sh_increase_interval)),
            ("densify", show(self.densify)),
            ("densify_from", show(self.densify_from)),
            ("densify_until", show(self.densify_until)),
            ("densify_interval", show(self.densify_interval)),
            ("densify_grad_threshold", show(self.densify_grad_threshold)),
            ("prune_opacity", show(self.prune_opacity)),
            ("percent_dense", show(self.percent_dense)),
            ("ifi", show(self.ifi)),
            ("afw", show(self.afw)),
            ("esl", show(self.esl)),
            ("decouple", show(self.decouple)),
            ("shallow_mlp", show(self.shallow_mlp)),
            ("interp_mode", show(self.interp_mode.as_str())),
            ("backscatter_mode", show(self.backscatter_mode.as_str())),
            ("pe_freqs", show(self.pe_freqs)),
            ("split_modulus", show(self.split_modulus)),
            ("realign_interval", show(self.realign_interval)),
            ("checkpoint_interval", show(self.checkpoint_interval)),
            ("smooth_normalize", show(self.smooth_normalize)),
            ("train_gaussians", show(self.train_gaussians)),
            ("train_medium", show(self.train_medium)),
            ("seed", show(self.seed)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}
