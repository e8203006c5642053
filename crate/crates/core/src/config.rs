//! `key = value` run configuration. Every default of the pipeline has a key;
//! unknown keys are rejected. Class counts are taken from the data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::QueryMode;
use crate::error::{Error, Result};
use crate::inference::InferenceParams;
use crate::losses::LossWeights;
use crate::matching::Matcher;
use crate::model::ModelConfig;
use crate::partition::PoolingMode;
use crate::scene::{AugmentFlags, ClassCatalog};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub weights: LossWeights,
    pub matcher: Matcher,
    pub augment: AugmentFlags,
    /// Write a numbered checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad: f64,
    /// Record matcher wall-clock time in the log (makes logs non-reproducible).
    pub log_timings: bool,
    pub model: ModelConfig,
    pub inference: InferenceParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.05,
            power: 0.9,
            weights: LossWeights::default(),
            matcher: Matcher::Disentangled,
            augment: AugmentFlags::all(),
            checkpoint_every: 0,
            clip_grad: 0.0,
            log_timings: false,
            model: ModelConfig::for_catalog(&ClassCatalog::indoor()),
            inference: InferenceParams::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

/// Keys accepted by [`RunConfig::set`], in the order they are written.
pub const CONFIG_KEYS: [&str; 33] = [
    "seed",
    "steps",
    "batch_size",
    "lr",
    "weight_decay",
    "power",
    "beta",
    "lambda",
    "matcher",
    "queries",
    "augment_flip",
    "augment_rotate",
    "augment_scale",
    "checkpoint_every",
    "clip_grad",
    "log_timings",
    "channels",
    "encoder_depth",
    "encoder_radius",
    "decoder_layers",
    "heads",
    "ffn_mult",
    "pooling",
    "voxel_size",
    "sp_neighbors",
    "sp_angle_deg",
    "sp_color_bound",
    "sp_min_size",
    "mask_threshold",
    "nms_sigma",
    "top_k",
    "num_semantic",
    "num_thing",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "power" => self.power = parse_value(key, v)?,
            "beta" => self.weights.beta = parse_value(key, v)?,
            "lambda" => self.weights.lambda = parse_value(key, v)?,
            "matcher" => self.matcher = v.parse()?,
            "queries" => m.decoder.queries = v.parse::<QueryMode>()?,
            "augment_flip" => self.augment.flip = parse_bool(key, v)?,
            "augment_rotate" => self.augment.z_rotate = parse_bool(key, v)?,
            "augment_scale" => self.augment.scale = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "clip_grad" => self.clip_grad = parse_value(key, v)?,
            "log_timings" => self.log_timings = parse_bool(key, v)?,
            "channels" => {
                m.encoder.channels = parse_value(key, v)?;
                m.decoder.channels = m.encoder.channels;
            }
            "encoder_depth" => m.encoder.depth = parse_value(key, v)?,
            "encoder_radius" => m.encoder.radius = parse_value(key, v)?,
            "decoder_layers" => m.decoder.layers = parse_value(key, v)?,
            "heads" => m.decoder.heads = parse_value(key, v)?,
            "ffn_mult" => m.decoder.ffn_mult = parse_value(key, v)?,
            "pooling" => m.partition.mode = v.parse::<PoolingMode>()?,
            "voxel_size" => m.partition.voxel_size = parse_value(key, v)?,
            "sp_neighbors" => m.partition.superpoint.k_neighbors = parse_value(key, v)?,
            "sp_angle_deg" => m.partition.superpoint.angle_threshold_deg = parse_value(key, v)?,
            "sp_color_bound" => m.partition.superpoint.color_bound = parse_value(key, v)?,
            "sp_min_size" => m.partition.superpoint.min_segment_size = parse_value(key, v)?,
            "mask_threshold" => self.inference.threshold = parse_value(key, v)?,
            "nms_sigma" => self.inference.nms_sigma = parse_value(key, v)?,
            "top_k" => self.inference.top_k = parse_value(key, v)?,
            "num_semantic" => m.decoder.num_semantic = parse_value(key, v)?,
            "num_thing" => m.decoder.num_thing = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let sp = &m.partition.superpoint;
        Some(match key {
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "power" => self.power.to_string(),
            "beta" => self.weights.beta.to_string(),
            "lambda" => self.weights.lambda.to_string(),
            "matcher" => self.matcher.name().to_string(),
            "queries" => m.decoder.queries.to_string(),
            "augment_flip" => self.augment.flip.to_string(),
            "augment_rotate" => self.augment.z_rotate.to_string(),
            "augment_scale" => self.augment.scale.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "clip_grad" => self.clip_grad.to_string(),
            "log_timings" => self.log_timings.to_string(),
            "channels" => m.encoder.channels.to_string(),
            "encoder_depth" => m.encoder.depth.to_string(),
            "encoder_radius" => m.encoder.radius.to_string(),
            "decoder_layers" => m.decoder.layers.to_string(),
            "heads" => m.decoder.heads.to_string(),
            "ffn_mult" => m.decoder.ffn_mult.to_string(),
            "pooling" => m.partition.mode.to_string(),
            "voxel_size" => m.partition.voxel_size.to_string(),
            "sp_neighbors" => sp.k_neighbors.to_string(),
            "sp_angle_deg" => sp.angle_threshold_deg.to_string(),
            "sp_color_bound" => sp.color_bound.to_string(),
            "sp_min_size" => sp.min_segment_size.to_string(),
            "mask_threshold" => self.inference.threshold.to_string(),
            "nms_sigma" => self.inference.nms_sigma.to_string(),
            "top_k" => self.inference.top_k.to_string(),
            "num_semantic" => m.decoder.num_semantic.to_string(),
            "num_thing" => m.decoder.num_thing.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("known key")).unwrap();
        }
        s
    }

    /// Sizes the class heads for `catalog`.
    pub fn resolve_classes(&mut self, catalog: &ClassCatalog) {
        self.model.decoder.num_semantic = catalog.len();
        self.model.decoder.num_thing = catalog.thing_ids().len();
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(Error::Config("power must lie in (0,1]".into()));
        }
        if !(self.clip_grad >= 0.0) {
            return Err(Error::Config("clip_grad must be nonnegative".into()));
        }
        self.weights.validate()?;
        self.inference.validate()?;
        self.model.validate()
    }
}
