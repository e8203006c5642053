//! Point encoder: a per-point linear lift followed by blocks of radius-neighborhood
//! averaging, a residual feed-forward and layer norm. Maps `N×6` points to `N×C`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Groups, Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{BoundParams, ParamStore};
use crate::scene::Scene;
use crate::spatial::Grid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub depth: usize,
    /// Neighborhood radius in meters.
    pub radius: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            depth: 3,
            radius: 0.3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::Config(format!("encoder width {} < 8", self.channels)));
        }
        if self.depth < 1 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("encoder radius must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) {
    let c = cfg.channels;
    nn::init_linear(store, rng, "enc.lift", 6, c);
    for b in 0..cfg.depth {
        nn::init_feed_forward(store, rng, &format!("enc.blk{b}"), c, 2 * c);
        nn::init_layer_norm(store, &format!("enc.blk{b}.ln"), c);
    }
}

/// Normalized point inputs and the radius neighborhoods of one scene.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub features: Tensor,
    pub neighbors: Arc<Groups>,
}

/// Coordinates are centered on the bounding box and scaled by its largest
/// half-extent; colors are mapped from `[0,1]` to `[-1,1]`.
pub fn prepare_input(scene: &Scene, cfg: &EncoderConfig) -> Result<EncoderInput> {
    let n = scene.len();
    let (lo, hi) = scene.bounds();
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let half = (0..3).map(|a| (hi[a] - lo[a]) / 2.0).fold(0.0, f64::max);
    let inv = if half > 0.0 { 1.0 / half } else { 0.0 };
    let mut data = Vec::with_capacity(n * 6);
    for p in &scene.points {
        for a in 0..3 {
            data.push((p[a] - center[a]) * inv);
        }
        for a in 3..6 {
            data.push(2.0 * p[a] - 1.0);
        }
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| scene.xyz(i)).collect();
    let grid = Grid::new(&pts, cfg.radius);
    let members = (0..n).map(|i| grid.within(i, cfg.radius)).collect();
    Ok(EncoderInput {
        features: Tensor::matrix(n, 6, data)?,
        neighbors: Arc::new(Groups::new(members, n)?),
    })
}

pub fn encode_prepared(p: &BoundParams, tape: &Tape, input: &EncoderInput, cfg: &EncoderConfig) -> Result<Var> {
    let x = tape.constant(input.features.clone());
    let mut h = nn::linear(p, "enc.lift", &x)?;
    for b in 0..cfg.depth {
        let name = format!("enc.blk{b}");
        let agg = h.group_mean(input.neighbors.clone())?;
        let u = nn::feed_forward(p, &name, &agg)?;
        h = nn::layer_norm(p, &format!("{name}.ln"), &h.add(&u)?)?;
    }
    Ok(h)
}

/// Point-wise features `N×C` for a scene.
pub fn encode(scene: &Scene, cfg: &EncoderConfig, p: &BoundParams, tape: &Tape) -> Result<Var> {
    let input = prepare_input(scene, cfg)?;
    encode_prepared(p, tape, &input, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SyntheticParams};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn small() -> (Scene, EncoderConfig, ParamStore) {
        let params = SyntheticParams {
            n_things: 2,
            points_per_surface: 6,
            ..SyntheticParams::default()
        };
        let scene = generate_synthetic_scene(4, &params).unwrap();
        let cfg = EncoderConfig {
            channels: 8,
            depth: 2,
            radius: 0.8,
        };
        let mut store = ParamStore::new();
        init_encoder(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        (scene, cfg, store)
    }

    #[test]
    fn output_shape_is_points_by_channels() {
        let (scene, cfg, store) = small();
        let tape = Tape::new();
        let out = encode(&scene, &cfg, &store.bind(&tape), &tape).unwrap();
        assert_eq!(out.dims(), (scene.len(), 8));
        assert!(out.value().is_finite());
    }

    #[test]
    fn permuting_points_permutes_features() {
        let (scene, cfg, store) = small();
        let mut perm: Vec<usize> = (0..scene.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let mut shuffled = scene.clone();
        shuffled.points = perm.iter().map(|&i| scene.points[i]).collect();
        shuffled.instance_id = perm.iter().map(|&i| scene.instance_id[i]).collect();
        shuffled.semantic_id = perm.iter().map(|&i| scene.semantic_id[i]).collect();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a = encode(&scene, &cfg, &bound, &tape).unwrap().value();
        let b = encode(&shuffled, &cfg, &bound, &tape).unwrap().value();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.at(new_row, c) - a.at(old_row, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { channels: 4, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { depth: 0, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
