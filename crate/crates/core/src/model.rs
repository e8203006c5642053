//! The full network: point encoder, segment pooling and query decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::{self, DecoderConfig, KernelSet, MaskLogits, SelectMode};
use crate::encoder::{self, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::partition::{self, Partition, PoolingMode, SuperpointParams};
use crate::scene::{ClassCatalog, Scene};

/// How a scene is split into segments.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub mode: PoolingMode,
    pub voxel_size: f64,
    pub superpoint: SuperpointParams,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PoolingMode::Superpoint,
            voxel_size: 0.2,
            superpoint: SuperpointParams::default(),
        }
    }
}

impl PartitionConfig {
    pub fn build(&self, scene: &Scene) -> Result<Partition> {
        match self.mode {
            PoolingMode::Voxel => partition::voxelize(scene, self.voxel_size),
            PoolingMode::Superpoint => partition::build_superpoints(scene, &self.superpoint),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub partition: PartitionConfig,
}

impl ModelConfig {
    /// Defaults sized for `catalog`: one semantic query per class, one class
    /// logit per thing class plus no-object.
    pub fn for_catalog(catalog: &ClassCatalog) -> Self {
        let encoder = EncoderConfig::default();
        let decoder = DecoderConfig::new(encoder.channels, catalog.len(), catalog.thing_ids().len());
        Self {
            encoder,
            decoder,
            partition: PartitionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.channels != self.decoder.channels {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                self.encoder.channels, self.decoder.channels
            )));
        }
        if !(self.partition.voxel_size > 0.0) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the class heads fit `catalog`.
    pub fn check_catalog(&self, catalog: &ClassCatalog) -> Result<()> {
        let things = catalog.thing_ids().len();
        if self.decoder.num_semantic != catalog.len() || self.decoder.num_thing != things {
            return Err(Error::Config(format!(
                "model expects {} classes ({} things), catalog has {} ({things} things)",
                self.decoder.num_semantic,
                self.decoder.num_thing,
                catalog.len()
            )));
        }
        Ok(())
    }
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    encoder::init_encoder(&mut store, &mut rng, &cfg.encoder);
    decoder::init_decoder(&mut store, &mut rng, &cfg.decoder);
    Ok(store)
}

/// A scene with its partition and encoder inputs computed once.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: Scene,
    pub partition: Partition,
    pub input: EncoderInput,
}

impl PreparedScene {
    pub fn new(scene: Scene, cfg: &ModelConfig) -> Result<Self> {
        let partition = cfg.partition.build(&scene)?;
        let input = encoder::prepare_input(&scene, &cfg.encoder)?;
        Ok(Self {
            scene,
            partition,
            input,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `M×C`
    pub segment_features: Var,
    pub kernels: KernelSet,
    pub masks: MaskLogits,
}

pub fn forward(
    p: &BoundParams,
    tape: &Tape,
    input: &EncoderInput,
    partition: &Partition,
    cfg: &ModelConfig,
    mode: SelectMode,
    seed: u64,
) -> Result<ForwardOutput> {
    let points = encoder::encode_prepared(p, tape, input, &cfg.encoder)?;
    let segment_features = partition::pool_var(&points, partition)?;
    let queries = decoder::select_queries(p, &segment_features, &cfg.decoder, mode, seed)?;
    let kernels = decoder::decode(p, &queries, &segment_features, &cfg.decoder)?;
    let masks = decoder::mask_logits(&kernels, &segment_features)?;
    Ok(ForwardOutput {
        segment_features,
        kernels,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::QueryMode;
    use crate::scene::{generate_synthetic_scene, SyntheticParams};

    fn tiny(catalog: &ClassCatalog) -> ModelConfig {
        let mut cfg = ModelConfig::for_catalog(catalog);
        cfg.encoder.channels = 8;
        cfg.encoder.depth = 1;
        cfg.decoder.channels = 8;
        cfg.decoder.layers = 1;
        cfg.decoder.heads = 2;
        cfg
    }

    #[test]
    fn forward_shapes_follow_query_mode() {
        let params = SyntheticParams {
            n_things: 2,
            points_per_surface: 10,
            ..SyntheticParams::default()
        };
        let scene = generate_synthetic_scene(1, &params).unwrap();
        for mode in [QueryMode::Joint, QueryMode::InstanceOnly, QueryMode::SemanticOnly] {
            let mut cfg = tiny(&scene.catalog);
            cfg.decoder.queries = mode;
            let store = init_model(&cfg, 0).unwrap();
            let prep = PreparedScene::new(scene.clone(), &cfg).unwrap();
            let tape = Tape::new();
            let out = forward(&store.bind(&tape), &tape, &prep.input, &prep.partition, &cfg, SelectMode::Infer, 0).unwrap();
            let m = prep.partition.num_segments();
            assert_eq!(out.masks.instance.map(|v| v.dims()), mode.has_instance().then_some((m, m)));
            assert_eq!(out.masks.semantic.map(|v| v.dims()), mode.has_semantic().then_some((m, 7)));
        }
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = ModelConfig::for_catalog(&ClassCatalog::indoor());
        cfg.decoder.channels = 16;
        assert!(init_model(&cfg, 0).is_err());
        let other = ClassCatalog::from_pairs(&[("a", true)]).unwrap();
        assert!(ModelConfig::for_catalog(&ClassCatalog::indoor()).check_catalog(&other).is_err());
    }
}
