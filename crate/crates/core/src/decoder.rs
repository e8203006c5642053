//! Query decoder: instance queries initialized from pooled segment features,
//! learned semantic queries, and a stack of pre-norm transformer layers
//! (self-attention, cross-attention over segment features, feed-forward).
//! Each output query becomes a kernel; masks are `S · kernelᵀ`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Which query families the model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Joint,
    InstanceOnly,
    SemanticOnly,
}

impl QueryMode {
    pub fn has_instance(self) -> bool {
        self != QueryMode::SemanticOnly
    }

    pub fn has_semantic(self) -> bool {
        self != QueryMode::InstanceOnly
    }
}

impl std::str::FromStr for QueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "instance" => Ok(Self::InstanceOnly),
            "semantic" => Ok(Self::SemanticOnly),
            _ => Err(Error::Config(format!("unknown query mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::InstanceOnly => "instance",
            Self::SemanticOnly => "semantic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// K_sem: catalog size.
    pub num_semantic: usize,
    /// Thing classes; the class head has one extra no-object column.
    pub num_thing: usize,
    pub queries: QueryMode,
}

impl DecoderConfig {
    pub fn new(channels: usize, num_semantic: usize, num_thing: usize) -> Self {
        Self {
            channels,
            layers: 6,
            heads: 4,
            ffn_mult: 2,
            num_semantic,
            num_thing,
            queries: QueryMode::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.queries.has_instance() && self.num_thing == 0 {
            return Err(Error::Config("instance queries need at least one thing class".into()));
        }
        if self.queries.has_semantic() && self.num_semantic == 0 {
            return Err(Error::Config("semantic queries need a non-empty catalog".into()));
        }
        Ok(())
    }

    /// Width of the class head output.
    pub fn class_width(&self) -> usize {
        self.num_thing + 1
    }
}

pub fn init_decoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &DecoderConfig) {
    let c = cfg.channels;
    if cfg.queries.has_semantic() {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let q = (0..cfg.num_semantic * c).map(|_| normal.sample(rng)).collect();
        store.insert("dec.sem_queries", Tensor::matrix(cfg.num_semantic, c, q).expect("positive dims"));
    }
    nn::init_layer_norm(store, "dec.ln_kv", c);
    for l in 0..cfg.layers {
        let name = format!("dec.l{l}");
        nn::init_layer_norm(store, &format!("{name}.ln1"), c);
        nn::init_attention(store, rng, &format!("{name}.sa"), c);
        nn::init_layer_norm(store, &format!("{name}.ln2"), c);
        nn::init_attention(store, rng, &format!("{name}.ca"), c);
        nn::init_layer_norm(store, &format!("{name}.ln3"), c);
        nn::init_feed_forward(store, rng, &name, c, cfg.ffn_mult * c);
    }
    nn::init_layer_norm(store, "dec.ln_out", c);
    nn::init_linear(store, rng, "dec.kernel", c, c);
    if cfg.queries.has_instance() {
        nn::init_linear(store, rng, "dec.cls", c, cfg.class_width());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Train,
    Infer,
}

/// Segments whose features seed instance queries: a uniform random half
/// (at least one) while training, all of them at inference. Ascending order.
pub fn select_indices(num_segments: usize, mode: SelectMode, seed: u64) -> Vec<usize> {
    match mode {
        SelectMode::Infer => (0..num_segments).collect(),
        SelectMode::Train => {
            let keep = (num_segments / 2).max(1).min(num_segments);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, num_segments, keep).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Decoder inputs. Instance queries are rows of the segment features.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub instance: Option<Var>,
    /// Source segment of each instance query.
    pub source_segments: Vec<usize>,
    pub semantic: Option<Var>,
}

impl QuerySet {
    pub fn num_instance(&self) -> usize {
        if self.instance.is_some() {
            self.source_segments.len()
        } else {
            0
        }
    }
}

pub fn select_queries(
    p: &BoundParams,
    segment_features: &Var,
    cfg: &DecoderConfig,
    mode: SelectMode,
    seed: u64,
) -> Result<QuerySet> {
    let (m, _) = segment_features.dims();
    if m == 0 {
        return Err(Error::Contract("query selection needs at least one segment".into()));
    }
    let (instance, source_segments) = if cfg.queries.has_instance() {
        let idx = select_indices(m, mode, seed);
        (Some(segment_features.gather_rows(&idx)?), idx)
    } else {
        (None, Vec::new())
    };
    let semantic = cfg
        .queries
        .has_semantic()
        .then(|| p.get("dec.sem_queries").clone());
    Ok(QuerySet {
        instance,
        source_segments,
        semantic,
    })
}

/// Decoder outputs.
#[derive(Clone, Debug)]
pub struct KernelSet {
    /// `K_ins×C`
    pub instance: Option<Var>,
    /// `K_sem×C`
    pub semantic: Option<Var>,
    /// `K_ins×(T+1)`, last column is no-object.
    pub class_logits: Option<Var>,
    pub source_segments: Vec<usize>,
}

fn decoder_layer(p: &BoundParams, l: usize, q: &Var, kv: &Var, heads: usize) -> Result<Var> {
    let name = format!("dec.l{l}");
    let h = nn::layer_norm(p, &format!("{name}.ln1"), q)?;
    let q = q.add(&nn::attention(p, &format!("{name}.sa"), &h, &h, heads)?)?;
    let h = nn::layer_norm(p, &format!("{name}.ln2"), &q)?;
    let q = q.add(&nn::attention(p, &format!("{name}.ca"), &h, kv, heads)?)?;
    let h = nn::layer_norm(p, &format!("{name}.ln3"), &q)?;
    q.add(&nn::feed_forward(p, &name, &h)?)
}

pub fn decode(p: &BoundParams, queries: &QuerySet, segment_features: &Var, cfg: &DecoderConfig) -> Result<KernelSet> {
    let (_, c) = segment_features.dims();
    if c != cfg.channels {
        return Err(Error::shape("decode", &[cfg.channels], &segment_features.shape()));
    }
    let parts: Vec<Var> = queries
        .instance
        .iter()
        .chain(queries.semantic.iter())
        .cloned()
        .collect();
    let mut q = concat_rows(&parts)?;
    let kv = nn::layer_norm(p, "dec.ln_kv", segment_features)?;
    for l in 0..cfg.layers {
        q = decoder_layer(p, l, &q, &kv, cfg.heads)?;
    }
    let h = nn::layer_norm(p, "dec.ln_out", &q)?;
    let kernels = nn::linear(p, "dec.kernel", &h)?;
    let k_ins = queries.num_instance();
    let k_total = kernels.dims().0;
    let (instance, class_logits) = if k_ins > 0 {
        let rows: Vec<usize> = (0..k_ins).collect();
        let hi = h.gather_rows(&rows)?;
        (
            Some(kernels.gather_rows(&rows)?),
            Some(nn::linear(p, "dec.cls", &hi)?),
        )
    } else {
        (None, None)
    };
    let semantic = if k_total > k_ins {
        let rows: Vec<usize> = (k_ins..k_total).collect();
        Some(kernels.gather_rows(&rows)?)
    } else {
        None
    };
    Ok(KernelSet {
        instance,
        semantic,
        class_logits,
        source_segments: queries.source_segments.clone(),
    })
}

/// Mask logits `S · kernelᵀ`: instance `M×K_ins` and semantic `M×K_sem`.
#[derive(Clone, Debug)]
pub struct MaskLogits {
    pub instance: Option<Var>,
    pub semantic: Option<Var>,
}

pub fn kernel_logits(segment_features: &Var, kernels: &Var) -> Result<Var> {
    segment_features.matmul(&kernels.t())
}

pub fn mask_logits(kernels: &KernelSet, segment_features: &Var) -> Result<MaskLogits> {
    Ok(MaskLogits {
        instance: kernels
            .instance
            .as_ref()
            .map(|k| kernel_logits(segment_features, k))
            .transpose()?,
        semantic: kernels
            .semantic
            .as_ref()
            .map(|k| kernel_logits(segment_features, k))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::GradCheck;

    fn setup(cfg: &DecoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_decoder(&mut store, &mut ChaCha8Rng::seed_from_u64(3), cfg);
        store
    }

    fn features(m: usize, c: usize) -> Tensor {
        Tensor::matrix(m, c, (0..m * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap()
    }

    #[test]
    fn selection_sizes() {
        assert_eq!(select_indices(10, SelectMode::Train, 1).len(), 5);
        assert_eq!(select_indices(10, SelectMode::Infer, 1).len(), 10);
        assert_eq!(select_indices(1, SelectMode::Train, 1), vec![0]);
        let a = select_indices(50, SelectMode::Train, 7);
        assert_eq!(a, select_indices(50, SelectMode::Train, 7));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn kernel_count_matches_queries() {
        let cfg = DecoderConfig::new(8, 3, 2);
        let store = setup(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = tape.constant(features(6, 8));
        let q = select_queries(&p, &s, &cfg, SelectMode::Infer, 0).unwrap();
        let k = decode(&p, &q, &s, &cfg).unwrap();
        assert_eq!(k.instance.as_ref().unwrap().dims(), (6, 8));
        assert_eq!(k.semantic.as_ref().unwrap().dims(), (3, 8));
        assert_eq!(k.class_logits.as_ref().unwrap().dims(), (6, 3));
        let logits = mask_logits(&k, &s).unwrap();
        assert_eq!(logits.instance.unwrap().dims(), (6, 6));
        assert_eq!(logits.semantic.unwrap().dims(), (6, 3));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = DecoderConfig::new(8, 2, 1);
        let store = setup(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let q = tape.constant(features(3, 8));
        let kv = tape.constant(features(5, 8));
        for w in nn::attention_weights(&p, "dec.l0.ca", &q, &kv, cfg.heads).unwrap() {
            let w = w.value();
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instance_query_permutation_equivariance() {
        let cfg = DecoderConfig::new(8, 2, 2);
        let store = setup(&cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = tape.constant(features(4, 8));
        let run = |order: Vec<usize>| {
            let q = QuerySet {
                instance: Some(s.gather_rows(&order).unwrap()),
                source_segments: order.clone(),
                semantic: Some(p.get("dec.sem_queries").clone()),
            };
            let k = decode(&p, &q, &s, &cfg).unwrap();
            (k.instance.unwrap().value(), k.class_logits.unwrap().value())
        };
        let (ka, ca) = run(vec![0, 1, 2, 3]);
        let perm = vec![2, 0, 3, 1];
        let (kb, cb) = run(perm.clone());
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((kb.at(new, j) - ka.at(old, j)).abs() < 1e-12);
            }
            for j in 0..3 {
                assert!((cb.at(new, j) - ca.at(old, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_logits_identity_and_zero_kernels() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::eye(3));
        let k = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0; 3]]));
        let l = kernel_logits(&s, &k).unwrap().value();
        assert_eq!(l.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut cfg = DecoderConfig::new(8, 2, 2);
        cfg.layers = 2;
        let store = setup(&cfg);
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let point: Vec<Tensor> = std::iter::once(features(3, 8))
            .chain(store.iter().map(|(_, t)| t.clone()))
            .collect();
        let f = |_: &Tape, v: &[Var]| -> Result<Var> {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().cloned()));
            let q = select_queries(&bound, &v[0], &cfg, SelectMode::Infer, 0)?;
            let k = decode(&bound, &q, &v[0], &cfg)?;
            let m = mask_logits(&k, &v[0])?;
            let a = m.instance.unwrap().sigmoid().mean();
            let b = m.semantic.unwrap().mean();
            let c = k.class_logits.unwrap().log_softmax().mean();
            a.add(&b)?.add(&c)
        };
        let report = GradCheck {
            max_components: Some(12),
            ..GradCheck::default()
        }
        .run(f, &point)
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
