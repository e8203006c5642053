//! Turning kernels into ranked instance masks, semantic labels, a fused
//! panoptic labeling and boxes, plus the text prediction format.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{sigmoid_scalar, Tape};
use crate::decoder::SelectMode;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, PreparedScene};
use crate::params::ParamStore;
use crate::partition::Partition;
use crate::scene::{ClassCatalog, Scene};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceParams {
    pub threshold: f64,
    pub nms_sigma: f64,
    pub top_k: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            nms_sigma: 2.0,
            top_k: 100,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("mask threshold must lie in (0,1)".into()));
        }
        if !(self.nms_sigma > 0.0) || self.top_k == 0 {
            return Err(Error::Config("nms sigma and top_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProposal {
    /// Segment mask.
    pub mask: Vec<bool>,
    /// Semantic class id (always a thing class).
    pub class: usize,
    /// Classification probability.
    pub p: f64,
    /// Mean mask probability over the mask.
    pub q: f64,
    /// Ranking score, `p·q` before NMS.
    pub score: f64,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Proposals from `M×K` mask logits and `K×(T+1)` class logits. Queries whose
/// best class is no-object, or whose thresholded mask is empty, are dropped.
pub fn decode_instances(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    catalog: &ClassCatalog,
    threshold: f64,
) -> Result<Vec<InstanceProposal>> {
    let (m, k) = mask_logits.dims2()?;
    let (k2, width) = class_logits.dims2()?;
    let things = catalog.thing_ids();
    if k2 != k || width != things.len() + 1 {
        return Err(Error::shape("decode_instances", mask_logits.shape(), class_logits.shape()));
    }
    let mut out = Vec::new();
    for i in 0..k {
        let probs = softmax_row(class_logits.row(i));
        let best = argmax(&probs);
        if best == width - 1 {
            continue;
        }
        let col: Vec<f64> = (0..m).map(|s| sigmoid_scalar(mask_logits.at(s, i))).collect();
        let mask: Vec<bool> = col.iter().map(|&v| v > threshold).collect();
        let n = mask.iter().filter(|&&b| b).count();
        if n == 0 {
            continue;
        }
        let q = col.iter().zip(&mask).filter(|p| *p.1).map(|p| p.0).sum::<f64>() / n as f64;
        let p = probs[best];
        out.push(InstanceProposal {
            mask,
            class: things[best],
            p,
            q,
            score: p * q,
        });
    }
    Ok(out)
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Order by descending score; ties by ascending index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Gaussian matrix NMS within each class. Returns the proposals sorted by
/// decayed score, at most `top_k` of them; masks are untouched.
pub fn matrix_nms(proposals: &[InstanceProposal], sigma: f64, top_k: usize) -> Vec<InstanceProposal> {
    let scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    let order = rank_desc(&scores);
    let n = order.len();
    // iou[a][b] for a ranked above b within one class
    let mut iou = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let (pa, pb) = (&proposals[order[a]], &proposals[order[b]]);
            if pa.class == pb.class {
                iou[a][b] = mask_iou(&pa.mask, &pb.mask);
            }
        }
    }
    let max_iou: Vec<f64> = (0..n).map(|b| (0..b).map(|a| iou[a][b]).fold(0.0, f64::max)).collect();
    let out: Vec<InstanceProposal> = (0..n)
        .map(|b| {
            let decay = (0..b)
                .filter(|&a| proposals[order[a]].class == proposals[order[b]].class)
                .map(|a| (-(iou[a][b].powi(2) - max_iou[a].powi(2)) / sigma).exp())
                .fold(1.0, f64::min);
            let mut p = proposals[order[b]].clone();
            p.score *= decay;
            p
        })
        .collect();
    let decayed: Vec<f64> = out.iter().map(|p| p.score).collect();
    rank_desc(&decayed).into_iter().take(top_k).map(|i| out[i].clone()).collect()
}

/// Per-segment argmax over category logits (`M×K_sem`) and the matching masks.
pub fn decode_semantic(sem_logits: &Tensor) -> Result<(Vec<usize>, Vec<Vec<bool>>)> {
    let (m, k) = sem_logits.dims2()?;
    let ids: Vec<usize> = (0..m).map(|s| argmax(sem_logits.row(s))).collect();
    let masks = (0..k).map(|c| ids.iter().map(|&x| x == c).collect()).collect();
    Ok((ids, masks))
}

/// Instance with only what the prediction file keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedInstance {
    pub class: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

impl From<&InstanceProposal> for PredictedInstance {
    fn from(p: &InstanceProposal) -> Self {
        Self {
            class: p.class,
            score: p.score,
            mask: p.mask.clone(),
        }
    }
}

/// Per-segment `(semantic id, instance id)`; −1 marks none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticLabeling {
    pub semantic: Vec<i32>,
    pub instance: Vec<i32>,
}

/// Starts from the semantic labels and overlays instances in ascending score
/// order, so higher-scored instances win contested segments. Thing-class
/// segments left without an instance become void. Instance ids are numbered
/// from 0 in order of the surviving instances' overlay.
pub fn fuse_panoptic(semantic: &[usize], instances: &[PredictedInstance], catalog: &ClassCatalog) -> Result<PanopticLabeling> {
    let m = semantic.len();
    if let Some(bad) = instances.iter().find(|p| p.mask.len() != m) {
        return Err(Error::shape("fuse_panoptic", &[m], &[bad.mask.len()]));
    }
    let mut sem: Vec<i32> = semantic.iter().map(|&c| c as i32).collect();
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut order: Vec<usize> = (0..instances.len()).collect();
    // ascending score; among equal scores the lower index is overlaid last
    order.sort_by(|&a, &b| instances[a].score.total_cmp(&instances[b].score).then(b.cmp(&a)));
    for &i in &order {
        for s in 0..m {
            if instances[i].mask[s] {
                owner[s] = Some(i);
                sem[s] = instances[i].class as i32;
            }
        }
    }
    let mut fresh: Vec<Option<i32>> = vec![None; instances.len()];
    let mut next = 0;
    for &i in &order {
        if owner.contains(&Some(i)) {
            fresh[i] = Some(next);
            next += 1;
        }
    }
    let mut inst = vec![-1; m];
    for s in 0..m {
        match owner[s] {
            Some(i) => inst[s] = fresh[i].expect("owner survives"),
            None if sem[s] >= 0 && catalog.is_thing(sem[s] as usize) => sem[s] = -1,
            None => {}
        }
    }
    Ok(PanopticLabeling {
        semantic: sem,
        instance: inst,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn from_points(points: impl IntoIterator<Item = [f64; 3]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Box3 { min: first, max: first };
        for p in it {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }

    pub fn iou(&self, other: &Box3) -> f64 {
        let inter: f64 = (0..3)
            .map(|a| (self.max[a].min(other.max[a]) - self.min[a].max(other.min[a])).max(0.0))
            .product();
        let union = self.volume() + other.volume() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub class: usize,
    pub score: f64,
    pub bbox: Box3,
}

/// Tight axis-aligned boxes around the member points of each instance.
pub fn boxes_from_instances(instances: &[PredictedInstance], partition: &Partition, scene: &Scene) -> Result<Vec<ScoredBox>> {
    instances
        .iter()
        .map(|p| {
            if p.mask.len() != partition.num_segments() {
                return Err(Error::shape("boxes_from_instances", &[partition.num_segments()], &[p.mask.len()]));
            }
            let pts = (0..p.mask.len())
                .filter(|&s| p.mask[s])
                .flat_map(|s| partition.members(s).iter().map(|&i| scene.xyz(i)));
            let bbox = Box3::from_points(pts).ok_or_else(|| Error::Contract("instance with empty mask".into()))?;
            Ok(ScoredBox {
                class: p.class,
                score: p.score,
                bbox,
            })
        })
        .collect()
}

pub const PRED_HEADER: &str = "OF3D-PRED v1";

/// Contents of a prediction file. Sections absent for a query mode are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Segment of each scene point.
    pub segment_of: Vec<usize>,
    pub num_segments: usize,
    pub semantic: Option<Vec<i32>>,
    pub instances: Option<Vec<PredictedInstance>>,
    pub panoptic: Option<PanopticLabeling>,
}

fn join<T: std::fmt::Display>(v: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, x) in v.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

impl Prediction {
    pub fn partition(&self) -> Result<Partition> {
        Partition::from_segment_ids(crate::partition::PoolingMode::Superpoint, self.segment_of.clone(), self.num_segments)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{PRED_HEADER}").unwrap();
        writeln!(s, "segments {} {}", self.num_segments, self.segment_of.len()).unwrap();
        writeln!(s, "{}", join(&self.segment_of)).unwrap();
        if let Some(sem) = &self.semantic {
            writeln!(s, "semantic").unwrap();
            writeln!(s, "{}", join(sem)).unwrap();
        }
        if let Some(inst) = &self.instances {
            writeln!(s, "instances {}", inst.len()).unwrap();
            for p in inst {
                writeln!(s, "{} {}", p.class, p.score).unwrap();
                writeln!(s, "{}", join(p.mask.iter().map(|&b| u8::from(b)))).unwrap();
            }
        }
        if let Some(pan) = &self.panoptic {
            writeln!(s, "panoptic").unwrap();
            writeln!(
                s,
                "{}",
                join(pan.semantic.iter().zip(&pan.instance).map(|(a, b)| format!("{a},{b}")))
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(0, format!("unexpected end of file, expected {what}")));
        let (ln, header) = next("header")?;
        if header.trim() != PRED_HEADER {
            return Err(Error::parse(ln, format!("expected `{PRED_HEADER}`, found `{}`", header.trim())));
        }
        let (ln, seg) = next("segments line")?;
        let f: Vec<&str> = seg.split_whitespace().collect();
        if f.len() != 3 || f[0] != "segments" {
            return Err(Error::parse(ln, "expected `segments <M> <N>`"));
        }
        let m: usize = f[1].parse().map_err(|_| Error::parse(ln, "bad segment count"))?;
        let n: usize = f[2].parse().map_err(|_| Error::parse(ln, "bad point count"))?;
        let (ln, ids) = next("segment ids")?;
        let segment_of: Vec<usize> = parse_list(ln, ids, n)?;
        Partition::from_segment_ids(crate::partition::PoolingMode::Superpoint, segment_of.clone(), m)
            .map_err(|e| Error::parse(ln, e.to_string()))?;
        let mut pred = Prediction {
            segment_of,
            num_segments: m,
            semantic: None,
            instances: None,
            panoptic: None,
        };
        while let Some((ln, line)) = lines.next() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => continue,
                ["semantic"] if pred.semantic.is_none() => {
                    let (ln, l) = lines.next().ok_or_else(|| Error::parse(ln, "missing semantic ids"))?;
                    pred.semantic = Some(parse_list(ln, l, m)?);
                }
                ["instances", count] if pred.instances.is_none() => {
                    let count: usize = count.parse().map_err(|_| Error::parse(ln, "bad instance count"))?;
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (ln, head) = lines.next().ok_or_else(|| Error::parse(ln, "missing instance"))?;
                        let h: Vec<&str> = head.split_whitespace().collect();
                        if h.len() != 2 {
                            return Err(Error::parse(ln, "expected `class score`"));
                        }
                        let class = h[0].parse().map_err(|_| Error::parse(ln, "bad class"))?;
                        let score: f64 = h[1].parse().map_err(|_| Error::parse(ln, "bad score"))?;
                        let (ln, ml) = lines.next().ok_or_else(|| Error::parse(ln, "missing mask"))?;
                        let bits: Vec<u8> = parse_list(ln, ml, m)?;
                        if bits.iter().any(|&b| b > 1) {
                            return Err(Error::parse(ln, "mask entries must be 0 or 1"));
                        }
                        v.push(PredictedInstance {
                            class,
                            score,
                            mask: bits.into_iter().map(|b| b == 1).collect(),
                        });
                    }
                    pred.instances = Some(v);
                }
                ["panoptic"] if pred.panoptic.is_none() => {
                    let (ln, l) = lines.next().ok_or_else(|| Error::parse(ln, "missing panoptic pairs"))?;
                    let toks: Vec<&str> = l.split_whitespace().collect();
                    if toks.len() != m {
                        return Err(Error::parse(ln, format!("expected {m} pairs, found {}", toks.len())));
                    }
                    let mut pan = PanopticLabeling {
                        semantic: Vec::with_capacity(m),
                        instance: Vec::with_capacity(m),
                    };
                    for t in toks {
                        let (a, b) = t.split_once(',').ok_or_else(|| Error::parse(ln, format!("bad pair `{t}`")))?;
                        pan.semantic.push(a.parse().map_err(|_| Error::parse(ln, format!("bad pair `{t}`")))?);
                        pan.instance.push(b.parse().map_err(|_| Error::parse(ln, format!("bad pair `{t}`")))?);
                    }
                    pred.panoptic = Some(pan);
                }
                _ => return Err(Error::parse(ln, format!("unexpected line `{}`", line.trim()))),
            }
        }
        Ok(pred)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?).map_err(|e| e.with_path(path))
    }

    /// Recomputes the panoptic section from the semantic and instance sections.
    pub fn refuse(&self, catalog: &ClassCatalog) -> Result<Option<PanopticLabeling>> {
        match (&self.semantic, &self.instances) {
            (Some(sem), Some(inst)) => {
                if sem.iter().any(|&c| c < 0) {
                    return Err(Error::Contract("semantic section has void labels".into()));
                }
                let sem: Vec<usize> = sem.iter().map(|&c| c as usize).collect();
                fuse_panoptic(&sem, inst, catalog).map(Some)
            }
            _ => Ok(None),
        }
    }
}

fn parse_list<T: std::str::FromStr>(ln: usize, line: &str, expect: usize) -> Result<Vec<T>> {
    let v = line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(ln, format!("bad value `{t}`"))))
        .collect::<Result<Vec<T>>>()?;
    if v.len() != expect {
        return Err(Error::parse(ln, format!("expected {expect} values, found {}", v.len())));
    }
    Ok(v)
}

/// One inference pass over a prepared scene.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, prep: &PreparedScene, params: &InferenceParams) -> Result<Prediction> {
    let catalog = &prep.scene.catalog;
    cfg.check_catalog(catalog)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = forward(&bound, &tape, &prep.input, &prep.partition, cfg, SelectMode::Infer, 0)?;
    let semantic = match &out.masks.semantic {
        Some(l) => Some(decode_semantic(&l.value())?.0),
        None => None,
    };
    let instances = match (&out.masks.instance, &out.kernels.class_logits) {
        (Some(ml), Some(cl)) => {
            let props = decode_instances(&ml.value(), &cl.value(), catalog, params.threshold)?;
            let kept = matrix_nms(&props, params.nms_sigma, params.top_k);
            Some(kept.iter().map(PredictedInstance::from).collect::<Vec<_>>())
        }
        _ => None,
    };
    let panoptic = match (&semantic, &instances) {
        (Some(s), Some(i)) => Some(fuse_panoptic(s, i, catalog)?),
        _ => None,
    };
    Ok(Prediction {
        segment_of: prep.partition.segment_of().to_vec(),
        num_segments: prep.partition.num_segments(),
        semantic: semantic.map(|s| s.into_iter().map(|c| c as i32).collect()),
        instances,
        panoptic,
    })
}

/// The ground truth of a scene written as a prediction: one segment per
/// distinct (semantic, instance) label pair, every instance scored 1.
pub fn prediction_from_ground_truth(scene: &Scene) -> Result<Prediction> {
    let mut keys: Vec<(i32, i32)> = scene.semantic_id.iter().copied().zip(scene.instance_id.iter().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    let segment_of: Vec<usize> = (0..scene.len())
        .map(|i| keys.binary_search(&(scene.semantic_id[i], scene.instance_id[i])).expect("present"))
        .collect();
    let m = keys.len();
    let mut ids: Vec<i32> = keys.iter().map(|k| k.1).filter(|&i| i >= 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let instances = ids
        .iter()
        .map(|&id| {
            let s = keys.iter().position(|k| k.1 == id).expect("present");
            PredictedInstance {
                class: keys[s].0 as usize,
                score: 1.0,
                mask: keys.iter().map(|k| k.1 == id).collect(),
            }
        })
        .collect();
    let semantic: Vec<i32> = keys.iter().map(|k| k.0).collect();
    let panoptic = PanopticLabeling {
        semantic: semantic.clone(),
        instance: keys.iter().map(|k| ids.binary_search(&k.1).map_or(-1, |j| j as i32)).collect(),
    };
    Ok(Prediction {
        segment_of,
        num_segments: m,
        semantic: Some(semantic),
        instances: Some(instances),
        panoptic: Some(panoptic),
    })
}
