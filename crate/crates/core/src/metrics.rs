//! mIoU, multi-threshold instance AP, panoptic quality and box AP.
//!
//! AP integrates the all-point precision envelope; it is self-consistent for
//! comparing runs but not a benchmark-server replica.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::{Box3, Prediction};
use crate::partition::unpool_masks;
use crate::scene::{ClassCatalog, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct IouResult {
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class IoU over classes present in the ground truth; −1 GT entries are ignored.
pub fn miou(pred: &[i32], gt: &[i32], num_classes: usize) -> Result<IouResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape("miou", &[pred.len()], &[gt.len()]));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g < 0 {
            continue;
        }
        let g = g as usize;
        if g >= num_classes {
            return Err(Error::Contract(format!("class {g} out of range")));
        }
        present[g] = true;
        union[g] += 1;
        if p == g as i32 {
            inter[g] += 1;
        } else if p >= 0 && (p as usize) < num_classes {
            union[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| present[c].then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok(IouResult { per_class, mean })
}

/// All-point area under the precision envelope of a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// Greedy TP/FP labels: predictions in descending score (ties by index) take
/// the unmatched GT of highest IoU when it reaches `threshold`.
fn greedy_tp(scores: &[f64], num_gt: usize, iou: &dyn Fn(usize, usize) -> f64, threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut used = vec![false; num_gt];
    order
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for g in (0..num_gt).filter(|&g| !used[g]) {
                let v = iou(p, g);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= threshold => {
                    used[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

pub const MAP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// `per_class[c][t]` for each class in `classes` and threshold index `t`.
    pub classes: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub per_class: Vec<Vec<f64>>,
}

impl ApResult {
    /// Mean over classes at threshold index `t`.
    pub fn mean_at(&self, t: usize) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.per_class.iter().map(|v| v[t]).sum::<f64>() / self.classes.len() as f64
    }

    /// Mean over thresholds of the per-threshold class means.
    pub fn mean(&self) -> f64 {
        if self.thresholds.is_empty() {
            return 0.0;
        }
        (0..self.thresholds.len()).map(|t| self.mean_at(t)).sum::<f64>() / self.thresholds.len() as f64
    }
}

/// AP per class and threshold for generic detections. Classes present in the
/// ground truth or the predictions are evaluated; others are skipped.
pub fn ap_by_class(
    pred_class: &[usize],
    pred_score: &[f64],
    gt_class: &[usize],
    iou: &dyn Fn(usize, usize) -> f64,
    thresholds: &[f64],
) -> Result<ApResult> {
    if pred_class.len() != pred_score.len() {
        return Err(Error::shape("ap", &[pred_class.len()], &[pred_score.len()]));
    }
    if thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Contract("AP thresholds must lie in (0,1)".into()));
    }
    let mut classes: Vec<usize> = pred_class.iter().chain(gt_class).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .iter()
        .map(|&c| {
            let preds: Vec<usize> = (0..pred_class.len()).filter(|&i| pred_class[i] == c).collect();
            let gts: Vec<usize> = (0..gt_class.len()).filter(|&g| gt_class[g] == c).collect();
            let scores: Vec<f64> = preds.iter().map(|&i| pred_score[i]).collect();
            let local = |p: usize, g: usize| iou(preds[p], gts[g]);
            thresholds
                .iter()
                .map(|&t| average_precision(&greedy_tp(&scores, gts.len(), &local, t), gts.len()))
                .collect()
        })
        .collect();
    Ok(ApResult {
        classes,
        thresholds: thresholds.to_vec(),
        per_class,
    })
}

/// A scored binary mask over points (or any common index set).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub class: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtMask {
    pub class: usize,
    pub mask: Vec<bool>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        i += usize::from(x && y);
        u += usize::from(x || y);
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn instance_ap(preds: &[ScoredMask], gts: &[GtMask], thresholds: &[f64]) -> Result<ApResult> {
    let n = preds.first().map(|p| p.mask.len()).or(gts.first().map(|g| g.mask.len()));
    if let Some(n) = n {
        if preds.iter().map(|p| p.mask.len()).chain(gts.iter().map(|g| g.mask.len())).any(|l| l != n) {
            return Err(Error::Contract("instance masks differ in length".into()));
        }
    }
    let pc: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let ps: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let gc: Vec<usize> = gts.iter().map(|g| g.class).collect();
    ap_by_class(&pc, &ps, &gc, &|p, g| mask_iou(&preds[p].mask, &gts[g].mask), thresholds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox3 {
    pub class: usize,
    pub score: f64,
    pub bbox: Box3,
}

pub fn box_ap(preds: &[ScoredBox3], gts: &[(usize, Box3)], thresholds: &[f64]) -> Result<ApResult> {
    let pc: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let ps: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let gc: Vec<usize> = gts.iter().map(|g| g.0).collect();
    ap_by_class(&pc, &ps, &gc, &|p, g| preds[p].bbox.iou(&gts[g].1), thresholds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqResult {
    /// PQ of each class present in the ground truth or prediction.
    pub per_class: BTreeMap<usize, f64>,
    pub pq: f64,
    pub pq_th: f64,
    pub pq_st: f64,
}

fn mean_or_zero(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Panoptic quality over per-element `(semantic, instance)` labels. Thing
/// segments are keyed by instance id, stuff segments by class. Pairs with
/// semantic −1 are void; GT-void elements are removed from prediction areas.
pub fn panoptic_quality(pred: &[(i32, i32)], gt: &[(i32, i32)], catalog: &ClassCatalog) -> Result<PqResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape("panoptic_quality", &[pred.len()], &[gt.len()]));
    }
    let key = |(s, i): (i32, i32)| -> Option<(usize, i32)> {
        if s < 0 {
            return None;
        }
        let s = s as usize;
        Some(if catalog.is_thing(s) { (s, i) } else { (s, -1) })
    };
    for &(s, _) in pred.iter().chain(gt) {
        if s >= catalog.len() as i32 {
            return Err(Error::Contract(format!("class {s} out of range")));
        }
    }
    let mut gt_area: BTreeMap<(usize, i32), usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<(usize, i32), usize> = BTreeMap::new();
    let mut inter: BTreeMap<((usize, i32), (usize, i32)), usize> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        let gk = key(g);
        let pk = key(p);
        if let Some(gk) = gk {
            *gt_area.entry(gk).or_default() += 1;
        }
        if let Some(pk) = pk {
            *pred_area.entry(pk).or_default() += 1;
            match gk {
                Some(gk) => *inter.entry((pk, gk)).or_default() += 1,
                // ignore prediction area on void ground truth
                None => *pred_area.get_mut(&pk).expect("inserted") -= 1,
            }
        }
    }
    pred_area.retain(|_, a| *a > 0);
    let mut tp_iou: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut matched_p = BTreeMap::new();
    let mut matched_g = BTreeMap::new();
    for (&(pk, gk), &i) in &inter {
        if pk.0 != gk.0 || !pred_area.contains_key(&pk) {
            continue;
        }
        let u = pred_area[&pk] + gt_area[&gk] - i;
        let iou = i as f64 / u as f64;
        if iou > 0.5 {
            assert!(matched_g.insert(gk, pk).is_none(), "ground truth matched twice");
            assert!(matched_p.insert(pk, gk).is_none(), "prediction matched twice");
            tp_iou.entry(gk.0).or_default().push(iou);
        }
    }
    let mut classes: Vec<usize> = gt_area.keys().chain(pred_area.keys()).map(|k| k.0).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class: BTreeMap<usize, f64> = classes
        .iter()
        .map(|&c| {
            let tps = tp_iou.get(&c).map_or(&[][..], Vec::as_slice);
            let fp = pred_area.keys().filter(|k| k.0 == c && !matched_p.contains_key(*k)).count();
            let fn_ = gt_area.keys().filter(|k| k.0 == c && !matched_g.contains_key(*k)).count();
            let denom = tps.len() as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
            (c, tps.iter().sum::<f64>() / denom)
        })
        .collect();
    Ok(PqResult {
        pq: mean_or_zero(per_class.values().copied()),
        pq_th: mean_or_zero(per_class.iter().filter(|e| catalog.is_thing(*e.0)).map(|e| *e.1)),
        pq_st: mean_or_zero(per_class.iter().filter(|e| !catalog.is_thing(*e.0)).map(|e| *e.1)),
        per_class,
    })
}

/// Every score of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub pq: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub box_map25: f64,
    pub box_map50: f64,
    /// Per class: `(name, iou, ap50, pq)`, `None` where not evaluated.
    pub per_class: Vec<(String, Option<f64>, Option<f64>, Option<f64>)>,
}

/// Keys of the summary block, in output order.
pub const REPORT_KEYS: [&str; 9] = [
    "miou", "map", "map50", "map25", "pq", "pq_th", "pq_st", "box_map25", "box_map50",
];

impl EvalReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.miou,
            self.map,
            self.map50,
            self.map25,
            self.pq,
            self.pq_th,
            self.pq_st,
            self.box_map25,
            self.box_map50,
        ]
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        REPORT_KEYS.iter().position(|k| *k == key).map(|i| self.values()[i])
    }

    /// `key value` lines followed by one `class` line per catalog entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            writeln!(s, "{k} {:.6}", v + 0.0).unwrap();
        }
        let fmt = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{:.6}", x + 0.0));
        for (name, iou, ap, pq) in &self.per_class {
            writeln!(s, "class {name} iou {} ap50 {} pq {}", fmt(iou), fmt(ap), fmt(pq)).unwrap();
        }
        s
    }
}

/// Scores a prediction file against the labels of `scene`, at point level.
/// Missing sections count as empty predictions.
pub fn evaluate(pred: &Prediction, scene: &Scene) -> Result<EvalReport> {
    let n = scene.len();
    if pred.segment_of.len() != n {
        return Err(Error::shape("evaluate", &[n], &[pred.segment_of.len()]));
    }
    let partition = pred.partition()?;
    if partition.num_segments() != pred.num_segments {
        return Err(Error::Contract("prediction segment ids are not contiguous".into()));
    }
    let catalog = &scene.catalog;
    let k = catalog.len();

    let sem_pts = match &pred.semantic {
        Some(s) => unpool_masks(s, &partition)?,
        None => vec![-1; n],
    };
    let iou = miou(&sem_pts, &scene.semantic_id, k)?;

    let instances = pred.instances.clone().unwrap_or_default();
    let pred_masks = instances
        .iter()
        .map(|p| {
            Ok(ScoredMask {
                class: p.class,
                score: p.score,
                mask: unpool_masks(&p.mask, &partition)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_ids = scene.instance_ids();
    let gt_masks: Vec<GtMask> = gt_ids
        .iter()
        .map(|&id| {
            let mask: Vec<bool> = scene.instance_id.iter().map(|&x| x == id).collect();
            let first = mask.iter().position(|&b| b).expect("instance has points");
            GtMask {
                class: scene.semantic_id[first] as usize,
                mask,
            }
        })
        .collect();
    let ap = instance_ap(&pred_masks, &gt_masks, &MAP_THRESHOLDS)?;
    let ap_low = instance_ap(&pred_masks, &gt_masks, &[0.25, 0.5])?;

    let boxes_of = |mask: &[bool]| Box3::from_points((0..n).filter(|&i| mask[i]).map(|i| scene.xyz(i)));
    let pred_boxes: Vec<ScoredBox3> = pred_masks
        .iter()
        .filter_map(|p| {
            boxes_of(&p.mask).map(|bbox| ScoredBox3 {
                class: p.class,
                score: p.score,
                bbox,
            })
        })
        .collect();
    let gt_boxes: Vec<(usize, Box3)> = gt_masks
        .iter()
        .map(|g| (g.class, boxes_of(&g.mask).expect("nonempty")))
        .collect();
    let bap = box_ap(&pred_boxes, &gt_boxes, &[0.25, 0.5])?;

    let pan_pts: Vec<(i32, i32)> = match &pred.panoptic {
        Some(p) => {
            let s = unpool_masks(&p.semantic, &partition)?;
            let i = unpool_masks(&p.instance, &partition)?;
            s.into_iter().zip(i).collect()
        }
        None => vec![(-1, -1); n],
    };
    let gt_pan: Vec<(i32, i32)> = scene.semantic_id.iter().copied().zip(scene.instance_id.iter().copied()).collect();
    let pq = panoptic_quality(&pan_pts, &gt_pan, catalog)?;

    let per_class = (0..k)
        .map(|c| {
            let ap50 = ap.classes.iter().position(|&x| x == c).map(|j| ap.per_class[j][0]);
            (catalog.name(c).to_string(), iou.per_class[c], ap50, pq.per_class.get(&c).copied())
        })
        .collect();
    Ok(EvalReport {
        miou: iou.mean,
        map: ap.mean(),
        map50: ap_low.mean_at(1),
        map25: ap_low.mean_at(0),
        pq: pq.pq,
        pq_th: pq.pq_th,
        pq_st: pq.pq_st,
        box_map25: bap.mean_at(0),
        box_map50: bap.mean_at(1),
        per_class,
    })
}
