//! Training objective: `β·cls + bce + dice + sem`.

use std::time::Instant;

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::matching::{self, Assignment, Matcher};
use crate::model::ForwardOutput;
use crate::partition::SegmentGroundTruth;
use crate::scene::ClassCatalog;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Classification weight in the loss.
    pub beta: f64,
    /// Classification weight in the matching cost.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda: matching::DEFAULT_LAMBDA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Scalar values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub sem: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.beta * self.cls + self.bce + self.dice + self.sem
    }
}

fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Softmax cross-entropy, averaged over all proposals. Matched proposals
/// target their ground-truth class column, the rest the last (no-object) column.
pub fn cls_loss(class_logits: &Var, assignment: &Assignment, gt_classes: &[usize]) -> Result<Var> {
    let (k, width) = class_logits.dims();
    let mut targets = vec![width - 1; k];
    for &(i, g) in &assignment.pairs {
        let c = *gt_classes
            .get(g)
            .ok_or_else(|| Error::Contract(format!("ground truth {g} has no class")))?;
        if c + 1 >= width || i >= k {
            return Err(Error::Contract(format!("class {c} or proposal {i} out of range")));
        }
        targets[i] = c;
    }
    Ok(class_logits.log_softmax().pick_per_row(&targets)?.mean().neg())
}

#[derive(Clone, Debug)]
pub struct MaskLoss {
    pub bce: Var,
    pub dice: Var,
    /// True when nothing was matched; both terms are then zero.
    pub empty: bool,
}

/// Mean BCE and Laplace-smoothed Dice between matched proposal masks
/// (`M×K` logits) and their ground-truth masks (`M×G`), averaged over pairs.
pub fn mask_losses(mask_logits: &Var, assignment: &Assignment, gt_masks: &Tensor) -> Result<MaskLoss> {
    let tape = mask_logits.tape().clone();
    if assignment.pairs.is_empty() {
        return Ok(MaskLoss {
            bce: zero(&tape),
            dice: zero(&tape),
            empty: true,
        });
    }
    let (m, _) = mask_logits.dims();
    let (gm, g) = gt_masks.dims2()?;
    if gm != m {
        return Err(Error::shape("mask_losses", &mask_logits.shape(), gt_masks.shape()));
    }
    let props: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let n = props.len();
    let mut target = vec![0.0; m * n];
    for (j, &(_, k)) in assignment.pairs.iter().enumerate() {
        if k >= g {
            return Err(Error::Contract(format!("ground truth {k} out of range")));
        }
        for s in 0..m {
            target[s * n + j] = gt_masks.at(s, k);
        }
    }
    let target = Tensor::matrix(m, n, target)?;
    let logits = mask_logits.t().gather_rows(&props)?.t();
    let bce = logits.bce_with_logits(&target)?.mean();
    let probs = logits.sigmoid();
    let t = tape.constant(target.clone());
    let inter = probs.mul(&t)?.sum_axis(0)?;
    let tsum = tape.constant(Tensor::matrix(
        1,
        n,
        (0..n).map(|j| (0..m).map(|s| target.at(s, j)).sum()).collect(),
    )?);
    let denom = probs.sum_axis(0)?.add(&tsum)?.add_scalar(1.0);
    let dice = inter.add_scalar(1.0).div(&denom)?.scale(-2.0).add_scalar(1.0).mean();
    Ok(MaskLoss {
        bce,
        dice,
        empty: false,
    })
}

/// Mean BCE over every (segment, category) cell; categories in catalog order.
pub fn semantic_loss(sem_logits: &Var, gt_category_masks: &Tensor) -> Result<Var> {
    Ok(sem_logits.bce_with_logits(gt_category_masks)?.mean())
}

/// `β·cls + bce + dice + sem`.
pub fn total_loss(cls: &Var, bce: &Var, dice: &Var, sem: &Var, w: &LossWeights) -> Result<Var> {
    cls.scale(w.beta).add(bce)?.add(dice)?.add(sem)
}

/// `M×K` category masks from the projected ground truth.
pub fn semantic_targets(gt: &SegmentGroundTruth) -> Result<Tensor> {
    let m = gt.num_segments();
    let k = gt.semantic_masks.len();
    let mut data = vec![0.0; m * k];
    for (c, mask) in gt.semantic_masks.iter().enumerate() {
        for (s, &b) in mask.iter().enumerate() {
            if b {
                data[s * k + c] = 1.0;
            }
        }
    }
    Tensor::matrix(m, k, data)
}

/// Loss of one scene with its matching diagnostics.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub parts: LossParts,
    pub assignment: Assignment,
    /// Ground truths left without a proposal this step.
    pub unmatched_gt: usize,
    pub matcher_ns: u64,
}

/// Matches instance proposals to ground truth and evaluates the full objective.
pub fn scene_loss(
    out: &ForwardOutput,
    gt: &SegmentGroundTruth,
    catalog: &ClassCatalog,
    matcher: Matcher,
    w: &LossWeights,
) -> Result<SceneLoss> {
    let tape = out.segment_features.tape().clone();
    let mut assignment = Assignment::default();
    let mut matcher_ns = 0;
    let (cls, bce, dice) = match (&out.masks.instance, &out.kernels.class_logits) {
        (Some(mask_logits), Some(class_logits)) => {
            let gt_classes = gt
                .instances
                .iter()
                .map(|g| {
                    catalog
                        .thing_index(g.semantic)
                        .ok_or_else(|| Error::Contract(format!("instance {} has a stuff class", g.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let probs = class_logits.value();
            let (k, width) = probs.dims2()?;
            let mut class_probs = Vec::with_capacity(k * width);
            for r in 0..k {
                let row = probs.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                class_probs.extend(e.iter().map(|v| v / z));
            }
            let class_probs = Tensor::matrix(k, width, class_probs)?;
            let mask_probs = mask_logits.value().map(sigmoid_scalar);
            let gt_masks: Vec<Vec<bool>> = gt.instances.iter().map(|g| g.mask.clone()).collect();
            let seg_gt = gt.segment_gt_index();
            let t0 = Instant::now();
            assignment = match matcher {
                Matcher::HungarianFull => matching::hungarian(&matching::cost_matrix(
                    &class_probs,
                    &mask_probs,
                    &gt_masks,
                    &gt_classes,
                    w.lambda,
                )?)?,
                Matcher::Disentangled | Matcher::Hungarian => {
                    let c = matching::constrained_cost_matrix(
                        &class_probs,
                        &mask_probs,
                        &gt_masks,
                        &gt_classes,
                        &out.kernels.source_segments,
                        &seg_gt,
                        w.lambda,
                    )?;
                    if matcher == Matcher::Disentangled {
                        matching::disentangled_match(&c)
                    } else {
                        matching::hungarian_constrained(&c)?
                    }
                }
            };
            matcher_ns = t0.elapsed().as_nanos() as u64;
            let cls = cls_loss(class_logits, &assignment, &gt_classes)?;
            let ml = match gt.instance_mask_tensor() {
                Some(t) => mask_losses(mask_logits, &assignment, &t)?,
                None => MaskLoss {
                    bce: zero(&tape),
                    dice: zero(&tape),
                    empty: true,
                },
            };
            (cls, ml.bce, ml.dice)
        }
        _ => (zero(&tape), zero(&tape), zero(&tape)),
    };
    let sem = match &out.masks.semantic {
        Some(logits) => semantic_loss(logits, &semantic_targets(gt)?)?,
        None => zero(&tape),
    };
    let parts = LossParts {
        cls: cls.item()?,
        bce: bce.item()?,
        dice: dice.item()?,
        sem: sem.item()?,
    };
    let total = total_loss(&cls, &bce, &dice, &sem, w)?;
    Ok(SceneLoss {
        total,
        parts,
        unmatched_gt: assignment.unmatched_gt.len(),
        assignment,
        matcher_ns,
    })
}
