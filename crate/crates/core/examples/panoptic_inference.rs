//! Runs the inference head on hand-made logits over a scene's superpoints:
//! instance decoding, matrix NMS that demotes a duplicate, semantic argmax,
//! panoptic fusion, boxes and evaluation against the ground truth.
//!
//! `cargo run --release --example panoptic_inference`

use of3d::inference::{
    boxes_from_instances, decode_instances, decode_semantic, fuse_panoptic, matrix_nms, InferenceParams,
    PredictedInstance, Prediction,
};
use of3d::metrics::evaluate;
use of3d::partition::{build_superpoints, project_ground_truth, SuperpointParams};
use of3d::scene::{generate_synthetic_scene, SyntheticParams};
use of3d::tensor::Tensor;

fn main() -> of3d::Result<()> {
    let scene = generate_synthetic_scene(5, &SyntheticParams::default())?;
    let catalog = &scene.catalog;
    let partition = build_superpoints(&scene, &SuperpointParams::default())?;
    let gt = project_ground_truth(&scene, &partition)?;
    let m = partition.num_segments();
    let things = catalog.thing_ids();

    // one confident query per object plus a weaker copy of the first object
    let mut queries: Vec<(Vec<bool>, usize, f64)> = gt
        .instances
        .iter()
        .map(|g| (g.mask.clone(), g.semantic, 4.0))
        .collect();
    queries.push((gt.instances[0].mask.clone(), gt.instances[0].semantic, 1.0));
    let k = queries.len();
    let width = things.len() + 1;
    let mut mask_logits = vec![0.0; m * k];
    let mut class_logits = vec![0.0; k * width];
    for (q, (mask, class, conf)) in queries.iter().enumerate() {
        for s in 0..m {
            mask_logits[s * k + q] = if mask[s] { 3.0 } else { -3.0 };
        }
        let col = things.iter().position(|t| t == class).expect("thing class");
        class_logits[q * width + col] = *conf;
    }
    let mut sem_logits = vec![-4.0; m * catalog.len()];
    for s in 0..m {
        let c = gt.segment_semantic[s].max(0) as usize;
        sem_logits[s * catalog.len() + c] = 4.0;
    }

    let params = InferenceParams::default();
    let props = decode_instances(
        &Tensor::matrix(m, k, mask_logits)?,
        &Tensor::matrix(k, width, class_logits)?,
        catalog,
        params.threshold,
    )?;
    let kept = matrix_nms(&props, params.nms_sigma, params.top_k);
    for p in &kept {
        println!("{:<9} p {:.3} q {:.3} score {:.3}", catalog.name(p.class), p.p, p.q, p.score);
    }
    let (semantic, _) = decode_semantic(&Tensor::matrix(m, catalog.len(), sem_logits)?)?;
    let instances: Vec<PredictedInstance> = kept.iter().map(PredictedInstance::from).collect();
    let panoptic = fuse_panoptic(&semantic, &instances, catalog)?;
    for b in boxes_from_instances(&instances, &partition, &scene)?.iter().take(3) {
        println!("box {} {:.2?} .. {:.2?}", catalog.name(b.class), b.bbox.min, b.bbox.max);
    }

    let pred = Prediction {
        segment_of: partition.segment_of().to_vec(),
        num_segments: m,
        semantic: Some(semantic.iter().map(|&c| c as i32).collect()),
        instances: Some(instances),
        panoptic: Some(panoptic),
    };
    print!("{}", evaluate(&pred, &scene)?.to_text());
    Ok(())
}
