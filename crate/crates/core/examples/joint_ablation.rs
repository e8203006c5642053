//! Trains the same small model with joint, instance-only and semantic-only
//! queries and reports which outputs each run produces and how it scores.
//!
//! `cargo run --release --example joint_ablation -- [steps]`

use of3d::config::RunConfig;
use of3d::inference::predict;
use of3d::metrics::evaluate;
use of3d::scene::{generate_synthetic_scene, SyntheticParams};
use of3d::trainer::{Sample, Trainer};

fn main() -> of3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let scene = generate_synthetic_scene(0, &SyntheticParams::default())?;
    println!("{:<9} {:>5} {:>5} {:>5} {:>7} {:>7} {:>7}", "queries", "inst", "sem", "pan", "mAP50", "mIoU", "PQ");
    for mode in ["joint", "instance", "semantic"] {
        let mut cfg = RunConfig::parse(of3d::OVERFIT_CONFIG)?;
        cfg.steps = steps;
        cfg.set("queries", mode)?;
        let mut trainer = Trainer::new(vec![scene.clone()], cfg)?;
        for _ in 0..steps {
            trainer.train_step()?;
        }
        let sample = Sample::new(scene.clone(), &trainer.cfg)?;
        let pred = predict(&trainer.params, &trainer.cfg.model, &sample.prep, &trainer.cfg.inference)?;
        let r = evaluate(&pred, &scene)?;
        let yes = |b: bool| if b { "yes" } else { "-" };
        println!(
            "{mode:<9} {:>5} {:>5} {:>5} {:>7.3} {:>7.3} {:>7.3}",
            yes(pred.instances.is_some()),
            yes(pred.semantic.is_some()),
            yes(pred.panoptic.is_some()),
            r.map50,
            r.miou,
            r.pq
        );
    }
    Ok(())
}
