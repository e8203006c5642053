//! Trains on a single synthetic scene and evaluates on that same scene.
//!
//! `cargo run --release --example overfit -- [steps] [key=value ...]`

use std::time::Instant;

use of3d::config::RunConfig;
use of3d::inference::predict;
use of3d::metrics::evaluate;
use of3d::scene::{generate_synthetic_scene, SyntheticParams};
use of3d::trainer::{Sample, Trainer};

fn main() -> of3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let scene = generate_synthetic_scene(0, &SyntheticParams::default())?;
    let mut cfg = RunConfig::parse(of3d::OVERFIT_CONFIG)?;
    cfg.steps = steps;
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let mut trainer = Trainer::new(vec![scene.clone()], cfg)?;
    let t0 = Instant::now();
    for _ in 0..steps {
        let r = trainer.train_step()?;
        if r.step % 25 == 0 || r.step == 1 {
            println!(
                "step {:4} lr {:.2e} loss {:.4} cls {:.4} bce {:.4} dice {:.4} sem {:.4} unmatched {}",
                r.step, r.lr, r.loss, r.parts.cls, r.parts.bce, r.parts.dice, r.parts.sem, r.unmatched_gt
            );
        }
    }
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    let sample = Sample::new(scene.clone(), &trainer.cfg)?;
    let pred = predict(&trainer.params, &trainer.cfg.model, &sample.prep, &trainer.cfg.inference)?;
    print!("{}", evaluate(&pred, &scene)?.to_text());
    Ok(())
}
