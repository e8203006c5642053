//! Generates a small dataset, trains with augmentation, resumes from a
//! periodic checkpoint and evaluates on a held-out scene.
//!
//! `cargo run --release --example train_dataset -- [steps]`

use of3d::config::RunConfig;
use of3d::inference::predict;
use of3d::metrics::evaluate;
use of3d::model::PreparedScene;
use of3d::params::ParamStore;
use of3d::scene::{generate_synthetic_scene, save_scene, SyntheticParams};
use of3d::trainer::{fit, load_dataset, split_checkpoint, summarize};

fn main() -> of3d::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let root = std::env::temp_dir().join("of3d_train_dataset");
    let data = root.join("data");
    std::fs::create_dir_all(&data)?;
    let params = SyntheticParams::default();
    for i in 0..4 {
        save_scene(&generate_synthetic_scene(i, &params)?, &data.join(format!("scene_{i}.of3d")))?;
    }
    let held_out = generate_synthetic_scene(100, &params)?;

    let mut cfg = RunConfig::parse("batch_size = 2\nlr = 0.001\ndecoder_layers = 2")?;
    cfg.steps = steps;
    cfg.checkpoint_every = steps / 2;
    let run = root.join("run");
    let summary = fit(load_dataset(&data)?, cfg.clone(), &run, None)?;
    print!("{}", summarize(&summary.records));

    let mid = run.join(format!("checkpoint_{:06}.ckpt", steps / 2));
    let resumed = root.join("resumed");
    let again = fit(load_dataset(&data)?, cfg, &resumed, Some(&mid))?;
    let same = std::fs::read(&summary.checkpoint)? == std::fs::read(&again.checkpoint)?;
    println!("resumed from step {} reproduces the final checkpoint: {same}", steps / 2);

    let cfg = RunConfig::load(&run.join("config.txt"))?;
    let (weights, _) = split_checkpoint(&ParamStore::load(&summary.checkpoint)?)?;
    let prep = PreparedScene::new(held_out.clone(), &cfg.model)?;
    let pred = predict(&weights, &cfg.model, &prep, &cfg.inference)?;
    print!("{}", evaluate(&pred, &held_out)?.to_text());
    Ok(())
}
