//! Compares tape gradients with central finite differences, first for a
//! small network and then for the full training loss of a tiny model.
//!
//! `cargo run --release --example gradient_check`

use of3d::config::RunConfig;
use of3d::decoder::SelectMode;
use of3d::gradcheck::{check_gradients, GradCheck};
use of3d::losses::scene_loss;
use of3d::model::{forward, init_model};
use of3d::params::BoundParams;
use of3d::scene::{generate_synthetic_scene, SyntheticParams};
use of3d::tensor::Tensor;
use of3d::trainer::Sample;

fn main() -> of3d::Result<()> {
    let x = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.8, 0.1, -0.5, 2.0])?;
    let w1 = Tensor::matrix(2, 4, vec![0.5, -0.3, 0.9, 0.2, -0.7, 0.4, 0.1, -1.1])?;
    let w2 = Tensor::matrix(4, 1, vec![1.0, -0.5, 0.25, 0.75])?;
    let mlp = check_gradients(
        |_, v| Ok(v[0].matmul(&v[1])?.gelu().matmul(&v[2])?.sigmoid().sum()),
        &[x, w1, w2],
    )?;
    println!("two-layer network: max relative error {mlp:.2e}");

    let scene = generate_synthetic_scene(
        3,
        &SyntheticParams {
            n_things: 2,
            points_per_surface: 10,
            ..SyntheticParams::default()
        },
    )?;
    let mut cfg = RunConfig::parse("channels = 8\nencoder_depth = 1\ndecoder_layers = 1\nheads = 2")?;
    cfg.resolve_classes(&scene.catalog);
    let store = init_model(&cfg.model, 0)?;
    let sample = Sample::new(scene, &cfg)?;
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let point: Vec<_> = store.iter().map(|(_, t)| t.clone()).collect();
    let check = GradCheck {
        max_components: Some(3),
        ..GradCheck::default()
    };
    let report = check.run(
        |tape, vars| {
            let p = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().cloned()));
            let prep = &sample.prep;
            let out = forward(&p, tape, &prep.input, &prep.partition, &cfg.model, SelectMode::Train, 7)?;
            Ok(scene_loss(&out, &sample.gt, &prep.scene.catalog, cfg.matcher, &cfg.weights)?.total)
        },
        &point,
    )?;
    println!(
        "training loss: {} components over {} tensors, max relative error {:.2e} (at {})",
        report.checked,
        names.len(),
        report.max_rel_error,
        names[report.input]
    );
    Ok(())
}
