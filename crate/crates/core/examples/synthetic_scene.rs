//! Generates a synthetic room, writes it to disk, reads it back and applies
//! one random augmentation.
//!
//! `cargo run --release --example synthetic_scene -- [seed] [out.of3d]`

use std::path::PathBuf;

use of3d::scene::{augment, generate_synthetic_scene, load_scene, save_scene, AugmentFlags, SyntheticParams};

fn main() -> of3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("of3d_scene_{seed}.of3d")));

    let scene = generate_synthetic_scene(seed, &SyntheticParams::default())?;
    println!("points {}", scene.len());
    for (c, info) in scene.catalog.classes().iter().enumerate() {
        let n = scene.semantic_id.iter().filter(|&&s| s == c as i32).count();
        let kind = if info.is_thing { "thing" } else { "stuff" };
        println!("  {:<9} {kind} {n} points", info.name);
    }
    for id in scene.instance_ids() {
        let n = scene.instance_id.iter().filter(|&&i| i == id).count();
        println!("  instance {id}: {n} points");
    }

    save_scene(&scene, &out)?;
    let back = load_scene(&out)?;
    println!("wrote {} ({} bytes), reload equal: {}", out.display(), std::fs::metadata(&out)?.len(), back == scene);

    let aug = augment(&scene, seed + 1, AugmentFlags::all());
    let (lo, hi) = aug.bounds();
    println!("augmented bounds {lo:.2?} .. {hi:.2?}");
    Ok(())
}
