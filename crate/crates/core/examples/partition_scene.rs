//! Builds voxel and superpoint partitions of a synthetic scene and reports
//! segment counts and label purity (share of segments holding a single
//! ground-truth label).
//!
//! `cargo run --release --example partition_scene -- [seed]`

use of3d::partition::{build_superpoints, project_ground_truth, voxelize, Partition, SuperpointParams};
use of3d::scene::{generate_synthetic_scene, Scene, SyntheticParams};

fn purity(scene: &Scene, p: &Partition) -> f64 {
    let mut pure = 0;
    for s in 0..p.num_segments() {
        let m = p.members(s);
        let first = (scene.instance_id[m[0]], scene.semantic_id[m[0]]);
        if m.iter().all(|&i| (scene.instance_id[i], scene.semantic_id[i]) == first) {
            pure += 1;
        }
    }
    pure as f64 / p.num_segments() as f64
}

fn main() -> of3d::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = generate_synthetic_scene(seed, &SyntheticParams::default())?;
    println!("points {} instances {}", scene.len(), scene.instance_ids().len());
    let sp = build_superpoints(&scene, &SuperpointParams::default())?;
    let gt = project_ground_truth(&scene, &sp)?;
    println!(
        "superpoints {} purity {:.3} degenerate_normals {} gt_instances {}",
        sp.num_segments(),
        purity(&scene, &sp),
        sp.degenerate_normals,
        gt.instances.len()
    );
    for size in [0.1, 0.2, 0.4] {
        let vx = voxelize(&scene, size)?;
        println!("voxels({size}) {} purity {:.3}", vx.num_segments(), purity(&scene, &vx));
    }
    Ok(())
}
