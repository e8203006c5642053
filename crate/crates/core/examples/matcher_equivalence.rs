//! Builds the cost matrix of a model's proposals against a scene's ground
//! truth, restricts it to each proposal's own object and shows that column
//! minima give the same assignment as the Hungarian algorithm.
//!
//! `cargo run --release --example matcher_equivalence`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use of3d::matching::{
    constrain, cost_matrix, disentangled_match, hungarian, hungarian_constrained, random_constrained, DEFAULT_LAMBDA,
};
use of3d::tensor::Tensor;

fn main() -> of3d::Result<()> {
    // three proposals over three segments; segments 0 and 1 belong to object 0,
    // segment 2 to object 1
    let class_probs = Tensor::from_rows(&[vec![0.7, 0.1, 0.2], vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1]]);
    let mask_probs = Tensor::from_rows(&[vec![0.9, 0.6, 0.1], vec![0.8, 0.9, 0.2], vec![0.1, 0.2, 0.9]]);
    let gt_masks = vec![vec![true, true, false], vec![false, false, true]];
    let c = cost_matrix(&class_probs, &mask_probs, &gt_masks, &[0, 1], DEFAULT_LAMBDA)?;
    for i in 0..c.rows() {
        println!("C[{i}] = {:.4} {:.4}", c.get(i, 0), c.get(i, 1));
    }
    let full = hungarian(&c)?;
    println!("hungarian on C:  {:?}", full.pairs);
    // proposal i was selected from segment i
    let constrained = constrain(&c, &[0, 1, 2], &[Some(0), Some(0), Some(1)])?;
    let d = disentangled_match(&constrained);
    let h = hungarian_constrained(&constrained)?;
    println!("disentangled:    {:?}", d.pairs);
    println!("hungarian on C^: {:?}", h.pairs);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agree = 0;
    for _ in 0..200 {
        let c = random_constrained(&mut rng, 48, 12, 0.3);
        let cost = |i: usize, k: usize| c.get(i, k);
        if disentangled_match(&c).total_cost(cost) == hungarian_constrained(&c)?.total_cost(cost) {
            agree += 1;
        }
    }
    println!("random 48x12 constrained matrices with equal optimum: {agree}/200");
    Ok(())
}
