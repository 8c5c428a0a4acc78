//! Batch-hard triplet and label-smoothed cross-entropy on a toy P x K batch.

use ssbver::reid_head::{ce_loss_with_grad, smooth_targets, triplet_loss_with_grad};
use ssbver::tensor::Matrix;

fn main() -> ssbver::Result<()> {
    // Two identities, two images each, in a 2-d embedding space.
    let labels = [0, 0, 1, 1];
    let close = Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [2.0, 0.0], [2.1, 0.0]])?;
    let mixed = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.1, 0.0], [2.1, 0.0]])?;
    for (name, x) in [("separated", &close), ("interleaved", &mixed)] {
        let t = triplet_loss_with_grad(x, &labels)?;
        println!("triplet, {name}: {:.4}", t.loss);
    }

    println!("smoothed target for class 1 of 4: {:?}", smooth_targets(1, 4, 0.2)?);
    let logits = Matrix::from_rows(&[[4.0, 0.0, 0.0, 0.0], [0.0, 0.0, 4.0, 0.0]])?;
    for eps in [0.0, 0.2] {
        let ce = ce_loss_with_grad(&logits, &[0, 2], eps)?;
        println!("cross-entropy with epsilon {eps}: {:.4}", ce.loss);
    }
    Ok(())
}
