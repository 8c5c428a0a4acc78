//! The two self-distillation objectives on hand-made projector outputs,
//! and how teacher temperature and centering shape the targets.

use ssbver::ssl_head::{dino_loss_matrices, pair_count, rmse_loss_matrices, teacher_probs, CenterState};
use ssbver::tensor::Matrix;

fn main() -> ssbver::Result<()> {
    let n_local = 2;
    println!("{} student/teacher pairs per sample with {n_local} local views", pair_count(n_local));

    let teacher = Matrix::from_rows(&[[2.0, 0.0, 0.0], [1.8, 0.2, 0.0]])?;
    let agree = Matrix::from_rows(&[[2.0, 0.0, 0.0], [1.9, 0.1, 0.0], [1.5, 0.3, 0.0], [2.2, 0.0, 0.1]])?;
    let disagree = Matrix::from_rows(&[[0.0, 2.0, 0.0], [0.0, 0.0, 2.0], [0.0, 2.0, 0.0], [0.1, 0.0, 2.0]])?;
    let center = CenterState::new(3, 0.9)?;
    for (name, s) in [("agreeing", &agree), ("disagreeing", &disagree)] {
        let ce = dino_loss_matrices(s, &teacher, n_local, &center, 0.1, 0.04)?;
        let rmse = rmse_loss_matrices(s, &teacher, n_local)?;
        println!("{name} student: cross-entropy {ce:.4}, distance {rmse:.4}");
    }

    let g = [2.0, 1.0, 0.0];
    for tau in [0.0005, 0.04, 1.0, 10.0] {
        let p = teacher_probs(&g, &center, tau);
        println!("tau_t {tau:>7}: {p:.3?}");
    }
    let mut shifted = CenterState::new(3, 0.9)?;
    shifted.center = vec![2.0, 0.0, 0.0];
    println!("centered on the dominant dim: {:.3?}", teacher_probs(&g, &shifted, 0.5));
    Ok(())
}
