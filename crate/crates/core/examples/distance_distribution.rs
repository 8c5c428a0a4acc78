//! Positive and negative distance statistics of normalized embeddings,
//! before and after pulling same-identity points together.

use ssbver::datamodel::EmbeddingMatrix;
use ssbver::eval::distance_report;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> ssbver::Result<()> {
    let mut rng = ssbver::seeding::substream(3, &[]);
    let ids: Vec<usize> = (0..60).map(|i| i / 6).collect();
    let prototypes: Vec<Vec<f64>> = (0..10).map(|_| (0..16).map(|_| rng.sample(StandardNormal)).collect()).collect();
    for spread in [4.0, 1.0, 0.25] {
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| prototypes[id].iter().map(|p| p + spread * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let emb = EmbeddingMatrix::from_rows(&rows)?.l2_normalized();
        let r = distance_report(&emb, &ids)?;
        println!(
            "noise {spread:>4}: mu_pos {:.3}  mu_neg {:.3}  ({} positive, {} negative pairs)",
            r.mu_pos,
            r.mu_neg,
            r.positive.len(),
            r.negative.len()
        );
    }
    Ok(())
}
