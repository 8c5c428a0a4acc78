//! mAP and CMC on a hand-sized gallery, under both evaluation protocols.

use ssbver::datamodel::EmbeddingMatrix;
use ssbver::eval::{evaluate, rank_gallery, Protocol, SetLabels};

fn main() -> ssbver::Result<()> {
    let q = EmbeddingMatrix::from_rows(&[[0.0, 0.0], [5.0, 5.0]])?;
    let g = EmbeddingMatrix::from_rows(&[[0.1, 0.0], [0.5, 0.0], [1.0, 0.0], [5.0, 5.2], [4.0, 5.0], [0.0, 0.2]])?;
    // Query 0 is identity 7 seen by camera 0; its closest gallery image
    // comes from the same camera and is dropped under cross-camera.
    let ql = SetLabels::new(vec![7, 9], vec![0, 1])?;
    let gl = SetLabels::new(vec![7, 3, 7, 9, 3, 3], vec![0, 1, 2, 2, 0, 1])?;
    for protocol in [Protocol::None, Protocol::CrossCamera] {
        let m = evaluate(&q, &ql, &g, &gl, protocol, &[1, 2, 5])?;
        println!("{protocol}: mAP {:.4}, CMC {:?}", m.map, m.cmc);
        let ranked = rank_gallery(&q, &ql, &g, &gl, 0, protocol);
        println!("  query 0 ranking (gallery index, relevant): {:?}", ranked.order.iter().zip(&ranked.relevant).collect::<Vec<_>>());
    }
    Ok(())
}
