//! Input-gradient saliency of the similarity between two images of the same
//! synthetic vehicle, written as overlays and raw maps.

use ssbver::augment::resize;
use ssbver::backbone::{TinyEncoder, TinyEncoderConfig};
use ssbver::dataio::{generate_synthetic, write_png, Split, SyntheticSpec};
use ssbver::eval::{heat_overlay, saliency_pair, write_npy};
use ssbver::reid_head::BnNeck;

fn main() -> ssbver::Result<()> {
    let dir = std::env::temp_dir().join("ssbver_saliency");
    let spec = SyntheticSpec {
        n_identities: 2,
        images_per_identity: 4,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, dir.join("data"))?;
    let samples = manifest.load_samples(Split::Train)?;
    let (a, b) = (&samples[0], &samples[1]);
    assert_eq!(a.identity(), b.identity());

    let encoder = TinyEncoder::new(TinyEncoderConfig::default())?;
    let bn = BnNeck::new(64);
    let (q, g) = (resize(a.pixels(), 128), resize(b.pixels(), 128));
    let res = saliency_pair(&encoder, &bn, &q, &g)?;
    println!("similarity {:.4}", res.score);
    for (name, img, map) in [("query", &q, &res.query_map), ("gallery", &g, &res.gallery_map)] {
        write_png(dir.join(format!("{name}_saliency.png")), &heat_overlay(img, map, 0.6)?)?;
        write_npy(dir.join(format!("{name}_saliency.npy")), &[map.rows(), map.cols()], map.data())?;
        let peak = map.data().iter().copied().fold(0.0, f64::max);
        println!("{name}: {}x{} map, peak {peak:.3}", map.rows(), map.cols());
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
