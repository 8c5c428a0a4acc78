//! Render a small synthetic vehicle dataset and summarize its splits.
//!
//! Run with `cargo run --release --example synthetic_dataset [out_dir]`.

use std::collections::BTreeSet;

use ssbver::dataio::{generate_synthetic, Split, SyntheticSpec};

fn main() -> ssbver::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("ssbver_synthetic"), Into::into);
    let spec = SyntheticSpec {
        n_identities: 8,
        images_per_identity: 10,
        image_size: (64, 64),
        query_per_identity: 1,
        gallery_per_identity: 3,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, &out)?;
    println!("wrote {} images to {}", manifest.entries().len(), out.display());
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let samples = manifest.load_samples(split)?;
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity()).collect();
        let cams: BTreeSet<usize> = samples.iter().map(|s| s.camera()).collect();
        println!("{split:?}: {} images, {} identities, {} cameras", samples.len(), ids.len(), cams.len());
    }
    Ok(())
}
