//! Cut the two global and several local views used for self-distillation
//! and save them as PNGs next to the source image.

use std::sync::Arc;

use ssbver::augment::{make_view_bundle, AugmentConfig};
use ssbver::dataio::{generate_synthetic, write_png, Split, SyntheticSpec};
use ssbver::seeding::{domain, substream};

fn main() -> ssbver::Result<()> {
    let dir = std::env::temp_dir().join("ssbver_views");
    let spec = SyntheticSpec {
        n_identities: 2,
        images_per_identity: 2,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, dir.join("data"))?;
    let sample = Arc::new(manifest.load_samples(Split::Train)?.remove(0));

    let cfg = AugmentConfig::default();
    let mut rng = substream(0, &[domain::VIEWS, 0]);
    let bundle = make_view_bundle(Arc::clone(&sample), &cfg, &mut rng)?;
    write_png(dir.join("source.png"), sample.pixels())?;
    for (i, v) in bundle.globals.iter().enumerate() {
        write_png(dir.join(format!("global_{i}.png")), v)?;
    }
    for (i, v) in bundle.locals.iter().enumerate() {
        write_png(dir.join(format!("local_{i}.png")), v)?;
    }
    println!(
        "{} global views at {}px and {} local views at {}px in {}",
        bundle.globals.len(),
        cfg.global_size,
        bundle.locals.len(),
        cfg.local_size,
        dir.display()
    );
    Ok(())
}
