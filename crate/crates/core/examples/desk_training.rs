//! Train the tiny encoder with and without self-distillation on synthetic
//! data, then compare retrieval on the held-out identities.
//!
//! `cargo run --release --example desk_training [epochs]`; the default 30
//! epochs take a couple of minutes on one core.

use ssbver::augment::resize;
use ssbver::backbone::Encoder;
use ssbver::dataio::{generate_synthetic, DatasetManifest, Split, SyntheticSpec};
use ssbver::datamodel::Image;
use ssbver::eval::{chance_map, estimate_bn_statistics, extract_embeddings, mean_ap, Protocol, SetLabels};
use ssbver::reid_head::BnNeck;
use ssbver::trainer::{run_training, RunOptions, TrainConfig, TrainRecord, TrainState};

fn progress(r: &TrainRecord) {
    if r.iter % 100 == 0 {
        eprintln!("  iter {:>5}  L_c {:.3}  L_t {:.3}  L_s {:.3}", r.iter, r.l_c, r.l_t, r.l_s);
    }
}

fn retrieval_map(manifest: &DatasetManifest, encoder: &impl Encoder, bn: &BnNeck, size: usize) -> ssbver::Result<f64> {
    let set = |split| -> ssbver::Result<(Vec<Image>, SetLabels)> {
        let s = manifest.load_samples(split)?;
        let labels = SetLabels::new(s.iter().map(|x| x.identity()).collect(), s.iter().map(|x| x.camera()).collect())?;
        Ok((s.into_iter().map(|x| x.pixels().clone()).collect(), labels))
    };
    let ((qi, ql), (gi, gl)) = (set(Split::Query)?, set(Split::Gallery)?);
    let qe = extract_embeddings(encoder, bn, &qi, size)?;
    let ge = extract_embeddings(encoder, bn, &gi, size)?;
    mean_ap(&qe, &ql, &ge, &gl, Protocol::None)
}

fn main() -> ssbver::Result<()> {
    let epochs = std::env::args().nth(1).map_or(30, |a| a.parse().expect("epoch count"));
    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec {
        n_identities: 20,
        images_per_identity: 20,
        seed: 1,
        query_per_identity: 2,
        gallery_per_identity: 6,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, dir.path())?;
    let q = manifest.load_samples(Split::Query)?;
    let g = manifest.load_samples(Split::Gallery)?;
    let labels = |s: &[ssbver::datamodel::ImageSample]| {
        SetLabels::new(s.iter().map(|x| x.identity()).collect(), s.iter().map(|x| x.camera()).collect())
    };
    println!("chance mAP {:.4}", chance_map(&labels(&q)?, &labels(&g)?, Protocol::None)?);

    let full = TrainConfig {
        epochs,
        ..TrainConfig::desk_scale()
    };
    let size = full.augment.global_size;
    let init = TrainState::new(&full, manifest.num_train_identities())?;
    let train: Vec<Image> = manifest.load_samples(Split::Train)?.iter().map(|s| resize(s.pixels(), size)).collect();
    let bn = estimate_bn_statistics(&init.pair.teacher.forward_batch(&train))?;
    println!("untrained teacher mAP {:.4}", retrieval_map(&manifest, &init.pair.teacher, &bn, size)?);

    for (name, cfg) in [("self-distillation", full.clone()), ("baseline", full.baseline())] {
        eprintln!("training {name}");
        let out = run_training(
            &cfg,
            &manifest,
            None,
            RunOptions {
                on_step: Some(progress),
                ..RunOptions::default()
            },
        )?;
        let s = &out.state;
        println!("{name}: teacher mAP {:.4}", retrieval_map(&manifest, &s.pair.teacher, &s.head.bn, size)?);
    }
    Ok(())
}
