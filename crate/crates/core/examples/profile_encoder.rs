//! Parameter count, latency and forward memory of encoders of growing
//! depth.

use ssbver::backbone::{TinyEncoder, TinyEncoderConfig};
use ssbver::profiler::{profile, PeakAlloc};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn main() -> ssbver::Result<()> {
    // Three blocks per stage would exceed the tiny-encoder parameter cap.
    for blocks in 1..=2 {
        let enc = TinyEncoder::new(TinyEncoderConfig {
            blocks_per_stage: blocks,
            ..TinyEncoderConfig::default()
        })?;
        let r = profile(&enc, (128, 128), 10, 50)?;
        println!(
            "{blocks} block(s)/stage: {:.4} M params, {:.2} ms/image, {:.2} MB peak ({})",
            r.params_millions, r.ms_per_image, r.peak_memory_mb, r.memory_source
        );
    }
    println!("{}", ssbver::profiler::hardware_descriptor());
    Ok(())
}
