//! Parameter counts, single-image latency and forward-pass memory.
//!
//! Latency is the median wall-clock time of batch-size-1 forwards after a
//! warmup, and is only meaningful relative to other measurements on the same
//! machine. Peak memory comes from [`PeakAlloc`] when the running binary
//! installs it as its global allocator, and from the kernel's resident
//! high-water mark otherwise.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::hint::black_box;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Encoder;
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use crate::trainer::training_active;

pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_ITERS: usize = 100;
pub const MIN_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params_millions: f64,
    pub ms_per_image: f64,
    pub peak_memory_mb: f64,
    pub dims: usize,
    pub hardware_descriptor: String,
    /// `"allocator"` or `"resident_hwm"`.
    pub memory_source: String,
}

impl EfficiencyReport {
    pub fn write_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn count_param_set(params: &ParamSet) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

/// Exact number of scalar parameters.
pub fn count_params<E: Encoder>(encoder: &E) -> usize {
    count_param_set(encoder.params())
}

fn probe_image(image_size: (usize, usize)) -> Image {
    let (h, w) = image_size;
    let data = (0..Image::CHANNELS * h * w)
        .map(|i| (i % 251) as f64 / 250.0)
        .collect();
    Image::from_planar(h, w, data).expect("sized to match")
}

fn ensure_exclusive() -> Result<()> {
    if training_active() {
        return Err(Error::Busy("training is running in this process".into()));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median milliseconds per single-image forward after `warmup` discarded
/// runs.
pub fn measure_latency<E: Encoder>(
    encoder: &E,
    image_size: (usize, usize),
    warmup: usize,
    iters: usize,
) -> Result<f64> {
    if iters < MIN_ITERS {
        return Err(Error::Range(format!("iters must be at least {MIN_ITERS}, got {iters}")));
    }
    ensure_exclusive()?;
    let img = probe_image(image_size);
    for _ in 0..warmup {
        black_box(encoder.forward(black_box(&img)));
    }
    let times = (0..iters)
        .map(|_| {
            let t = Instant::now();
            black_box(encoder.forward(black_box(&img)));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    Ok(median(times))
}

static ALLOC_ACTIVE: AtomicBool = AtomicBool::new(false);
static ALLOC_CURRENT: AtomicUsize = AtomicUsize::new(0);
static ALLOC_PEAK: AtomicUsize = AtomicUsize::new(0);

/// A byte-counting wrapper around the system allocator.
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: ssbver::profiler::PeakAlloc = ssbver::profiler::PeakAlloc;
/// ```
pub struct PeakAlloc;

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            ALLOC_ACTIVE.store(true, Ordering::Relaxed);
            let now = ALLOC_CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            ALLOC_PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        ALLOC_CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

fn resident_hwm_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Peak memory of one forward pass in MB, with the measurement source.
///
/// With [`PeakAlloc`] installed this is the heap high-water mark above the
/// level before the call. Otherwise the resident high-water mark of the
/// whole process is reported (reset first where the kernel allows it),
/// which overstates the forward pass on its own.
pub fn peak_forward_memory<E: Encoder>(encoder: &E, image_size: (usize, usize)) -> Result<(f64, &'static str)> {
    ensure_exclusive()?;
    let img = probe_image(image_size);
    if ALLOC_ACTIVE.load(Ordering::Relaxed) {
        let base = ALLOC_CURRENT.load(Ordering::Relaxed);
        ALLOC_PEAK.store(base, Ordering::Relaxed);
        black_box(encoder.forward_with_tape(black_box(&img)));
        let peak = ALLOC_PEAK.load(Ordering::Relaxed).saturating_sub(base);
        return Ok((peak as f64 / (1024.0 * 1024.0), "allocator"));
    }
    let _ = fs::write("/proc/self/clear_refs", "5");
    black_box(encoder.forward_with_tape(black_box(&img)));
    let kb = resident_hwm_kb().ok_or_else(|| Error::Busy("no memory statistics available".into()))?;
    Ok((kb as f64 / 1024.0, "resident_hwm"))
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("model name"))
                .map(|v| v.trim_start_matches([' ', '\t', ':']).to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {}-{}; f64 single-threaded forward",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

pub fn profile<E: Encoder>(
    encoder: &E,
    image_size: (usize, usize),
    warmup: usize,
    iters: usize,
) -> Result<EfficiencyReport> {
    let ms_per_image = measure_latency(encoder, image_size, warmup, iters)?;
    let (peak_memory_mb, source) = peak_forward_memory(encoder, image_size)?;
    Ok(EfficiencyReport {
        params_millions: count_params(encoder) as f64 / 1e6,
        ms_per_image,
        peak_memory_mb,
        dims: encoder.dim(),
        hardware_descriptor: hardware_descriptor(),
        memory_source: source.into(),
    })
}
