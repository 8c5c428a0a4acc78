#[global_allocator]
static ALLOC: ssbver::profiler::PeakAlloc = ssbver::profiler::PeakAlloc;

fn main() {
    std::process::exit(ssbver::cli::main());
}
