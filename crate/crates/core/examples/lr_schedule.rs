//! Print the learning rate and teacher temperature over a default run.

use ssbver::ssl_head::TemperatureSchedule;
use ssbver::trainer::{learning_rate, LrConfig, ScheduleKind};

fn main() {
    let ipe = 100;
    let step = LrConfig::default();
    let cosine = LrConfig {
        kind: ScheduleKind::Cosine,
        ..LrConfig::default()
    };
    let temps = TemperatureSchedule::default();
    println!("epoch  step-lr     cosine-lr   tau_t");
    for epoch in [0, 1, 5, 9, 10, 39, 40, 69, 70, 99, 100, 119] {
        let it = epoch as u64 * ipe;
        println!(
            "{epoch:>5}  {:.3e}   {:.3e}   {:.5}",
            learning_rate(it, ipe, &step, 120),
            learning_rate(it, ipe, &cosine, 120),
            temps.tau_t(epoch)
        );
    }
}
