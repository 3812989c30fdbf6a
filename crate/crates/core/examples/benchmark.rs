//! Runs the three training modes on the synthetic benchmark and prints the
//! clean-test MAE of each.
//!
//!     cargo run --release -p spdrf-core --example benchmark -- [seeds]

use spdrf_core::data::{synth_generate, SyntheticSpec};
use spdrf_core::selfpaced::PaceSchedule;
use spdrf_core::trainer::{train, Mode, TrainConfig};

fn main() -> spdrf_core::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            seed,
            ..Default::default()
        };
        let (train_set, test_set) = synth_generate(&spec)?;
        let base = TrainConfig {
            schedule: PaceSchedule::stepped(0.5, 0.1, 0.15),
            seed,
            ..Default::default()
        };
        let mut line = format!("seed {seed}:");
        for mode in [Mode::DrfBaseline, Mode::Spdrf, Mode::SpdrfCapped] {
            let clock = std::time::Instant::now();
            let out = train(&train_set, &test_set, &mode.apply(&base))?;
            let first = out.report.records.first().unwrap().test_mae;
            let last = out.report.records.last().unwrap().test_mae;
            line += &format!(
                "  {mode:?} first {first:.3} final {last:.3} ({:.1}s)",
                clock.elapsed().as_secs_f64()
            );
        }
        println!("{line}");
    }
    Ok(())
}
