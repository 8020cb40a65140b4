//! Scratch calibration for the end-to-end synthetic learning check.

use std::time::Instant;

use poirec::config::{Ablation, Profile, RunConfig};
use poirec::ingest::{self, FilterParams};
use poirec::model::Model;
use poirec::synth::SynthParams;

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let records = poirec::synth::generate(&SynthParams::default());
    let mut dataset = ingest::filter_dataset(&records, &FilterParams::default()).unwrap();
    ingest::split_train_test(&mut dataset, 0.8).unwrap();
    println!(
        "dataset: {} users, {} pois, epochs {epochs}",
        dataset.user_count(),
        dataset.poi_count()
    );

    for variant in ["full", "backbone", "no-psl"] {
        for seed in [11u64, 12, 13] {
            let mut config = RunConfig::profile(Profile::Desk);
            config.epochs = epochs;
            config.seed = seed;
            match variant {
                "backbone" => {
                    config.spatial_view = false;
                    config.temporal_view = false;
                    config.beta_hsl = 0.0;
                    config.beta_sh = 0.0;
                    config.beta_sp = 0.0;
                }
                "no-psl" => config.ablation = Ablation::NoPsl,
                _ => {}
            }
            let start = Instant::now();
            let mut model = Model::new(config, &dataset).unwrap();
            let logs = model.train(&dataset).unwrap();
            let report = model.evaluate(&dataset).unwrap();
            println!(
                "{variant:<9} seed {seed}: acc@1 {:.4} acc@5 {:.4} mrr {:.4} | first/last loss {:.3}/{:.3} | {:.1}s",
                report.metrics.acc_at[&1],
                report.metrics.acc_at[&5],
                report.metrics.mrr,
                logs.first().map(|l| l.loss.total).unwrap_or(f64::NAN),
                logs.last().map(|l| l.loss.total).unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
        }
    }
}
