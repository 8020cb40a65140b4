//! Scratch probe: late-venue exposure under the default generator.

use std::collections::BTreeSet;

use poirec::synth::{self, SynthParams};

fn main() {
    let mut params = SynthParams::default();
    if let (Some(open), Some(late)) = (
        std::env::args().nth(1).and_then(|s| s.parse().ok()),
        std::env::args().nth(2).and_then(|s| s.parse().ok()),
    ) {
        params.open_day = open;
        params.late_per_cluster = late;
    }
    let records = synth::generate(&params);
    let n = params.poi_count();
    let mut visitors: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n];
    let mut visits = vec![0usize; n];
    for r in &records {
        let p: usize = r.poi_id[1..].parse().unwrap();
        visitors[p].insert(&r.user_id);
        visits[p] += 1;
    }
    let per = params.pois_per_cluster;
    let late = |p: usize| p % per >= per - params.late_per_cluster;
    let mut late_visitors: Vec<usize> = (0..n).filter(|&p| late(p)).map(|p| visitors[p].len()).collect();
    late_visitors.sort_unstable();
    let est_mean: f64 = (0..n).filter(|&p| !late(p)).map(|p| visits[p] as f64).sum::<f64>()
        / (n - late_visitors.len()) as f64;
    let late_mean: f64 = (0..n).filter(|&p| late(p)).map(|p| visits[p] as f64).sum::<f64>()
        / late_visitors.len() as f64;
    println!(
        "open_day {} late/cluster {}: late visitors min..max {:?}..{:?}, late mean visits {:.1}, established {:.1}",
        params.open_day,
        params.late_per_cluster,
        late_visitors.first(),
        late_visitors.last(),
        late_mean,
        est_mean
    );
}
