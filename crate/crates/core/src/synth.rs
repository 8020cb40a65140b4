//! Synthetic check-in corpus with planted structure.
//!
//! POIs form spatial clusters, and each cluster has a walking route: a
//! greedy nearest-neighbor tour of its venues. A user mostly follows the
//! route, occasionally detouring to a venue near the current one, and
//! visits during the cluster's characteristic hours. Route steps are
//! highly predictable, and because the route is spatially local, *where
//! a venue sits determines what follows it*.
//!
//! Three planted frictions keep raw statistics from telling the whole
//! story, while leaving it fully recoverable from the feature views:
//!
//! - Clusters come in close district pairs about 1.2 km apart (districts
//!   themselves are ~111 km apart). Any fixed distance radius either
//!   mixes the paired clusters or shatters them, yet their coordinate
//!   boxes are disjoint, so a learned boundary tells them apart exactly.
//! - Each cluster is active over three 3-hour slots that overlap its
//!   successor's window by two slots, and each venue concentrates visits
//!   on its own peak slot. Raw-histogram cosine therefore favors peak
//!   alignment over cluster membership, while the support pattern of the
//!   full histogram still identifies the cluster.
//! - Some venues open late in the observation window, so the early
//!   (training) portion of each history barely mentions them; once open
//!   they join the route at their spatially correct position, and
//!   detours grow more frequent over each user's lifetime. Predicting
//!   around these venues requires knowing where they sit, not how often
//!   they co-occurred.

use rand::Rng;

use crate::ingest::CheckIn;
use crate::optim::derive_rng;

/// Shape of the generated corpus. Defaults match the synthetic evaluation
/// setup: 4 clusters x 40 POIs, 300 users, visit counts inside the
/// 20..=50 filter window so the standard preprocessing keeps everyone.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub clusters: usize,
    pub pois_per_cluster: usize,
    pub users: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    /// Detour probability at the first visit. A detour step leaves the
    /// route for a venue near the current one (uniform over its
    /// [`JUMP_CANDIDATES`] nearest open cluster mates).
    pub jump_prob_start: f64,
    /// Detour probability at the last visit; in between it ramps
    /// quadratically over the user's lifetime, so exploration stays rare
    /// early on and picks up once the routine wears thin.
    pub jump_prob_end: f64,
    /// How many venues per cluster open late (the highest local indices).
    pub late_per_cluster: usize,
    /// Day (per-user visit index) from which late venues are visitable.
    pub open_day: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            clusters: 4,
            pois_per_cluster: 40,
            users: 300,
            min_visits: 24,
            max_visits: 36,
            jump_prob_start: 0.02,
            jump_prob_end: 0.18,
            late_per_cluster: 3,
            open_day: 22,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn poi_count(&self) -> usize {
        self.clusters * self.pois_per_cluster
    }

    /// Ground-truth cluster of a POI by canonical index (IDs are padded,
    /// so canonical sorted order equals generation order).
    pub fn planted_cluster(&self, poi: usize) -> usize {
        poi / self.pois_per_cluster
    }

    /// Ground-truth labels for all POIs.
    pub fn planted_labels(&self) -> Vec<usize> {
        (0..self.poi_count())
            .map(|p| self.planted_cluster(p))
            .collect()
    }
}

/// 2024-01-01T00:00:00Z, a Monday, so weekday arithmetic starts at zero.
const BASE_TIMESTAMP: i64 = 1_704_067_200;

/// Latitude offset between the two clusters of a district: ~1.22 km,
/// with member scatter of ±[`SCATTER_DEG`] (~±0.55 km) the coordinate
/// boxes stay disjoint while many cross-cluster pairs sit within a
/// kilometre of each other.
const PAIR_OFFSET_DEG: f64 = 0.011;
const SCATTER_DEG: f64 = 0.005;
/// Share of visits that land in the venue's own peak slot; the rest
/// spread over the cluster's whole window.
const PEAK_PROB: f64 = 0.8;
/// Cluster window: three 3-hour slots starting at hour 3c, so successive
/// clusters overlap in two of their three slots.
const WINDOW_SLOTS: usize = 3;
const SLOT_SECONDS: i64 = 3 * 3600;
/// Detours land uniformly on this many nearest open same-cluster venues.
pub const JUMP_CANDIDATES: usize = 5;
/// Once late venues are open, this share of detours goes to the nearest
/// one instead (grand-opening buzz).
pub const BUZZ_PROB: f64 = 0.8;

/// Clusters 2d and 2d+1 share district d (longitude d degrees, ~111 km
/// between districts) and differ by a small latitude offset.
fn poi_position(cluster: usize, rng: &mut impl Rng) -> (f64, f64) {
    let lat = (cluster % 2) as f64 * PAIR_OFFSET_DEG + rng.random_range(-SCATTER_DEG..SCATTER_DEG);
    let lon = (cluster / 2) as f64 + rng.random_range(-SCATTER_DEG..SCATTER_DEG);
    (lat, lon)
}

/// Seconds past midnight of one visit to a venue with the given peak slot
/// (0..WINDOW_SLOTS within its cluster's window).
fn visit_second_of_day(cluster: usize, peak: usize, rng: &mut impl Rng) -> i64 {
    let window_start = (cluster as i64) * SLOT_SECONDS;
    let offset = if rng.random_bool(PEAK_PROB) {
        peak as i64 * SLOT_SECONDS + rng.random_range(0..SLOT_SECONDS)
    } else {
        rng.random_range(0..WINDOW_SLOTS as i64 * SLOT_SECONDS)
    };
    (window_start + offset).rem_euclid(86_400)
}

/// The drawn world: everything about the venues before any user walks it.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: SynthParams,
    /// (latitude, longitude) per venue, by global index.
    pub positions: Vec<(f64, f64)>,
    /// Peak slot (0..WINDOW_SLOTS) per venue.
    pub peaks: Vec<usize>,
    /// Cyclic route: `tour_next[p]` is the venue after `p` on its
    /// cluster's greedy nearest-neighbor tour.
    pub tour_next: Vec<usize>,
    /// Same-cluster venues of each venue, nearest first.
    pub near: Vec<Vec<usize>>,
    /// First day (visit index) each venue is visitable.
    pub opens: Vec<usize>,
}

impl Plant {
    /// The venue after `p` on the route. Late venues never join the
    /// route — an established routine does not absorb a new opening —
    /// so the walk only reaches them by detour.
    pub fn successor(&self, p: usize) -> usize {
        let mut q = self.tour_next[p];
        while self.opens[q] > 0 {
            q = self.tour_next[q];
        }
        q
    }

    /// Detour candidates from `p` on a given day: its nearest open
    /// cluster mates.
    pub fn detour_candidates(&self, p: usize, day: usize) -> Vec<usize> {
        self.near[p]
            .iter()
            .copied()
            .filter(|&q| self.opens[q] <= day)
            .take(JUMP_CANDIDATES)
            .collect()
    }

    /// Late cluster mates of `p` already open on the given day, nearest
    /// first.
    pub fn buzz_candidates(&self, p: usize, day: usize) -> Vec<usize> {
        self.near[p]
            .iter()
            .copied()
            .filter(|&q| self.opens[q] > 0 && self.opens[q] <= day)
            .collect()
    }
}

fn distance(positions: &[(f64, f64)], a: usize, b: usize) -> f64 {
    let (alat, alon) = positions[a];
    let (blat, blon) = positions[b];
    crate::ingest::haversine_km(alat, alon, blat, blon)
}

/// Greedy nearest-neighbor tour over one cluster's venues, starting from
/// its lowest global index; ties break toward the lower index.
fn greedy_tour(positions: &[(f64, f64)], first: usize, count: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (first..first + count).collect();
    let mut tour = vec![remaining.remove(0)];
    while !remaining.is_empty() {
        let here = *tour.last().expect("tour starts non-empty");
        let (best_pos, _) = remaining
            .iter()
            .enumerate()
            .map(|(i, &q)| (i, distance(positions, here, q)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
            .expect("remaining non-empty");
        tour.push(remaining.remove(best_pos));
    }
    tour
}

/// Draws the venue world for the given parameters. Deterministic in
/// `params.seed`; the user walks draw from a separate stream.
pub fn plant(params: &SynthParams) -> Plant {
    assert!(
        params.late_per_cluster < params.pois_per_cluster,
        "every cluster needs at least one venue open from day zero"
    );
    let mut rng = derive_rng(params.seed, "synth", 0, 0);
    let n = params.poi_count();
    let per = params.pois_per_cluster;

    let positions: Vec<(f64, f64)> = (0..n)
        .map(|p| poi_position(params.planted_cluster(p), &mut rng))
        .collect();
    let peaks: Vec<usize> = (0..n).map(|_| rng.random_range(0..WINDOW_SLOTS)).collect();

    let mut tour_next = vec![0usize; n];
    for c in 0..params.clusters {
        let tour = greedy_tour(&positions, c * per, per);
        for (i, &p) in tour.iter().enumerate() {
            tour_next[p] = tour[(i + 1) % per];
        }
    }

    let near: Vec<Vec<usize>> = (0..n)
        .map(|p| {
            let c = params.planted_cluster(p);
            let mut mates: Vec<usize> = (c * per..(c + 1) * per).filter(|&q| q != p).collect();
            mates.sort_by(|&a, &b| {
                distance(&positions, p, a)
                    .partial_cmp(&distance(&positions, p, b))
                    .expect("finite distances")
                    .then(a.cmp(&b))
            });
            mates
        })
        .collect();

    let opens: Vec<usize> = (0..n)
        .map(|p| {
            if p % per >= per - params.late_per_cluster {
                params.open_day
            } else {
                0
            }
        })
        .collect();

    Plant {
        params: *params,
        positions,
        peaks,
        tour_next,
        near,
        opens,
    }
}

/// Generates the full corpus as raw check-in records, ready for the
/// standard preprocessing pipeline. Deterministic in `params.seed`.
pub fn generate(params: &SynthParams) -> Vec<CheckIn> {
    let world = plant(params);
    let mut rng = derive_rng(params.seed, "walk", 0, 0);
    let per = params.pois_per_cluster;

    let mut records = Vec::new();
    for u in 0..params.users {
        let cluster = u % params.clusters;
        let visits = rng.random_range(params.min_visits..=params.max_visits);
        let established: Vec<usize> = (cluster * per..(cluster + 1) * per)
            .filter(|&p| world.opens[p] == 0)
            .collect();
        let mut p = established[rng.random_range(0..established.len())];
        for v in 0..visits {
            // One visit per day keeps per-user timestamps strictly
            // increasing regardless of the hour drawn.
            let timestamp = BASE_TIMESTAMP
                + (v as i64) * 86_400
                + visit_second_of_day(cluster, world.peaks[p], &mut rng);
            records.push(CheckIn {
                user_id: format!("u{u:04}"),
                poi_id: format!("p{p:04}"),
                latitude: world.positions[p].0,
                longitude: world.positions[p].1,
                timestamp,
            });

            let ramp = if visits > 1 {
                v as f64 / (visits - 1) as f64
            } else {
                0.0
            };
            let jump_prob = params.jump_prob_start
                + (params.jump_prob_end - params.jump_prob_start) * ramp * ramp;
            let next_day = v + 1;
            p = if rng.random_bool(jump_prob) {
                let openings = world.buzz_candidates(p, next_day);
                if !openings.is_empty() && rng.random_bool(BUZZ_PROB) {
                    openings[rng.random_range(0..openings.len())]
                } else {
                    let candidates = world.detour_candidates(p, next_day);
                    if candidates.is_empty() {
                        world.successor(p)
                    } else {
                        candidates[rng.random_range(0..candidates.len())]
                    }
                }
            } else {
                world.successor(p)
            };
        }
    }
    records
}
