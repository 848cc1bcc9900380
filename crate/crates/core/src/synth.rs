//! Labeled synthetic NetFlow generator for desk-scale experiments.
//!
//! Benign traffic: every host carries a latent profile vector; each stable
//! host pair gets a log-normal feature signature derived from its endpoint
//! profiles, and flows sample that signature with small noise. Feature
//! values are therefore predictable from the communicating endpoints, which
//! is exactly the regularity the graph encoder can exploit.
//!
//! Planted anomalies:
//! - `feature_outlier`: bursts on a quiet pair with several features scaled
//!   far outside the benign range (visible to a per-feature z-score),
//! - `topology_scan`: a quiet source fanning to many distinct destinations
//!   with feature vectors drawn from fresh signatures that match the benign
//!   marginal (invisible to per-feature statistics, visible in the graph),
//! - `burst`: rapid repetition of one existing benign pair (multiplicity
//!   anomaly; features stay benign).

use crate::ingest::{write_csv, FlowRecord};
use crate::{Error, Result};
use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const KIND_FEATURE_OUTLIER: &str = "feature_outlier";
pub const KIND_TOPOLOGY_SCAN: &str = "topology_scan";
pub const KIND_BURST: &str = "burst";

/// Flows emitted per outlier event (one compromised pair).
const OUTLIER_EVENT_SIZE: usize = 25;
/// Flows emitted per burst event (one repeated pair).
const BURST_EVENT_SIZE: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FeatureOutlier,
    TopologyScan,
    Burst,
}

impl AnomalyKind {
    pub fn label(self) -> &'static str {
        match self {
            AnomalyKind::FeatureOutlier => KIND_FEATURE_OUTLIER,
            AnomalyKind::TopologyScan => KIND_TOPOLOGY_SCAN,
            AnomalyKind::Burst => KIND_BURST,
        }
    }
}

fn default_scan_fan() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_hosts: usize,
    pub n_flows: usize,
    /// Fraction of flows that are planted anomalies, in (0, 0.5).
    pub anomaly_ratio: f64,
    pub kinds: Vec<AnomalyKind>,
    pub feature_dim: usize,
    pub seed: u64,
    /// Distinct destinations per scan event.
    #[serde(default = "default_scan_fan")]
    pub scan_fan: usize,
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 0.5) {
            return Err(Error::InfeasibleSpec("anomaly_ratio must lie in (0, 0.5)".into()));
        }
        if self.n_hosts < 8 {
            return Err(Error::InfeasibleSpec("need at least 8 hosts".into()));
        }
        if self.n_flows < 100 {
            return Err(Error::InfeasibleSpec("need at least 100 flows".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InfeasibleSpec("need at least 2 features".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InfeasibleSpec("at least one anomaly kind".into()));
        }
        if self.kinds.contains(&AnomalyKind::TopologyScan) && self.scan_fan >= self.n_hosts {
            return Err(Error::InfeasibleSpec(format!(
                "scan fan {} needs more than {} hosts",
                self.scan_fan, self.n_hosts
            )));
        }
        Ok(())
    }

    pub fn n_anomalies(&self) -> usize {
        (self.anomaly_ratio * self.n_flows as f64).round() as usize
    }
}

/// Generated records plus the feature header they serialize under.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<FlowRecord>,
    pub feature_names: Vec<String>,
}

impl SynthDataset {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, &self.records, &self.feature_names)
    }
}

/// NetFlow-style feature names for the generated columns.
fn feature_names(dim: usize) -> Vec<String> {
    const NAMES: [&str; 12] = [
        "IN_BYTES",
        "IN_PKTS",
        "OUT_BYTES",
        "OUT_PKTS",
        "FLOW_DURATION_MILLISECONDS",
        "DURATION_IN",
        "DURATION_OUT",
        "MIN_TTL",
        "MAX_TTL",
        "LONGEST_FLOW_PKT",
        "SHORTEST_FLOW_PKT",
        "TCP_WIN_MAX_IN",
    ];
    (0..dim)
        .map(|i| {
            if i < NAMES.len() {
                NAMES[i].to_string()
            } else {
                format!("FEAT_{i}")
            }
        })
        .collect()
}

fn host_name(i: usize) -> String {
    format!("10.0.{}.{}", i / 250, i % 250 + 1)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

struct World {
    /// Per-host latent profile, n_hosts × dim.
    profiles: Vec<Vec<f64>>,
    /// Stable benign pairs with their signature means and sampling weights.
    pairs: Vec<Pair>,
    cum_weights: Vec<f64>,
    quiet_hosts: Vec<usize>,
    dim: usize,
}

struct Pair {
    src: usize,
    dst: usize,
    signature: Vec<f64>,
    weight: f64,
}

/// Signature of a directed pair from its endpoint profiles plus pair noise.
fn pair_signature(pu: &[f64], pv: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    pu.iter()
        .zip(pv)
        .map(|(a, b)| 1.0 * a + 0.7 * b + 0.2 * normal(rng))
        .collect()
}

/// Log-normal flow features around a signature.
fn flow_features(signature: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    signature
        .iter()
        .map(|m| (m + 0.15 * normal(rng)).exp())
        .collect()
}

fn build_world(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> World {
    let dim = spec.feature_dim;
    let profiles: Vec<Vec<f64>> = (0..spec.n_hosts)
        .map(|_| (0..dim).map(|_| 0.6 * normal(rng)).collect())
        .collect();

    let n_quiet = (spec.n_hosts / 5).max(4).min(spec.n_hosts / 2);
    let quiet_hosts: Vec<usize> = (spec.n_hosts - n_quiet..spec.n_hosts).collect();
    let active: Vec<usize> = (0..spec.n_hosts - n_quiet).collect();

    let mut pairs = Vec::new();
    // active hosts keep 2-4 stable peers
    for &u in &active {
        let n_peers = rng.random_range(2..=4usize);
        let mut used = HashSet::new();
        used.insert(u);
        for _ in 0..n_peers {
            let mut v = rng.random_range(0..spec.n_hosts);
            let mut guard = 0;
            while used.contains(&v) && guard < 64 {
                v = rng.random_range(0..spec.n_hosts);
                guard += 1;
            }
            if used.contains(&v) {
                continue;
            }
            used.insert(v);
            let signature = pair_signature(&profiles[u], &profiles[v], rng);
            let weight = (0.5 * normal(rng)).exp();
            pairs.push(Pair {
                src: u,
                dst: v,
                signature,
                weight,
            });
        }
    }
    // quiet hosts exist in benign traffic but barely: one faint pair each
    for &q in &quiet_hosts {
        let mut v = rng.random_range(0..spec.n_hosts);
        if v == q {
            v = (q + 1) % spec.n_hosts;
        }
        let signature = pair_signature(&profiles[q], &profiles[v], rng);
        pairs.push(Pair {
            src: q,
            dst: v,
            signature,
            weight: 0.02,
        });
    }

    let mut cum_weights = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for p in &pairs {
        acc += p.weight;
        cum_weights.push(acc);
    }
    World {
        profiles,
        pairs,
        cum_weights,
        quiet_hosts,
        dim,
    }
}

impl World {
    fn sample_pair(&self, rng: &mut ChaCha8Rng) -> &Pair {
        let total = *self.cum_weights.last().unwrap();
        let x = rng.random_range(0.0..total);
        let idx = self.cum_weights.partition_point(|&c| c < x);
        &self.pairs[idx.min(self.pairs.len() - 1)]
    }

    /// A signature from the same family as the benign ones but belonging to
    /// no real pair: fresh latents through the same construction, so the
    /// feature marginal matches while endpoint consistency breaks.
    fn fresh_signature(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let gu: Vec<f64> = (0..self.dim).map(|_| 0.6 * normal(rng)).collect();
        let gv: Vec<f64> = (0..self.dim).map(|_| 0.6 * normal(rng)).collect();
        pair_signature(&gu, &gv, rng)
    }
}

/// Generate a labeled synthetic dataset. Deterministic per seed; the output
/// round-trips through the CSV parser.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = build_world(spec, &mut rng);

    let n_anom = spec.n_anomalies();
    let n_benign = spec.n_flows - n_anom;
    let mut records: Vec<FlowRecord> = Vec::with_capacity(spec.n_flows);

    for _ in 0..n_benign {
        let pair = world.sample_pair(&mut rng);
        records.push(FlowRecord::benign(
            host_name(pair.src),
            host_name(pair.dst),
            flow_features(&pair.signature, &mut rng),
        ));
    }

    // split the anomaly budget across kinds, remainder to the earlier kinds
    let share = n_anom / spec.kinds.len();
    let mut budgets: Vec<usize> = vec![share; spec.kinds.len()];
    for b in budgets.iter_mut().take(n_anom % spec.kinds.len()) {
        *b += 1;
    }

    let mut quiet_cycle = world.quiet_hosts.iter().cycle();
    let mut scan_used: Vec<HashSet<usize>> = vec![HashSet::new(); spec.n_hosts];
    for (kind, mut budget) in spec.kinds.iter().zip(budgets) {
        while budget > 0 {
            match kind {
                AnomalyKind::FeatureOutlier => {
                    let take = budget.min(OUTLIER_EVENT_SIZE);
                    let src = *quiet_cycle.next().expect("quiet hosts");
                    let dst = (src + 1 + rng.random_range(0..spec.n_hosts - 1)) % spec.n_hosts;
                    let base = world.sample_pair(&mut rng).signature.clone();
                    // scale at least half the features far outside the benign range
                    let n_scaled = (spec.feature_dim / 2).max(1);
                    let mut dims: Vec<usize> = (0..spec.feature_dim).collect();
                    dims.shuffle(&mut rng);
                    let scaled: HashSet<usize> = dims.into_iter().take(n_scaled).collect();
                    for _ in 0..take {
                        let mut f = flow_features(&base, &mut rng);
                        for (j, v) in f.iter_mut().enumerate() {
                            if scaled.contains(&j) {
                                *v *= rng.random_range(50.0..150.0);
                            }
                        }
                        records.push(FlowRecord::attack(
                            host_name(src),
                            host_name(dst),
                            f,
                            KIND_FEATURE_OUTLIER,
                        ));
                    }
                    budget -= take;
                }
                AnomalyKind::TopologyScan => {
                    let take = budget.min(spec.scan_fan);
                    let src = *quiet_cycle.next().expect("quiet hosts");
                    for _ in 0..take {
                        let dst = pick_scan_destination(src, spec.n_hosts, &mut scan_used[src], &mut rng);
                        let sig = world.fresh_signature(&mut rng);
                        records.push(FlowRecord::attack(
                            host_name(src),
                            host_name(dst),
                            flow_features(&sig, &mut rng),
                            KIND_TOPOLOGY_SCAN,
                        ));
                    }
                    budget -= take;
                }
                AnomalyKind::Burst => {
                    let take = budget.min(BURST_EVENT_SIZE);
                    let pair = world.sample_pair(&mut rng);
                    for _ in 0..take {
                        records.push(FlowRecord::attack(
                            host_name(pair.src),
                            host_name(pair.dst),
                            flow_features(&pair.signature, &mut rng),
                            KIND_BURST,
                        ));
                    }
                    budget -= take;
                }
            }
        }
    }

    records.shuffle(&mut rng);
    Ok(SynthDataset {
        records,
        feature_names: feature_names(spec.feature_dim),
    })
}

fn pick_scan_destination(
    src: usize,
    n_hosts: usize,
    used: &mut HashSet<usize>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let available: Vec<usize> = (0..n_hosts).filter(|&h| h != src && !used.contains(&h)).collect();
    let dst = match available.as_slice() {
        [] => {
            // every destination already scanned once; allow reuse
            let all: Vec<usize> = (0..n_hosts).filter(|&h| h != src).collect();
            *all.choose(rng).unwrap()
        }
        some => *some.choose(rng).unwrap(),
    };
    used.insert(dst);
    dst
}
