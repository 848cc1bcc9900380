//! Stratified train/validation/test splitting.
//!
//! Splits preserve per-attack-type proportions in validation and test.
//! Attack rows allotted to the train partition are discarded rather than
//! reassigned, which keeps the train set benign-only without disturbing the
//! validation/test proportions.

use super::{FeatureScaler, FlowRecord, Schema};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Index-based split of a record set, plus the scaler fitted on its
/// (benign-only) train partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    /// Benign-only training rows.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Attack rows that fell into the train partition and were dropped.
    pub discarded_train_attacks: Vec<usize>,
    pub scaler: FeatureScaler,
}

impl DatasetSplit {
    pub fn select<'a>(records: &'a [FlowRecord], idx: &[usize]) -> Vec<&'a FlowRecord> {
        idx.iter().map(|&i| &records[i]).collect()
    }
}

fn rounded_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let n_val = (n as f64 * ratios.1).round() as usize;
    let n_test = (n as f64 * ratios.2).round() as usize;
    // keep val+test feasible for tiny groups
    let n_val = n_val.min(n);
    let n_test = n_test.min(n - n_val);
    (n_val, n_test)
}

/// Deterministic stratified split. Groups rows by class (benign, or attack
/// type), shuffles each group with the seeded RNG, and carves out validation
/// and test shares per group with rounded counts (within ±1 of exact
/// proportionality). The remainder forms the train partition; attack rows in
/// it are discarded.
pub fn stratified_split(
    records: &[FlowRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::EmptyInput("stratified_split on empty record set".into()));
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 <= 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be nonnegative and sum to 1 (got {ratios:?})"
        )));
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.attack_type.as_str()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut discarded = Vec::new();
    for (key, mut idx) in groups {
        idx.shuffle(&mut rng);
        let (n_val, n_test) = rounded_counts(idx.len(), ratios);
        val.extend(idx.drain(..n_val));
        test.extend(idx.drain(..n_test));
        if key.is_empty() {
            train.extend(idx);
        } else {
            discarded.extend(idx);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    discarded.sort_unstable();

    let train_refs = DatasetSplit::select(records, &train);
    let scaler = FeatureScaler::fit(&train_refs)?;

    Ok(DatasetSplit {
        seed,
        ratios,
        train,
        val,
        test,
        discarded_train_attacks: discarded,
        scaler,
    })
}

/// On-disk description of an ingest run: where the data came from, how it was
/// parsed, and exactly which rows landed in which partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub input_path: String,
    pub schema: Schema,
    pub timestamps_enabled: bool,
    pub feature_names: Vec<String>,
    pub n_records: usize,
    pub split: DatasetSplit,
}

impl SplitManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string(self).expect("manifest serializes");
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixed_records(n_benign: usize, attacks: &[(&str, usize)]) -> Vec<FlowRecord> {
        let mut out = Vec::new();
        for i in 0..n_benign {
            out.push(FlowRecord::benign(format!("h{}", i % 7), "h0", vec![i as f64, 1.0]));
        }
        for (kind, count) in attacks {
            for i in 0..*count {
                out.push(FlowRecord::attack(
                    format!("a{}", i % 3),
                    "h1",
                    vec![i as f64, 2.0],
                    *kind,
                ));
            }
        }
        out
    }

    #[test]
    fn split_counts_match_reference_partitioner() {
        // 950 benign / 50 attack at 80/10/10: the reference arithmetic gives
        // val = 95 + 5, test = 95 + 5, train = 760 benign, 40 attacks dropped.
        let records = mixed_records(950, &[("scan", 50)]);
        let split = stratified_split(&records, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(split.train.len(), 760);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 100);
        assert_eq!(split.discarded_train_attacks.len(), 40);

        let val_attacks = split.val.iter().filter(|&&i| records[i].is_attack).count();
        let test_attacks = split.test.iter().filter(|&&i| records[i].is_attack).count();
        assert_eq!(val_attacks, 5);
        assert_eq!(test_attacks, 5);
        assert!(split.train.iter().all(|&i| !records[i].is_attack));
    }

    #[test]
    fn all_benign_input_splits_800_100_100() {
        let records = mixed_records(1000, &[]);
        let split = stratified_split(&records, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(split.train.len(), 800);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 100);
        assert!(split.discarded_train_attacks.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let records = mixed_records(500, &[("scan", 30), ("dos", 20)]);
        let a = stratified_split(&records, (0.8, 0.1, 0.1), 42).unwrap();
        let b = stratified_split(&records, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&records, (0.8, 0.1, 0.1), 43).unwrap();
        assert_ne!(a.val, c.val);
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(
            stratified_split(&[], (0.8, 0.1, 0.1), 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn bad_ratios_rejected() {
        let records = mixed_records(10, &[]);
        assert!(stratified_split(&records, (0.8, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn per_type_counts_within_one_of_proportionality() {
        let records = mixed_records(400, &[("scan", 33), ("dos", 17), ("worm", 3)]);
        let split = stratified_split(&records, (0.8, 0.1, 0.1), 11).unwrap();
        for (kind, count) in [("scan", 33usize), ("dos", 17), ("worm", 3)] {
            let exact = count as f64 * 0.1;
            for part in [&split.val, &split.test] {
                let got = part
                    .iter()
                    .filter(|&&i| records[i].attack_type == kind)
                    .count() as f64;
                assert!(
                    (got - exact).abs() <= 1.0,
                    "{kind}: got {got}, exact share {exact}"
                );
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let records = mixed_records(50, &[("scan", 10)]);
        let split = stratified_split(&records, (0.8, 0.1, 0.1), 5).unwrap();
        let manifest = SplitManifest {
            input_path: "data.csv".into(),
            schema: Schema::V2,
            timestamps_enabled: false,
            feature_names: vec!["A".into(), "B".into()],
            n_records: records.len(),
            split,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), manifest);
    }

    proptest! {
        /// Partitions are disjoint and, together with discarded train attacks,
        /// cover the input exactly once.
        #[test]
        fn partitions_cover_input(n_benign in 5usize..200, n_scan in 0usize..50, seed in 0u64..20) {
            let records = mixed_records(n_benign, &[("scan", n_scan)]);
            let split = stratified_split(&records, (0.8, 0.1, 0.1), seed).unwrap();
            let mut seen = vec![0usize; records.len()];
            for part in [&split.train, &split.val, &split.test, &split.discarded_train_attacks] {
                for &i in part.iter() {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(split.train.iter().all(|&i| !records[i].is_attack));
        }
    }
}
