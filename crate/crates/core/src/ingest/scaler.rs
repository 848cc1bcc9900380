//! Min-max feature scaling fitted on benign training flows.

use super::FlowRecord;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CLIP_LO: f64 = -10.0;
pub const CLIP_HI: f64 = 10.0;

/// Per-feature min-max scaler. Training values map into [0, 1]; anything
/// outside the fitted range is clipped to [-10, 10]. Constant (degenerate)
/// features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl FeatureScaler {
    /// Fit on benign training rows.
    pub fn fit(train: &[&FlowRecord]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::EmptyInput("scaler fit on empty training set".into()))?;
        if let Some(bad) = train.iter().find(|r| r.is_attack) {
            return Err(Error::InvalidConfig(format!(
                "scaler must be fitted on benign flows only (found attack `{}`)",
                bad.attack_type
            )));
        }
        let dim = first.features.len();
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for r in train {
            if r.features.len() != dim {
                return Err(Error::dim("scaler fit", dim, r.features.len()));
            }
            for (j, &v) in r.features.iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        Ok(FeatureScaler {
            mins,
            maxs,
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
        })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    /// A feature with no spread on the training set.
    pub fn is_degenerate(&self, feature: usize) -> bool {
        self.mins[feature] == self.maxs[feature]
    }

    pub fn transform_value(&self, feature: usize, x: f64) -> f64 {
        if self.is_degenerate(feature) {
            return 0.0;
        }
        let scaled = (x - self.mins[feature]) / (self.maxs[feature] - self.mins[feature]);
        scaled.clamp(self.clip_lo, self.clip_hi)
    }

    /// Scale a set of records into a dense feature matrix.
    pub fn transform(&self, records: &[&FlowRecord]) -> Result<Array2<f64>> {
        let dim = self.dim();
        let mut out = Array2::zeros((records.len(), dim));
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::dim("scaler transform", dim, r.features.len()));
            }
            for j in 0..dim {
                out[[i, j]] = self.transform_value(j, r.features[j]);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("scaler serializes");
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("bad scaler file: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(features: Vec<f64>) -> FlowRecord {
        FlowRecord::benign("a", "b", features)
    }

    #[test]
    fn fit_records_min_max() {
        let rows = vec![rec(vec![2.0]), rec(vec![6.0]), rec(vec![10.0])];
        let refs: Vec<&FlowRecord> = rows.iter().collect();
        let s = FeatureScaler::fit(&refs).unwrap();
        assert_eq!(s.mins, vec![2.0]);
        assert_eq!(s.maxs, vec![10.0]);
        assert!(!s.is_degenerate(0));
        assert_eq!(s.transform_value(0, 6.0), 0.5);
    }

    #[test]
    fn constant_column_is_degenerate_and_maps_to_zero() {
        let rows = vec![rec(vec![5.0]), rec(vec![5.0]), rec(vec![5.0])];
        let refs: Vec<&FlowRecord> = rows.iter().collect();
        let s = FeatureScaler::fit(&refs).unwrap();
        assert!(s.is_degenerate(0));
        assert_eq!(s.transform_value(0, 123.0), 0.0);
        assert_eq!(s.transform_value(0, 5.0), 0.0);
    }

    #[test]
    fn empty_train_errors() {
        assert!(matches!(
            FeatureScaler::fit(&[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn attack_rows_rejected() {
        let rows = vec![FlowRecord::attack("a", "b", vec![1.0], "scan")];
        let refs: Vec<&FlowRecord> = rows.iter().collect();
        assert!(FeatureScaler::fit(&refs).is_err());
    }

    #[test]
    fn out_of_range_values_clip() {
        let rows = vec![rec(vec![0.0]), rec(vec![1.0])];
        let refs: Vec<&FlowRecord> = rows.iter().collect();
        let s = FeatureScaler::fit(&refs).unwrap();
        assert_eq!(s.transform_value(0, 30.0), 10.0);
        assert_eq!(s.transform_value(0, -1e9), -10.0);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let rows = vec![rec(vec![0.0, 1.0]), rec(vec![1.0, 2.0])];
        let refs: Vec<&FlowRecord> = rows.iter().collect();
        let s = FeatureScaler::fit(&refs).unwrap();
        let bad = vec![rec(vec![1.0])];
        let bad_refs: Vec<&FlowRecord> = bad.iter().collect();
        assert!(s.transform(&bad_refs).is_err());
    }

    proptest! {
        /// Training data never clips: non-degenerate features land in [0, 1].
        #[test]
        fn train_transform_stays_in_unit_interval(
            cols in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3..20), 1..5)
        ) {
            let n = cols[0].len();
            prop_assume!(cols.iter().all(|c| c.len() == n));
            let rows: Vec<FlowRecord> = (0..n)
                .map(|i| rec(cols.iter().map(|c| c[i]).collect()))
                .collect();
            let refs: Vec<&FlowRecord> = rows.iter().collect();
            let s = FeatureScaler::fit(&refs).unwrap();
            let m = s.transform(&refs).unwrap();
            for (i, r) in rows.iter().enumerate() {
                for j in 0..cols.len() {
                    let v = m[[i, j]];
                    if s.is_degenerate(j) {
                        prop_assert_eq!(v, 0.0);
                    } else {
                        prop_assert!((0.0..=1.0).contains(&v), "value {} outside [0,1]", v);
                        let _ = r;
                    }
                }
            }
        }

        /// Monotone per feature before clipping.
        #[test]
        fn transform_is_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6, x in -1e5f64..1e5, y in -1e5f64..1e5) {
            prop_assume!((a - b).abs() > 1e-9);
            let rows = vec![rec(vec![a]), rec(vec![b])];
            let refs: Vec<&FlowRecord> = rows.iter().collect();
            let s = FeatureScaler::fit(&refs).unwrap();
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(s.transform_value(0, lo) <= s.transform_value(0, hi));
        }
    }
}
