//! NetFlow CSV ingestion: parsing, cleaning, splitting, and scaling.
//!
//! Files are comma-separated UTF-8 with a header row. Endpoint addresses and
//! the two label columns are identifiers; every other column is treated as a
//! numeric flow feature. Unparsable, missing, or non-finite numeric cells are
//! zero-filled and counted.

mod scaler;
mod split;

pub use scaler::FeatureScaler;
pub use split::{stratified_split, DatasetSplit, SplitManifest};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

pub const COL_SRC_IP: &str = "IPV4_SRC_ADDR";
pub const COL_DST_IP: &str = "IPV4_DST_ADDR";
pub const COL_LABEL: &str = "Label";
pub const COL_ATTACK: &str = "Attack";
pub const COL_FLOW_START_MS: &str = "FLOW_START_MILLISECONDS";
pub const COL_FLOW_END_MS: &str = "FLOW_END_MILLISECONDS";

/// NetFlow file layout. `V3` extends `V2` with temporal feature columns,
/// including the two millisecond timestamps that are dropped by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    V2,
    V3,
}

impl std::str::FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v2" => Ok(Schema::V2),
            "v3" => Ok(Schema::V3),
            other => Err(Error::InvalidConfig(format!("unknown schema `{other}`"))),
        }
    }
}

/// One parsed flow: endpoints, numeric features, and label metadata.
///
/// Invariant: `is_attack` holds exactly when `attack_type` is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub src_ip: String,
    pub dst_ip: String,
    pub features: Vec<f64>,
    pub is_attack: bool,
    pub attack_type: String,
}

impl FlowRecord {
    pub fn benign(src_ip: impl Into<String>, dst_ip: impl Into<String>, features: Vec<f64>) -> Self {
        FlowRecord {
            src_ip: src_ip.into(),
            dst_ip: dst_ip.into(),
            features,
            is_attack: false,
            attack_type: String::new(),
        }
    }

    pub fn attack(
        src_ip: impl Into<String>,
        dst_ip: impl Into<String>,
        features: Vec<f64>,
        attack_type: impl Into<String>,
    ) -> Self {
        let attack_type = attack_type.into();
        assert!(!attack_type.is_empty(), "attack records need a type");
        FlowRecord {
            src_ip: src_ip.into(),
            dst_ip: dst_ip.into(),
            features,
            is_attack: true,
            attack_type,
        }
    }
}

/// Result of parsing one CSV file.
#[derive(Debug, Clone)]
pub struct ParsedFlows {
    pub records: Vec<FlowRecord>,
    /// Feature column names in file order (timestamps excluded when dropped).
    pub feature_names: Vec<String>,
    pub schema: Schema,
    pub timestamps_enabled: bool,
    /// Numeric cells that were empty, unparsable, or non-finite and became 0.
    pub zero_filled: usize,
}

impl ParsedFlows {
    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    /// Distinct hosts over both endpoint columns.
    pub fn host_count(&self) -> usize {
        let mut hosts: HashSet<&str> = HashSet::new();
        for r in &self.records {
            hosts.insert(&r.src_ip);
            hosts.insert(&r.dst_ip);
        }
        hosts.len()
    }

    pub fn attack_ratio(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let attacks = self.records.iter().filter(|r| r.is_attack).count();
        attacks as f64 / self.records.len() as f64
    }
}

fn label_cell_is_attack(cell: &str) -> bool {
    let t = cell.trim();
    if t.is_empty() {
        return false;
    }
    match t.parse::<f64>() {
        Ok(v) => v != 0.0,
        Err(_) => !t.eq_ignore_ascii_case("benign"),
    }
}

fn normalize_attack_type(cell: &str) -> String {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("benign") {
        String::new()
    } else {
        t.to_string()
    }
}

/// Parse a NetFlow CSV under the given schema.
///
/// With `timestamps_enabled == false` (the default) the v3 millisecond
/// timestamp columns are excluded from the feature set. The flag has no
/// effect on v2 files, which carry no timestamps.
pub fn parse_csv(
    path: impl AsRef<Path>,
    schema: Schema,
    timestamps_enabled: bool,
) -> Result<ParsedFlows> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_csv_reader(file, schema, timestamps_enabled)
}

pub fn parse_csv_reader(
    reader: impl std::io::Read,
    schema: Schema,
    timestamps_enabled: bool,
) -> Result<ParsedFlows> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let require = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let src_idx = require(COL_SRC_IP)?;
    let dst_idx = require(COL_DST_IP)?;
    let label_idx = require(COL_LABEL)?;
    let attack_idx = require(COL_ATTACK)?;
    if schema == Schema::V3 {
        require(COL_FLOW_START_MS)?;
        require(COL_FLOW_END_MS)?;
    }

    let drop_timestamps = schema == Schema::V3 && !timestamps_enabled;
    let mut feature_cols: Vec<usize> = Vec::new();
    let mut feature_names: Vec<String> = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        if i == src_idx || i == dst_idx || i == label_idx || i == attack_idx {
            continue;
        }
        if drop_timestamps && (name == COL_FLOW_START_MS || name == COL_FLOW_END_MS) {
            continue;
        }
        feature_cols.push(i);
        feature_names.push(name.clone());
    }

    let mut records = Vec::new();
    let mut zero_filled = 0usize;
    for row in rdr.records() {
        let row = row?;
        let cell = |i: usize| row.get(i).unwrap_or("");
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = cell(c).trim();
            let v = raw.parse::<f64>().ok().filter(|v| v.is_finite());
            match v {
                Some(v) => features.push(v),
                None => {
                    zero_filled += 1;
                    features.push(0.0);
                }
            }
        }
        let attack_type = normalize_attack_type(cell(attack_idx));
        let is_attack = label_cell_is_attack(cell(label_idx)) || !attack_type.is_empty();
        let attack_type = if is_attack && attack_type.is_empty() {
            "unknown".to_string()
        } else {
            attack_type
        };
        records.push(FlowRecord {
            src_ip: cell(src_idx).trim().to_string(),
            dst_ip: cell(dst_idx).trim().to_string(),
            features,
            is_attack,
            attack_type,
        });
    }

    Ok(ParsedFlows {
        records,
        feature_names,
        schema,
        timestamps_enabled: timestamps_enabled && schema == Schema::V3,
        zero_filled,
    })
}

/// Write records in the same dialect `parse_csv` consumes. Feature values use
/// the shortest decimal form that round-trips, so parse → write → parse is an
/// identity on records.
pub fn write_csv(
    path: impl AsRef<Path>,
    records: &[FlowRecord],
    feature_names: &[String],
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_writer(file, records, feature_names)
}

pub fn write_csv_writer(
    mut w: impl Write,
    records: &[FlowRecord],
    feature_names: &[String],
) -> Result<()> {
    let mut header = vec![COL_SRC_IP.to_string(), COL_DST_IP.to_string()];
    header.extend(feature_names.iter().cloned());
    header.push(COL_LABEL.to_string());
    header.push(COL_ATTACK.to_string());
    writeln!(w, "{}", header.join(","))?;
    for r in records {
        if r.features.len() != feature_names.len() {
            return Err(Error::dim("write_csv", feature_names.len(), r.features.len()));
        }
        let mut cells = vec![r.src_ip.clone(), r.dst_ip.clone()];
        cells.extend(r.features.iter().map(|v| v.to_string()));
        cells.push(if r.is_attack { "1" } else { "0" }.to_string());
        cells.push(r.attack_type.clone());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v2_header(n_features: usize) -> String {
        let mut cols = vec![COL_SRC_IP.to_string(), COL_DST_IP.to_string()];
        cols.extend((0..n_features).map(|i| format!("FEAT_{i}")));
        cols.push(COL_LABEL.to_string());
        cols.push(COL_ATTACK.to_string());
        cols.join(",")
    }

    #[test]
    fn v2_feature_dimension_matches_column_count() {
        let mut csv = v2_header(43);
        csv.push('\n');
        csv.push_str("10.0.0.1,10.0.0.2");
        for i in 0..43 {
            csv.push_str(&format!(",{i}"));
        }
        csv.push_str(",0,\n");
        let parsed = parse_csv_reader(csv.as_bytes(), Schema::V2, false).unwrap();
        assert_eq!(parsed.feature_dim(), 43);
        assert_eq!(parsed.records[0].features.len(), 43);
        assert!(!parsed.records[0].is_attack);
    }

    #[test]
    fn v3_timestamps_dropped_by_default() {
        let header = format!(
            "{COL_SRC_IP},{COL_DST_IP},{COL_FLOW_START_MS},{COL_FLOW_END_MS},BYTES,{COL_LABEL},{COL_ATTACK}"
        );
        let csv = format!("{header}\n1.2.3.4,5.6.7.8,1000,2000,42,1,Exploits\n");
        let off = parse_csv_reader(csv.as_bytes(), Schema::V3, false).unwrap();
        assert_eq!(off.feature_names, vec!["BYTES"]);
        assert_eq!(off.records[0].features, vec![42.0]);
        assert!(off.records[0].is_attack);
        assert_eq!(off.records[0].attack_type, "Exploits");

        let on = parse_csv_reader(csv.as_bytes(), Schema::V3, true).unwrap();
        assert_eq!(on.feature_dim(), 3);
        assert_eq!(on.records[0].features, vec![1000.0, 2000.0, 42.0]);
    }

    #[test]
    fn empty_and_bad_cells_zero_filled_and_counted() {
        let csv = format!(
            "{}\n10.0.0.1,10.0.0.2,,NaN,7,0,\n",
            v2_header(3).replace("FEAT_0,FEAT_1,FEAT_2", "A,B,C")
        );
        let parsed = parse_csv_reader(csv.as_bytes(), Schema::V2, false).unwrap();
        assert_eq!(parsed.records[0].features, vec![0.0, 0.0, 7.0]);
        assert_eq!(parsed.zero_filled, 2);
    }

    #[test]
    fn missing_required_column_names_it() {
        let csv = format!("{COL_SRC_IP},{COL_DST_IP},X,{COL_LABEL}\n1,2,3,0\n");
        let err = parse_csv_reader(csv.as_bytes(), Schema::V2, false).unwrap_err();
        match err {
            Error::MissingColumn { column } => assert_eq!(column, COL_ATTACK),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn v3_requires_timestamp_columns() {
        let csv = format!("{}\n", v2_header(2));
        let err = parse_csv_reader(csv.as_bytes(), Schema::V3, false).unwrap_err();
        match err {
            Error::MissingColumn { column } => assert_eq!(column, COL_FLOW_START_MS),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn label_semantics() {
        let header = v2_header(1).replace("FEAT_0", "F");
        let csv = format!(
            "{header}\n\
             a,b,1,0,Benign\n\
             a,b,1,1,\n\
             a,b,1,0,Scan\n\
             a,b,1,1,Scan\n"
        );
        let parsed = parse_csv_reader(csv.as_bytes(), Schema::V2, false).unwrap();
        let r = &parsed.records;
        assert!(!r[0].is_attack);
        assert_eq!(r[0].attack_type, "");
        assert!(r[1].is_attack);
        assert_eq!(r[1].attack_type, "unknown");
        assert!(r[2].is_attack);
        assert_eq!(r[2].attack_type, "Scan");
        assert!(r[3].is_attack);
        for rec in r {
            assert_eq!(rec.is_attack, !rec.attack_type.is_empty());
        }
    }

    #[test]
    fn csv_roundtrip_is_identity() {
        let records = vec![
            FlowRecord::benign("10.0.0.1", "10.0.0.2", vec![1.5, -3.25, 0.1 + 0.2]),
            FlowRecord::attack("10.0.0.3", "10.0.0.1", vec![9.0e-7, 2.0, 1e12], "scan"),
        ];
        let names: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        let mut buf = Vec::new();
        write_csv_writer(&mut buf, &records, &names).unwrap();
        let parsed = parse_csv_reader(buf.as_slice(), Schema::V2, false).unwrap();
        assert_eq!(parsed.records, records);
        assert_eq!(parsed.feature_names, names);
        assert_eq!(parsed.zero_filled, 0);
    }

    #[test]
    fn host_count_and_ratio() {
        let header = v2_header(1).replace("FEAT_0", "F");
        let csv = format!("{header}\na,b,1,0,\nb,c,1,1,Scan\na,c,1,0,\na,b,1,0,\n");
        let parsed = parse_csv_reader(csv.as_bytes(), Schema::V2, false).unwrap();
        assert_eq!(parsed.host_count(), 3);
        assert!((parsed.attack_ratio() - 0.25).abs() < 1e-12);
    }
}
