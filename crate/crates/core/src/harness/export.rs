//! Long-format plot data across run records.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::Scenario;
use super::fmt_f64;
use super::run::{PhaseRecord, RunRecord};
use crate::error::{Error, Result};
use crate::evalattack::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scenario: Scenario,
    pub method: String,
    pub sparsity: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    /// Median of `value` over all seeds of the (scenario, method, sparsity, metric) group.
    pub median: f64,
}

/// Rows worth plotting: unlearned cells plus the last step of each successive run.
fn exported_phases(record: &RunRecord) -> Vec<&PhaseRecord> {
    let mut last: BTreeMap<(String, u64), usize> = BTreeMap::new();
    for p in record.phases.iter().filter(|p| p.phase == "successive") {
        let e = last.entry((p.method.clone(), p.sparsity.to_bits())).or_default();
        *e = (*e).max(p.step);
    }
    record
        .phases
        .iter()
        .filter(|p| p.phase != "successive" || last[&(p.method.clone(), p.sparsity.to_bits())] == p.step)
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flattens records into metric rows with per-group medians.
///
/// Records must come from the same source version and architecture.
pub fn export_plotdata(records: &[RunRecord]) -> Result<Vec<PlotRow>> {
    let first = records.first().ok_or(Error::EmptyData("record list"))?;
    let arch = |r: &RunRecord| {
        let mut m = r.config.model;
        m.seed = 0;
        (m, r.source_version.clone())
    };
    for r in records {
        if arch(r) != arch(first) {
            return Err(Error::Format(format!(
                "record {} has a different model or source version than {}",
                r.config_hash, first.config_hash
            )));
        }
    }
    let mut rows = Vec::new();
    for r in records {
        for p in exported_phases(r) {
            for (metric, value) in p.metrics.named_values() {
                rows.push(PlotRow {
                    scenario: r.config.scenario,
                    method: p.method.clone(),
                    sparsity: p.sparsity,
                    seed: r.config.seed,
                    metric: metric.into(),
                    value,
                    median: f64::NAN,
                });
            }
        }
    }
    type Key = (String, String, u64, String);
    let key = |row: &PlotRow| -> Key {
        (
            format!("{:?}", row.scenario),
            row.method.clone(),
            row.sparsity.to_bits(),
            row.metric.clone(),
        )
    };
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        groups.entry(key(row)).or_default().push(row.value);
    }
    let medians: BTreeMap<Key, f64> = groups.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect();
    for row in &mut rows {
        row.median = medians[&key(row)];
    }
    rows.sort_by(|a, b| {
        key(a)
            .cmp(&key(b))
            .then(a.seed.cmp(&b.seed))
            .then(a.value.total_cmp(&b.value))
    });
    Ok(rows)
}

pub fn write_plotdata<W: Write>(rows: &[PlotRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["scenario", "method", "sparsity", "seed", "metric", "value", "median"])?;
    for r in rows {
        let scenario = serde_json::to_value(r.scenario)?;
        wr.write_record([
            scenario.as_str().unwrap_or_default().to_string(),
            r.method.clone(),
            fmt_f64(r.sparsity),
            r.seed.to_string(),
            r.metric.clone(),
            fmt_f64(r.value),
            fmt_f64(r.median),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_plotdata<R: Read>(r: R) -> Result<Vec<PlotRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rebuilds the metrics of one (scenario, method, sparsity, seed) cell.
pub fn metrics_from_rows(rows: &[PlotRow], scenario: Scenario, method: &str, sparsity: f64, seed: u64) -> Result<MetricsReport> {
    let get = |name: &str| {
        rows.iter()
            .find(|r| {
                r.scenario == scenario
                    && r.method == method
                    && r.sparsity.to_bits() == sparsity.to_bits()
                    && r.seed == seed
                    && r.metric == name
            })
            .map(|r| r.value)
            .ok_or_else(|| Error::Format(format!("missing {name} for {method} at S={sparsity}, seed {seed}")))
    };
    Ok(MetricsReport {
        forget_acc: get("forget_acc")?,
        retain_acc: get("retain_acc")?,
        test_acc: get("test_acc")?,
        mia_score: get("mia")?,
        params_changed_fraction: get("params_changed_fraction")?,
        wall_time: get("wall_time")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use std::path::PathBuf;

    fn record(seed: u64, method: &str, v: f64) -> RunRecord {
        let config = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let metrics = MetricsReport {
            forget_acc: v,
            retain_acc: 1.0 - v / 3.0,
            test_acc: 0.1 + 0.2,
            mia_score: 0.5 + v * 1e-17,
            params_changed_fraction: v / 7.0,
            wall_time: 1.0 / 3.0,
        };
        RunRecord {
            config_hash: config.hash(),
            source_version: "v".into(),
            config,
            run_dir: PathBuf::new(),
            phases: vec![PhaseRecord {
                phase: "unlearn".into(),
                method: method.into(),
                sparsity: 0.9,
                step: 0,
                forget_ids: vec![],
                metrics,
                model_file: None,
                mask_file: None,
            }],
            relearn: vec![],
            trajectory_file: None,
            timings: vec![],
            error: None,
        }
    }

    #[test]
    fn single_record_has_one_row_per_metric() {
        let rows = export_plotdata(&[record(0, "GA", 0.4)]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.value == r.median));
    }

    #[test]
    fn medians_per_group_and_exact_parse_back() {
        let mut recs = Vec::new();
        for seed in 0..5 {
            for (m, base) in [("GA", 0.1), ("SO", 0.6)] {
                recs.push(record(seed, m, base + seed as f64 / 9.0));
            }
        }
        let rows = export_plotdata(&recs).unwrap();
        assert_eq!(rows.len(), 60);
        let ga_forget: Vec<&PlotRow> = rows.iter().filter(|r| r.method == "GA" && r.metric == "forget_acc").collect();
        assert!(ga_forget.iter().all(|r| r.median == 0.1 + 2.0 / 9.0));
        let mut buf = Vec::new();
        write_plotdata(&rows, &mut buf).unwrap();
        let back = read_plotdata(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        for r in &recs {
            let m = metrics_from_rows(&back, Scenario::Single, &r.phases[0].method, 0.9, r.config.seed).unwrap();
            assert_eq!(m, r.phases[0].metrics);
        }
    }

    #[test]
    fn mixed_architectures_rejected() {
        let a = record(0, "GA", 0.1);
        let mut b = record(1, "GA", 0.2);
        b.config.model.d_ff = 32;
        assert!(export_plotdata(&[a, b]).is_err());
        assert!(export_plotdata(&[]).is_err());
    }
}
