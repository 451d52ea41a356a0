//! Result rows, their CSV files, and the paired base-vs-FNB comparison.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::folds::Strategy;
use super::stats::{ks_normality, mean_sd, wilcoxon_signed_rank};
use crate::arch::Topology;
use crate::error::{Error, Result};

/// Held-out performance of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Topology id, or the name of a reference scorer such as `oracle`.
    pub topology: String,
    pub strategy: Strategy,
    pub subject: u32,
    pub fold: String,
    /// Epoch accuracy in percent.
    pub accuracy: f64,
    /// Nats.
    pub cross_entropy: f64,
    pub test_epochs: usize,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub topology: String,
    pub strategy: Strategy,
    pub subject: u32,
    pub fold: String,
    pub blocks: u32,
    pub time_s: f64,
    pub accuracy: f64,
    pub bitrate: f64,
}

/// Base topology and its fuzzy-block counterpart.
pub const PAIRS: [(Topology, Topology); 3] = [
    (Topology::LeNet, Topology::LeNetFnb),
    (Topology::EegTcnet, Topology::EegTcnetFnb),
    (Topology::EegTcnetLstm, Topology::EegTcfnet),
];

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub topology: Topology,
    pub n: usize,
    pub mean_accuracy: Option<f64>,
    pub sd_accuracy: Option<f64>,
    pub mean_cross_entropy: Option<f64>,
    /// `subject:mean` for every subject, `;`-separated.
    pub per_subject: String,
    pub paired_with: Topology,
    /// Mean of (FNB − base) over matched folds.
    pub fnb_delta: Option<f64>,
    pub wilcoxon_w: Option<f64>,
    pub wilcoxon_n: Option<usize>,
    pub p_value: Option<f64>,
    pub status: String,
    /// Config hashes of the contributing rows, `;`-separated.
    pub config_hash: String,
}

fn partner(t: Topology) -> Topology {
    PAIRS
        .iter()
        .find_map(|&(b, f)| {
            if b == t {
                Some(f)
            } else if f == t {
                Some(b)
            } else {
                None
            }
        })
        .expect("every topology is paired")
}

type Key = (u32, String);

fn hashes<'a>(records: impl Iterator<Item = &'a ResultRecord>) -> String {
    let set: std::collections::BTreeSet<&str> = records.map(|r| r.config_hash.as_str()).collect();
    set.into_iter().collect::<Vec<_>>().join(";")
}

/// Rejects result sets that contain the same (topology, strategy, fold) twice.
pub fn check_unique(records: &[ResultRecord]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert((r.topology.as_str(), r.strategy, r.subject, r.fold.as_str())) {
            return Err(Error::invalid(format!(
                "duplicate result for {} {} fold {}",
                r.topology, r.strategy, r.fold
            )));
        }
    }
    Ok(())
}

fn by_fold(
    records: &[ResultRecord],
    strategy: Strategy,
    t: Topology,
) -> BTreeMap<Key, &ResultRecord> {
    records
        .iter()
        .filter(|r| r.strategy == strategy && r.topology == t.name())
        .map(|r| ((r.subject, r.fold.clone()), r))
        .collect()
}

/// Mean/SD per topology and Wilcoxon p-values per base/FNB pair, for both
/// strategies (6 rows each). Topologies without results are kept as rows
/// marked `incomplete`.
pub fn compare_report(records: &[ResultRecord]) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        for &(base, fnb) in &PAIRS {
            let b = by_fold(records, strategy, base);
            let f = by_fold(records, strategy, fnb);
            let shared: Vec<&Key> = b.keys().filter(|k| f.contains_key(*k)).collect();
            let diffs: Vec<f64> = shared
                .iter()
                .map(|k| f[*k].accuracy - b[*k].accuracy)
                .collect();
            let (test, note) = if b.is_empty() || f.is_empty() {
                (None, "incomplete".to_string())
            } else if shared.is_empty() {
                (None, "no matched folds".to_string())
            } else {
                let fa: Vec<f64> = shared.iter().map(|k| f[*k].accuracy).collect();
                let ba: Vec<f64> = shared.iter().map(|k| b[*k].accuracy).collect();
                match wilcoxon_signed_rank(&fa, &ba) {
                    Ok(w) if w.n < 5 => (Some(w), format!("ok (only {} non-zero pairs)", w.n)),
                    Ok(w) => (Some(w), "ok".to_string()),
                    Err(Error::Undefined(msg)) => (None, format!("p undefined: {msg}")),
                    Err(e) => return Err(e),
                }
            };
            let delta = (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);
            for (t, own) in [(base, &b), (fnb, &f)] {
                let acc: Vec<f64> = own.values().map(|r| r.accuracy).collect();
                let ce: Vec<f64> = own.values().map(|r| r.cross_entropy).collect();
                let stats = mean_sd(&acc).ok();
                let mut subjects: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
                for r in own.values() {
                    subjects.entry(r.subject).or_default().push(r.accuracy);
                }
                let per_subject = subjects
                    .iter()
                    .map(|(s, v)| format!("{}:{}", s + 1, v.iter().sum::<f64>() / v.len() as f64))
                    .collect::<Vec<_>>()
                    .join(";");
                rows.push(CompareRow {
                    strategy,
                    topology: t,
                    n: acc.len(),
                    mean_accuracy: stats.map(|s| s.0),
                    sd_accuracy: stats.map(|s| s.1),
                    mean_cross_entropy: mean_sd(&ce).ok().map(|s| s.0),
                    per_subject,
                    paired_with: partner(t),
                    fnb_delta: delta,
                    wilcoxon_w: test.map(|w| w.w),
                    wilcoxon_n: test.map(|w| w.n),
                    p_value: test.map(|w| w.p),
                    status: if own.is_empty() {
                        "incomplete".to_string()
                    } else {
                        note.clone()
                    },
                    config_hash: hashes(own.values().copied()),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub strategy: Strategy,
    pub test: String,
    pub subject: String,
    pub statistic: Option<f64>,
    pub n: usize,
    pub p_value: Option<f64>,
    pub note: String,
    pub config_hash: String,
}

/// KS normality of every topology's accuracies and a Wilcoxon test per pair.
pub fn stats_report(records: &[ResultRecord]) -> Result<Vec<StatsRow>> {
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        for t in Topology::ALL {
            let own = by_fold(records, strategy, t);
            let acc: Vec<f64> = own.values().map(|r| r.accuracy).collect();
            if acc.is_empty() {
                continue;
            }
            let (statistic, p_value, note) = match ks_normality(&acc) {
                Ok(k) => (Some(k.d), Some(k.p), "ok".to_string()),
                Err(e) => (None, None, e.to_string()),
            };
            rows.push(StatsRow {
                strategy,
                test: "ks_normality".into(),
                subject: t.to_string(),
                statistic,
                n: acc.len(),
                p_value,
                note,
                config_hash: hashes(own.values().copied()),
            });
        }
        for row in compare_report(records)?
            .into_iter()
            .filter(|r| r.strategy == strategy)
        {
            if PAIRS.iter().any(|&(b, _)| b == row.topology) {
                rows.push(StatsRow {
                    strategy,
                    test: "wilcoxon".into(),
                    subject: format!("{} vs {}", row.topology, row.paired_with),
                    statistic: row.wilcoxon_w,
                    n: row.wilcoxon_n.unwrap_or(0),
                    p_value: row.p_value,
                    note: row.status,
                    config_hash: row.config_hash,
                });
            }
        }
    }
    Ok(rows)
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_csv_string(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: Topology, strategy: Strategy, subject: u32, fold: &str, acc: f64) -> ResultRecord {
        ResultRecord {
            topology: t.to_string(),
            strategy,
            subject,
            fold: fold.into(),
            accuracy: acc,
            cross_entropy: 0.3,
            test_epochs: 100,
            config_hash: "h".into(),
            seed: 1,
        }
    }

    #[test]
    fn six_rows_per_strategy_with_pairs() {
        let mut rs = Vec::new();
        for (i, acc) in [80.0, 82.0, 84.0, 86.0, 88.0].iter().enumerate() {
            for t in Topology::ALL {
                let bump = if t.has_fnb() { 1.0 + i as f64 } else { 0.0 };
                rs.push(rec(t, Strategy::Subject, i as u32, "heldout", acc + bump));
            }
        }
        let rows = compare_report(&rs).unwrap();
        assert_eq!(rows.len(), 12);
        let subj: Vec<_> = rows
            .iter()
            .filter(|r| r.strategy == Strategy::Subject)
            .collect();
        assert_eq!(subj.len(), 6);
        let lenet = subj.iter().find(|r| r.topology == Topology::LeNet).unwrap();
        assert!((lenet.mean_accuracy.unwrap() - 84.0).abs() < 1e-9);
        // sample SD of 80, 82, 84, 86, 88
        assert!((lenet.sd_accuracy.unwrap() - 10f64.sqrt()).abs() < 1e-9);
        assert!((lenet.fnb_delta.unwrap() - 3.0).abs() < 1e-9);
        assert!((lenet.p_value.unwrap() - 2.0 / 32.0).abs() < 1e-12);
        assert!(rows
            .iter()
            .filter(|r| r.strategy == Strategy::Session)
            .all(|r| r.status == "incomplete"));
    }

    #[test]
    fn identical_pair_reports_undefined() {
        let rs: Vec<_> = Topology::ALL
            .iter()
            .flat_map(|&t| (0..5).map(move |s| rec(t, Strategy::Session, s, "f", 90.0)))
            .collect();
        let rows = compare_report(&rs).unwrap();
        let r = rows
            .iter()
            .find(|r| r.strategy == Strategy::Session && r.topology == Topology::EegTcfnet)
            .unwrap();
        assert!(
            r.p_value.is_none() && r.status.contains("undefined"),
            "{r:?}"
        );
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let rs = vec![rec(
            Topology::EegTcfnet,
            Strategy::Session,
            0,
            "s01-session1",
            97.25,
        )];
        write_csv(&p, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("topology,strategy,subject,fold,accuracy,cross_entropy"));
        assert!(text.contains("eeg-tcfnet,session,0,s01-session1,97.25"));
        assert_eq!(read_csv::<ResultRecord>(&p).unwrap(), rs);
    }

    #[test]
    fn duplicates_rejected() {
        let r = rec(Topology::LeNet, Strategy::Session, 0, "s01-session1", 90.0);
        assert!(check_unique(&[r.clone(), r]).is_err());
    }
}
