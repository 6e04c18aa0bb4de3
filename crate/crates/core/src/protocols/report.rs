use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::algorithms::{Family, RunRecord};

pub const REPORT_HEADER: &str = "setting,algorithm,protocol,test_modality,mean_auc,std_auc,n_runs";
/// Label of rows that average over held-out modalities.
pub const AVERAGE_MODALITY: &str = "avg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    /// Algorithm name, or a family name (`MML`, `DG`) for family rows.
    pub algorithm: String,
    pub protocol: String,
    /// Held-out modality index, or `avg`.
    pub test_modality: String,
    pub mean_auc: f64,
    /// Population standard deviation over seeds. Family rows report the
    /// population standard deviation of their algorithms' means.
    pub std_auc: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
}

/// `(mean, population std)`; `(NaN, NaN)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type CellKey = (String, String, String);

/// Mean and std of the selected runs' test AUC per (setting, algorithm,
/// protocol, held-out modality), plus an `avg` row per algorithm (over seeds
/// of the per-seed mean across held-out modalities) and unweighted family
/// averages. Rows are sorted lexicographically and do not depend on the
/// order of `records`.
pub fn aggregate_report(records: &[RunRecord]) -> BenchmarkReport {
    // (setting, algorithm, protocol) -> test modality -> seed -> auc
    let mut cells: BTreeMap<CellKey, BTreeMap<usize, BTreeMap<usize, f64>>> = BTreeMap::new();
    let mut families: BTreeMap<String, Family> = BTreeMap::new();
    for r in records.iter().filter(|r| r.selected) {
        let Some(auc) = r.final_test_auc else { continue };
        let key = (r.setting.clone(), r.algorithm.name().to_string(), r.protocol.as_str().to_string());
        families.insert(r.algorithm.name().to_string(), r.family);
        cells
            .entry(key)
            .or_default()
            .entry(r.test_modality)
            .or_default()
            .insert(r.seed, auc);
    }

    let mut rows = Vec::new();
    // (setting, family, protocol, test modality) -> algorithm means
    let mut family_means: BTreeMap<(String, String, String, String), Vec<(f64, usize)>> = BTreeMap::new();
    for ((setting, algorithm, protocol), by_test) in &cells {
        let mut push = |test: String, values: &[f64]| {
            let (mean, std) = mean_std(values);
            let family = families[algorithm].as_str().to_string();
            family_means
                .entry((setting.clone(), family, protocol.clone(), test.clone()))
                .or_default()
                .push((mean, values.len()));
            rows.push(ReportRow {
                setting: setting.clone(),
                algorithm: algorithm.clone(),
                protocol: protocol.clone(),
                test_modality: test,
                mean_auc: mean,
                std_auc: std,
                n_runs: values.len(),
            });
        };
        let mut per_seed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (test, seeds) in by_test {
            let values: Vec<f64> = seeds.values().copied().collect();
            push(test.to_string(), &values);
            for (&seed, &v) in seeds {
                per_seed.entry(seed).or_default().push(v);
            }
        }
        // only seeds with a selected run for every held-out modality enter the average
        let averages: Vec<f64> = per_seed
            .values()
            .filter(|v| v.len() == by_test.len())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        push(AVERAGE_MODALITY.to_string(), &averages);
    }
    for ((setting, family, protocol, test), means) in family_means {
        let values: Vec<f64> = means.iter().map(|m| m.0).collect();
        let (mean, std) = mean_std(&values);
        rows.push(ReportRow {
            setting,
            algorithm: family,
            protocol,
            test_modality: test,
            mean_auc: mean,
            std_auc: std,
            n_runs: means.iter().map(|m| m.1).sum(),
        });
    }
    rows.sort_by(|a, b| {
        (&a.setting, &a.algorithm, &a.protocol, &a.test_modality).cmp(&(
            &b.setting,
            &b.algorithm,
            &b.protocol,
            &b.test_modality,
        ))
    });
    BenchmarkReport { rows }
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{}",
                r.setting, r.algorithm, r.protocol, r.test_modality, r.mean_auc, r.std_auc, r.n_runs
            );
        }
        out
    }

    pub fn find(&self, setting: &str, algorithm: &str, protocol: &str, test_modality: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.setting == setting && r.algorithm == algorithm && r.protocol == protocol && r.test_modality == test_modality
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{Algorithm, Checkpoint};
    use crate::protocols::Protocol;

    fn rec(alg: Algorithm, test: usize, seed: usize, auc: f64) -> RunRecord {
        RunRecord {
            run_id: format!("{alg}-{test}-{seed}"),
            setting: "weak".into(),
            algorithm: alg,
            family: alg.family(),
            protocol: Protocol::Oracle,
            seed,
            trial: 0,
            test_modality: test,
            hparams: Default::default(),
            checkpoints: vec![Checkpoint {
                step: 1,
                tm_val_auc: 0.5,
                loo_val_auc: None,
                oracle_val_auc: Some(0.5),
            }],
            final_test_auc: Some(auc),
            selected: true,
            wall_ms: None,
            notes: vec![],
            failure: None,
        }
    }

    #[test]
    fn two_seeds_give_population_std() {
        let report = aggregate_report(&[rec(Algorithm::Erm, 0, 0, 0.6), rec(Algorithm::Erm, 0, 1, 0.7)]);
        let row = report.find("weak", "erm", "oracle", "0").unwrap();
        assert!((row.mean_auc - 0.65).abs() < 1e-12);
        assert!((row.std_auc - 0.05).abs() < 1e-12);
        assert_eq!(row.n_runs, 2);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let report = aggregate_report(&[rec(Algorithm::Irm, 1, 0, 0.61)]);
        assert_eq!(report.find("weak", "irm", "oracle", "1").unwrap().std_auc, 0.0);
    }

    #[test]
    fn family_row_is_unweighted_mean_of_algorithm_means() {
        let records = vec![
            rec(Algorithm::Erm, 0, 0, 0.6),
            rec(Algorithm::Erm, 0, 1, 0.8),
            rec(Algorithm::Erm, 0, 2, 0.7),
            rec(Algorithm::Irm, 0, 0, 0.5),
            rec(Algorithm::Concat, 0, 0, 0.55),
        ];
        let report = aggregate_report(&records);
        let dg = report.find("weak", "DG", "oracle", "0").unwrap();
        assert!((dg.mean_auc - 0.6).abs() < 1e-12);
        assert_eq!(dg.n_runs, 4);
        let mml = report.find("weak", "MML", "oracle", "0").unwrap();
        assert!((mml.mean_auc - 0.55).abs() < 1e-12);
    }

    #[test]
    fn average_row_averages_modalities_per_seed() {
        let records = vec![
            rec(Algorithm::Erm, 0, 0, 0.6),
            rec(Algorithm::Erm, 1, 0, 0.8),
            rec(Algorithm::Erm, 0, 1, 0.5),
            rec(Algorithm::Erm, 1, 1, 0.5),
        ];
        let row = aggregate_report(&records).find("weak", "erm", "oracle", "avg").unwrap().clone();
        assert!((row.mean_auc - 0.6).abs() < 1e-12);
        assert!((row.std_auc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unselected_and_failed_runs_are_ignored() {
        let mut a = rec(Algorithm::Erm, 0, 0, 0.9);
        a.selected = false;
        let mut b = rec(Algorithm::Erm, 0, 1, 0.9);
        b.final_test_auc = None;
        let report = aggregate_report(&[a, b, rec(Algorithm::Erm, 0, 2, 0.6)]);
        assert_eq!(report.find("weak", "erm", "oracle", "0").unwrap().n_runs, 1);
    }

    #[test]
    fn empty_input_gives_header_only_csv() {
        assert_eq!(aggregate_report(&[]).to_csv(), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn order_of_records_does_not_matter() {
        let mut records = vec![
            rec(Algorithm::Erm, 0, 0, 0.6),
            rec(Algorithm::Irm, 1, 0, 0.7),
            rec(Algorithm::Concat, 0, 1, 0.55),
            rec(Algorithm::Erm, 1, 1, 0.65),
        ];
        let a = aggregate_report(&records).to_csv();
        records.reverse();
        assert_eq!(a, aggregate_report(&records).to_csv());
    }
}
