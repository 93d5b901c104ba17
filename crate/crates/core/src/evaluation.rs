//! Classification metrics, the OaP aggregate and PCA projection exports.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{truth} truth labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} outside [0, {m})")]
    LabelOutOfRange { label: usize, m: usize },
    #[error("confusion matrix is not square")]
    NonSquare,
    #[error("registry mismatch: {0}")]
    RegistryMismatch(String),
    #[error("cannot project {d}-dimensional rows onto {out_dims} dimensions with n={n}")]
    BadProjection { n: usize, d: usize, out_dims: usize },
    #[error("ragged input at row {0}")]
    Ragged(usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report format: {0}")]
    Format(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

pub type Confusion = Vec<Vec<u64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: String,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Single-label micro F1; exported only, not part of OaP.
    pub micro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are truth, columns are predictions.
    pub confusion: Confusion,
}

/// Entry `(i, j)` counts rows with truth `i` predicted as `j`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], m: usize) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut conf = vec![vec![0u64; m]; m];
    for (&t, &p) in truth.iter().zip(pred) {
        for label in [t, p] {
            if label >= m {
                return Err(EvalError::LabelOutOfRange { label, m });
            }
        }
        conf[t][p] += 1;
    }
    Ok(conf)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for a square confusion matrix. Macro averages run over classes
/// with nonzero support; zero denominators give 0.
pub fn compute_metrics(classifier: &str, confusion: &Confusion) -> Result<EvalReport> {
    let m = confusion.len();
    if confusion.iter().any(|row| row.len() != m) {
        return Err(EvalError::NonSquare);
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..m).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..m)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let recall = ratio(tp, support);
            let precision = ratio(tp, predicted);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                recall,
                precision,
                f1,
                support,
            }
        })
        .collect();
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let macro_mean = |f: fn(&ClassMetrics) -> f64| {
        if supported.is_empty() {
            0.0
        } else {
            supported.iter().map(|c| f(c)).sum::<f64>() / supported.len() as f64
        }
    };
    let accuracy = ratio(trace, total);
    Ok(EvalReport {
        classifier: classifier.to_string(),
        accuracy,
        macro_recall: macro_mean(|c| c.recall),
        macro_f1: macro_mean(|c| c.f1),
        micro_f1: accuracy,
        per_class,
        confusion: confusion.clone(),
    })
}

pub fn evaluate(classifier: &str, truth: &[usize], pred: &[usize], m: usize) -> Result<EvalReport> {
    compute_metrics(classifier, &confusion_matrix(truth, pred, m)?)
}

impl EvalReport {
    /// The metric set summed by [`oap`], in a fixed order.
    pub fn oap_metrics(&self) -> [f64; 3] {
        [self.accuracy, self.macro_recall, self.macro_f1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OaPInput {
    pub ssp_reports: Vec<EvalReport>,
    pub origin_reports: Vec<EvalReport>,
}

/// `Σ_r Σ_t SSP(r,t) − Origin(r,t)` over accuracy, macro recall and macro F1.
/// Classifiers are matched by name and summed in `ssp_reports` order.
pub fn oap(input: &OaPInput) -> Result<f64> {
    let names = |reports: &[EvalReport]| -> Result<BTreeSet<String>> {
        let set: BTreeSet<String> = reports.iter().map(|r| r.classifier.clone()).collect();
        if set.len() != reports.len() {
            return Err(EvalError::RegistryMismatch(
                "duplicate classifier name".into(),
            ));
        }
        Ok(set)
    };
    let ssp = names(&input.ssp_reports)?;
    let origin = names(&input.origin_reports)?;
    if ssp != origin {
        let only: Vec<_> = ssp.symmetric_difference(&origin).cloned().collect();
        return Err(EvalError::RegistryMismatch(format!(
            "classifiers not in both lists: {}",
            only.join(", ")
        )));
    }
    let mut total = 0.0;
    for s in &input.ssp_reports {
        let o = input
            .origin_reports
            .iter()
            .find(|o| o.classifier == s.classifier)
            .expect("name sets are equal");
        for (a, b) in s.oap_metrics().iter().zip(o.oap_metrics()) {
            total += a - b;
        }
    }
    Ok(total)
}

/// Classes whose share of `counts` is at most `max_share`.
pub fn rare_classes(counts: &[usize], max_share: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    (0..counts.len())
        .filter(|&c| n > 0 && counts[c] as f64 / n as f64 <= max_share)
        .collect()
}

/// Mean per-class recall over `classes`, averaged again over `reports`.
pub fn mean_recall_over(reports: &[EvalReport], classes: &[usize]) -> f64 {
    if reports.is_empty() || classes.is_empty() {
        return 0.0;
    }
    let per_report: f64 = reports
        .iter()
        .map(|r| classes.iter().map(|&c| r.per_class[c].recall).sum::<f64>() / classes.len() as f64)
        .sum();
    per_report / reports.len() as f64
}

/// Centers the columns and projects onto the leading covariance eigenvectors.
/// Each eigenvector's largest-magnitude component is made positive.
pub fn pca_project(vectors: &[Vec<f64>], out_dims: usize) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if n < 2 || out_dims == 0 || out_dims > d {
        return Err(EvalError::BadProjection { n, d, out_dims });
    }
    if let Some(i) = vectors.iter().position(|v| v.len() != d) {
        return Err(EvalError::Ragged(i));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(d, out_dims);
    for (k, &idx) in order.iter().take(out_dims).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(k, &(v * sign));
    }
    let proj = x * basis;
    Ok((0..n)
        .map(|i| proj.row(i).iter().copied().collect())
        .collect())
}

pub fn reports_to_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

pub fn reports_from_json(s: &str) -> Result<Vec<EvalReport>> {
    serde_json::from_str(s).map_err(|e| EvalError::Format(e.to_string()))
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    reports_from_json(&fs::read_to_string(path)?)
}

/// One row per report: `path,classifier,accuracy,macro_recall,macro_f1,micro_f1`.
pub fn reports_to_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "path",
        "classifier",
        "accuracy",
        "macro_recall",
        "macro_f1",
        "micro_f1",
    ];
    w.write_record(header).expect("in-memory write");
    for (path, r) in rows {
        w.write_record([
            path.to_string(),
            r.classifier.clone(),
            r.accuracy.to_string(),
            r.macro_recall.to_string(),
            r.macro_f1.to_string(),
            r.micro_f1.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// `p0,p1,...,label` with class names in the label column.
pub fn projection_to_csv(coords: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> String {
    let dims = coords.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dims).map(|j| format!("p{j}")).collect();
    header.push("label".into());
    w.write_record(&header).expect("in-memory write");
    for (row, &label) in coords.iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(class_names[label].clone());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(name: &str, acc: f64, rec: f64, f1: f64) -> EvalReport {
        EvalReport {
            classifier: name.into(),
            accuracy: acc,
            macro_recall: rec,
            macro_f1: f1,
            micro_f1: acc,
            per_class: vec![],
            confusion: vec![],
        }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap(),
            vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]
        );
        assert_eq!(
            confusion_matrix(&[0, 1], &[1, 0], 2).unwrap(),
            vec![vec![0, 1], vec![1, 0]]
        );
        assert_eq!(
            confusion_matrix(&[], &[], 2).unwrap(),
            vec![vec![0, 0], vec![0, 0]]
        );
        assert!(matches!(
            confusion_matrix(&[0], &[], 2),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_matrix(&[0], &[2], 2),
            Err(EvalError::LabelOutOfRange { label: 2, m: 2 })
        ));
    }

    #[test]
    fn metric_examples() {
        let r = compute_metrics("x", &vec![vec![3, 0], vec![0, 4]]).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        // all predicted class 0 on balanced truth
        let r = compute_metrics("x", &vec![vec![5, 0], vec![5, 0]]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.macro_recall, 0.5);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);

        let r = compute_metrics("x", &vec![vec![2, 1], vec![1, 2]]).unwrap();
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!(r
            .per_class
            .iter()
            .all(|c| (c.recall - 2.0 / 3.0).abs() < 1e-15));

        assert!(matches!(
            compute_metrics("x", &vec![vec![1, 2]]),
            Err(EvalError::NonSquare)
        ));
    }

    #[test]
    fn zero_support_class_is_skipped_in_macro() {
        let r = compute_metrics("x", &vec![vec![2, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]).unwrap();
        assert_eq!(r.per_class[1].support, 0);
        assert!((r.macro_recall - (1.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn oap_examples() {
        let a = vec![report("knn", 0.8, 0.7, 0.6)];
        let b = vec![report("knn", 0.7, 0.6, 0.5)];
        let same = OaPInput {
            ssp_reports: a.clone(),
            origin_reports: a.clone(),
        };
        assert_eq!(oap(&same).unwrap(), 0.0);
        let v = oap(&OaPInput {
            ssp_reports: a.clone(),
            origin_reports: b.clone(),
        })
        .unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        let back = oap(&OaPInput {
            ssp_reports: b,
            origin_reports: a.clone(),
        })
        .unwrap();
        assert_eq!(back, -v);
        let other = vec![report("nb", 0.1, 0.1, 0.1)];
        assert!(matches!(
            oap(&OaPInput {
                ssp_reports: a,
                origin_reports: other
            }),
            Err(EvalError::RegistryMismatch(_))
        ));
    }

    #[test]
    fn rare_class_selection() {
        assert_eq!(rare_classes(&[90, 6, 4], 0.05), vec![2]);
        assert_eq!(
            rare_classes(&[417, 181, 111, 79, 60, 48, 40, 34, 30], 0.05),
            vec![5, 6, 7, 8]
        );
    }

    #[test]
    fn pca_collinear_and_centered() {
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, 2.0 * i as f64 + 1.0])
            .collect();
        let p = pca_project(&pts, 2).unwrap();
        for row in &p {
            assert!(row[1].abs() <= 1e-9);
        }
        let mean0: f64 = p.iter().map(|r| r[0]).sum::<f64>() / 6.0;
        assert!(mean0.abs() < 1e-12);
        // sign convention: direction (1,2)/sqrt5 has a positive lead, so the last point projects positive
        assert!(p[5][0] > 0.0);
    }

    #[test]
    fn pca_degenerate_rows_give_zeros() {
        let pts = vec![vec![3.0, -1.0, 2.0]; 5];
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.iter().flatten().all(|&v| v == 0.0));
        assert!(pca_project(&pts[..1], 1).is_err());
        assert!(pca_project(&pts, 4).is_err());
    }

    #[test]
    fn projection_csv_shape() {
        let s = projection_to_csv(&[vec![0.5, -1.0]], &[1], &["a".into(), "b".into()]);
        assert_eq!(s, "p0,p1,label\n0.5,-1,b\n");
    }

    #[test]
    fn report_json_round_trip() {
        let r = evaluate("knn", &[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let back = reports_from_json(&reports_to_json(&[r.clone()])).unwrap();
        assert_eq!(back, vec![r]);
    }

    fn permute(conf: &Confusion, perm: &[usize]) -> Confusion {
        let m = conf.len();
        let mut out = vec![vec![0; m]; m];
        for i in 0..m {
            for j in 0..m {
                out[perm[i]][perm[j]] = conf[i][j];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn accuracy_matches_direct_count(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 0..60),
        ) {
            let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = evaluate("x", &truth, &pred, 5).unwrap();
            let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
            let direct = if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 };
            prop_assert_eq!(r.accuracy, direct);
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total as usize, truth.len());
            for v in [r.accuracy, r.macro_recall, r.macro_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn class_permutation_keeps_macro_metrics(
            conf in proptest::collection::vec(proptest::collection::vec(0u64..20, 4), 4),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let a = compute_metrics("x", &conf).unwrap();
            let b = compute_metrics("x", &permute(&conf, &perm)).unwrap();
            prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
            for c in 0..4 {
                prop_assert_eq!(&a.per_class[c], &b.per_class[perm[c]]);
            }
        }

        #[test]
        fn full_rank_projection_keeps_distances(
            pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 3..12),
        ) {
            let p = pca_project(&pts, 3).unwrap();
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            for i in 0..pts.len() {
                for j in 0..i {
                    prop_assert!((dist(&pts[i], &pts[j]) - dist(&p[i], &p[j])).abs() < 1e-9);
                }
            }
            prop_assert_eq!(pca_project(&pts, 3).unwrap(), p);
        }
    }
}
