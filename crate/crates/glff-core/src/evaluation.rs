//! Scoring harness: overall accuracy, ROC curves, pairwise AUC and the
//! per-protocol/per-generator report with shared real negatives.

use crate::df3::SampleRecord;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::Detector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One scored sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub fake_probability: f64,
    pub label: u8,
    pub generator: String,
    pub protocol: String,
}

/// Pairwise rank statistic: the fraction of (positive, negative) score
/// pairs ordered correctly, with half credit for ties. Equals the
/// trapezoidal area under the ROC curve.
pub fn auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::config("auc needs both positive and negative scores"));
    }
    let mut favorable = 0.0f64;
    for &p in pos_scores {
        for &n in neg_scores {
            if p > n {
                favorable += 1.0;
            } else if p == n {
                favorable += 0.5;
            }
        }
    }
    Ok(favorable / (pos_scores.len() as f64 * neg_scores.len() as f64))
}

/// Overall accuracy at a threshold: a sample counts as correct when
/// `score >= threshold` matches `label == 1`.
pub fn oa(scored: &[(f64, u8)], threshold: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::config("oa over an empty score set"));
    }
    let correct = scored
        .iter()
        .filter(|(s, l)| (*s >= threshold) == (*l == 1))
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Scores every manifest record with the detector. Relative record paths
/// resolve against `base_dir`; failures name the manifest line.
pub fn score_manifest(
    detector: &dyn Detector,
    records: &[SampleRecord],
    base_dir: &Path,
    manifest_path: &Path,
) -> Result<Vec<ScoreEntry>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let raw = Path::new(&rec.path);
            let path = if raw.is_absolute() {
                raw.to_path_buf()
            } else {
                base_dir.join(raw)
            };
            let image = ImageTensor::load(&path).map_err(|e| Error::Manifest {
                path: manifest_path.to_path_buf(),
                line: i + 1,
                msg: format!("cannot load {}: {e}", path.display()),
            })?;
            let p = detector.fake_probability(&image)? as f64;
            Ok(ScoreEntry {
                id: rec.path.clone(),
                fake_probability: p,
                label: rec.label,
                generator: rec.generator.clone(),
                protocol: rec.protocol.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC staircase from `(score, label)` pairs: one point per distinct score
/// plus both endpoints, monotone from (0,0) to (1,1).
pub fn roc(scored: &[(f64, u8)]) -> Result<Vec<RocPoint>> {
    let n_pos = scored.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("roc needs both classes present"));
    }
    let mut sorted: Vec<(f64, u8)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < sorted.len() {
        let score = sorted[i].0;
        // consume the whole tie group at once so ties form one segment
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: score,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC staircase.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub protocol: String,
    pub generator: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub oa: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub cells: Vec<CellMetrics>,
    /// `(protocol, mean OA, mean AUC over its generators)`.
    pub protocol_averages: Vec<(String, f64, f64)>,
    pub grand_average_auc: f64,
    pub threshold: f64,
}

/// Builds the per-(protocol, generator) report.
///
/// Every `label == 1` entry lands in its (protocol, generator) cell; all
/// `label == 0` entries form one shared negative pool reused by every cell.
/// Per-protocol averages are unweighted means over generators, the grand
/// average an unweighted mean over protocols.
pub fn protocol_report(entries: &[ScoreEntry], threshold: f64) -> Result<MetricsReport> {
    for e in entries {
        if !(0.0..=1.0).contains(&e.fake_probability) {
            return Err(Error::Numeric(format!(
                "score {} for {} outside [0,1]",
                e.fake_probability, e.id
            )));
        }
        if e.label > 1 {
            return Err(Error::config(format!("label {} for {}", e.label, e.id)));
        }
    }
    let negatives: Vec<f64> = entries
        .iter()
        .filter(|e| e.label == 0)
        .map(|e| e.fake_probability)
        .collect();
    if negatives.is_empty() {
        return Err(Error::config("no real (negative) samples in the score set"));
    }
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.label == 1) {
        cells
            .entry((e.protocol.clone(), e.generator.clone()))
            .or_default()
            .push(e.fake_probability);
    }
    if cells.is_empty() {
        return Err(Error::config("no fake (positive) samples in the score set"));
    }

    let mut out_cells = Vec::new();
    for ((protocol, generator), pos) in &cells {
        let cell_auc = auc(pos, &negatives)?;
        let mut scored: Vec<(f64, u8)> = pos.iter().map(|&s| (s, 1u8)).collect();
        scored.extend(negatives.iter().map(|&s| (s, 0u8)));
        let cell_oa = oa(&scored, threshold)?;
        out_cells.push(CellMetrics {
            protocol: protocol.clone(),
            generator: generator.clone(),
            n_pos: pos.len(),
            n_neg: negatives.len(),
            oa: cell_oa,
            auc: cell_auc,
        });
    }

    let mut by_protocol: BTreeMap<String, Vec<&CellMetrics>> = BTreeMap::new();
    for c in &out_cells {
        by_protocol.entry(c.protocol.clone()).or_default().push(c);
    }
    let protocol_averages: Vec<(String, f64, f64)> = by_protocol
        .iter()
        .map(|(p, cs)| {
            let m = cs.len() as f64;
            (
                p.clone(),
                cs.iter().map(|c| c.oa).sum::<f64>() / m,
                cs.iter().map(|c| c.auc).sum::<f64>() / m,
            )
        })
        .collect();
    let grand_average_auc = protocol_averages.iter().map(|(_, _, a)| a).sum::<f64>()
        / protocol_averages.len() as f64;

    Ok(MetricsReport {
        cells: out_cells,
        protocol_averages,
        grand_average_auc,
        threshold,
    })
}

/// CSV with header `protocol,generator,n_pos,n_neg,oa,auc`; per-protocol
/// averages append with generator `__avg__`, the grand average with
/// protocol `__avg__` as well.
pub fn write_metrics_csv(report: &MetricsReport, w: &mut dyn Write) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("metrics.csv", e);
    writeln!(w, "protocol,generator,n_pos,n_neg,oa,auc").map_err(io_err)?;
    for c in &report.cells {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6}",
            c.protocol, c.generator, c.n_pos, c.n_neg, c.oa, c.auc
        )
        .map_err(io_err)?;
    }
    for (protocol, avg_oa, avg_auc) in &report.protocol_averages {
        let n_pos: usize = report
            .cells
            .iter()
            .filter(|c| &c.protocol == protocol)
            .map(|c| c.n_pos)
            .sum();
        let n_neg = report.cells.first().map(|c| c.n_neg).unwrap_or(0);
        writeln!(
            w,
            "{protocol},__avg__,{n_pos},{n_neg},{avg_oa:.6},{avg_auc:.6}"
        )
        .map_err(io_err)?;
    }
    let total_pos: usize = report.cells.iter().map(|c| c.n_pos).sum();
    let n_neg = report.cells.first().map(|c| c.n_neg).unwrap_or(0);
    let grand_oa: f64 = report.protocol_averages.iter().map(|(_, o, _)| o).sum::<f64>()
        / report.protocol_averages.len() as f64;
    writeln!(
        w,
        "__avg__,__avg__,{total_pos},{n_neg},{grand_oa:.6},{:.6}",
        report.grand_average_auc
    )
    .map_err(io_err)?;
    Ok(())
}

/// CSV with header `fpr,tpr,threshold`.
pub fn write_roc_csv(points: &[RocPoint], w: &mut dyn Write) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("roc.csv", e);
    writeln!(w, "fpr,tpr,threshold").map_err(io_err)?;
    for p in points {
        writeln!(w, "{:.6},{:.6},{}", p.fpr, p.tpr, p.threshold).map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_worked_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        // 3 of 4 pairs ordered correctly
        assert_eq!(auc(&[0.8, 0.6], &[0.7, 0.2]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(auc(&[], &[0.5]).is_err());
        assert!(auc(&[0.5], &[]).is_err());
    }

    #[test]
    fn oa_worked_examples() {
        assert_eq!(oa(&[(0.9, 1), (0.1, 0)], 0.5).unwrap(), 1.0);
        assert_eq!(oa(&[(0.9, 1), (0.4, 1)], 0.5).unwrap(), 0.5);
        // threshold 0 predicts everything fake: accuracy = positive fraction
        let s = [(0.3, 1), (0.2, 0), (0.9, 1), (0.4, 0)];
        assert_eq!(oa(&s, 0.0).unwrap(), 0.5);
        assert!(oa(&[], 0.5).is_err());
    }

    #[test]
    fn roc_shape_and_perfect_separation() {
        let s = [(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)];
        let pts = roc(&s).unwrap();
        assert_eq!(pts.first().unwrap().fpr, 0.0);
        assert_eq!(pts.last().unwrap().tpr, 1.0);
        assert_eq!(pts.last().unwrap().fpr, 1.0);
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        for w in pts.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        assert!(roc(&[(0.5, 1)]).is_err());
    }

    #[test]
    fn dual_formula_agreement_on_random_sets_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n_pos = rng.random_range(3..40);
            let n_neg = rng.random_range(3..40);
            // quantized scores force ties across and within classes
            let q = rng.random_range(2..12) as f64;
            let pos: Vec<f64> = (0..n_pos)
                .map(|_| (rng.random_range(0.0..1.0) * q).round() / q)
                .collect();
            let neg: Vec<f64> = (0..n_neg)
                .map(|_| (rng.random_range(0.0..1.0) * q).round() / q)
                .collect();
            let pairwise = auc(&pos, &neg).unwrap();
            let mut scored: Vec<(f64, u8)> = pos.iter().map(|&s| (s, 1u8)).collect();
            scored.extend(neg.iter().map(|&s| (s, 0u8)));
            let area = roc_area(&roc(&scored).unwrap());
            assert!(
                (pairwise - area).abs() < 1e-9,
                "pairwise {pairwise} vs trapezoid {area}"
            );
        }
    }

    #[test]
    fn random_scores_give_half_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scored: Vec<(f64, u8)> = (0..10_000)
            .map(|_| (rng.random_range(0.0..1.0), rng.random_bool(0.5) as u8))
            .collect();
        let area = roc_area(&roc(&scored).unwrap());
        assert!((area - 0.5).abs() < 0.05, "area {area}");
    }

    #[test]
    fn monotone_transform_and_label_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let neg: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = auc(&pos, &neg).unwrap();
        let f = |v: f64| (3.0 * v + 1.0).exp();
        let pos_t: Vec<f64> = pos.iter().map(|&v| f(v)).collect();
        let neg_t: Vec<f64> = neg.iter().map(|&v| f(v)).collect();
        assert_eq!(base, auc(&pos_t, &neg_t).unwrap());
        // swapping classes mirrors the statistic (no ties almost surely)
        let flipped = auc(&neg, &pos).unwrap();
        assert!((flipped - (1.0 - base)).abs() < 1e-12);
    }

    fn entry(id: &str, p: f64, label: u8, generator: &str, protocol: &str) -> ScoreEntry {
        ScoreEntry {
            id: id.to_string(),
            fake_probability: p,
            label,
            generator: generator.to_string(),
            protocol: protocol.to_string(),
        }
    }

    #[test]
    fn constant_detector_scores_half_auc_everywhere() {
        let mut entries = vec![
            entry("r1", 0.5, 0, "-", "-"),
            entry("r2", 0.5, 0, "-", "-"),
        ];
        for p in ["unprocessed", "common"] {
            for g in ["gan_a", "gan_b"] {
                for i in 0..3 {
                    entries.push(entry(&format!("{p}-{g}-{i}"), 0.5, 1, g, p));
                }
            }
        }
        let report = protocol_report(&entries, 0.5).unwrap();
        assert_eq!(report.cells.len(), 4);
        for c in &report.cells {
            assert_eq!(c.auc, 0.5);
        }
        assert_eq!(report.grand_average_auc, 0.5);
    }

    #[test]
    fn grand_average_is_mean_over_protocols() {
        // protocol A: auc 0.6 (3 of 5 pairs); protocol B: auc 0.8 (4 of 5)
        let entries = vec![
            entry("n1", 0.50, 0, "-", "-"),
            entry("a1", 0.40, 1, "g", "proto_a"),
            entry("a2", 0.60, 1, "g", "proto_a"),
            entry("a3", 0.60, 1, "g", "proto_a"),
            entry("a4", 0.40, 1, "g", "proto_a"),
            entry("a5", 0.60, 1, "g", "proto_a"),
            entry("b1", 0.60, 1, "g", "proto_b"),
            entry("b2", 0.60, 1, "g", "proto_b"),
            entry("b3", 0.60, 1, "g", "proto_b"),
            entry("b4", 0.60, 1, "g", "proto_b"),
            entry("b5", 0.40, 1, "g", "proto_b"),
        ];
        let report = protocol_report(&entries, 0.5).unwrap();
        let a = report.cells.iter().find(|c| c.protocol == "proto_a").unwrap();
        let b = report.cells.iter().find(|c| c.protocol == "proto_b").unwrap();
        assert!((a.auc - 0.6).abs() < 1e-12);
        assert!((b.auc - 0.8).abs() < 1e-12);
        assert!((report.grand_average_auc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn report_is_order_independent_and_needs_reals() {
        let mut entries = vec![
            entry("r1", 0.2, 0, "-", "-"),
            entry("f1", 0.9, 1, "g1", "p1"),
            entry("f2", 0.7, 1, "g2", "p1"),
            entry("f3", 0.4, 1, "g1", "p2"),
        ];
        let a = protocol_report(&entries, 0.5).unwrap();
        entries.reverse();
        let b = protocol_report(&entries, 0.5).unwrap();
        assert_eq!(a.cells.len(), b.cells.len());
        for (x, y) in a.cells.iter().zip(b.cells.iter()) {
            assert_eq!(x.protocol, y.protocol);
            assert_eq!(x.generator, y.generator);
            assert_eq!(x.auc, y.auc);
            assert_eq!(x.oa, y.oa);
        }
        let only_fakes: Vec<ScoreEntry> =
            entries.iter().filter(|e| e.label == 1).cloned().collect();
        assert!(protocol_report(&only_fakes, 0.5).is_err());
    }

    #[test]
    fn metrics_csv_format() {
        let entries = vec![
            entry("r1", 0.1, 0, "-", "-"),
            entry("f1", 0.9, 1, "g1", "p1"),
        ];
        let report = protocol_report(&entries, 0.5).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "protocol,generator,n_pos,n_neg,oa,auc");
        assert!(text.contains("p1,g1,1,1,1.000000,1.000000"));
        assert!(text.contains("p1,__avg__"));
        assert!(text.contains("__avg__,__avg__"));
        let mut roc_buf = Vec::new();
        write_roc_csv(&roc(&[(0.9, 1), (0.1, 0)]).unwrap(), &mut roc_buf).unwrap();
        assert!(String::from_utf8(roc_buf).unwrap().starts_with("fpr,tpr,threshold"));
    }
}
