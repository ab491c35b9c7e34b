//! ROC curves, AUC, and operating-point statistics.
//!
//! The curve is built by a descending-score sweep with tied scores collapsed
//! into single steps, and the trapezoidal area is accumulated in integer pair
//! counts, so it equals the Mann-Whitney statistic (ties weighted 1/2) by
//! construction rather than by approximation.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels contain a single class; ROC statistics need both")]
    SingleClassLabels,
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at position {0} is not finite")]
    NonFiniteScore(usize),
    #[error("no samples")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One ROC operating point: everything scoring at least `threshold` is
/// called positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve from (0,0) at threshold +inf down to (1,1) at the minimum score.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClassLabels);
    }
    Ok((pos, neg))
}

/// ROC curve and area under it.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64), MetricsError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    // Twice the untrapezoided pair count: sum of dfp * (tp_before + tp_after).
    let mut acc2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut dtp = 0u64;
        let mut dfp = 0u64;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        acc2 += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    let auc = acc2 as f64 / (2 * pos as u64 * neg as u64) as f64;
    Ok((RocCurve { points }, auc))
}

/// Convenience wrapper returning only the area.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    roc_auc(scores, labels).map(|(_, a)| a)
}

/// Sensitivity and specificity at a threshold (predicted positive iff
/// score >= threshold).
pub fn sens_spec(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64), MetricsError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let predicted_positive = s >= threshold;
        if l == 1 && predicted_positive {
            tp += 1;
        }
        if l != 1 && !predicted_positive {
            tn += 1;
        }
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// Threshold maximizing Youden's J = tpr - fpr; ties resolve toward higher
/// specificity, then toward the higher threshold.
pub fn youden_optimal(curve: &RocCurve) -> f64 {
    let mut best = &curve.points[0];
    let mut best_j = best.tpr - best.fpr;
    for p in &curve.points[1..] {
        let j = p.tpr - p.fpr;
        if j > best_j + 1e-15 || ((j - best_j).abs() <= 1e-15 && p.fpr < best.fpr) {
            best = p;
            best_j = j;
        }
    }
    best.threshold
}

/// Fixed-precision float text so exports are byte-stable.
fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Write a curve as CSV `threshold,fpr,tpr`.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", fmt(p.threshold), fmt(p.fpr), fmt(p.tpr)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render one SVG with a polyline per named curve, axes, the chance diagonal,
/// and an AUC legend. Byte-stable for identical inputs.
pub fn write_roc_svg(curves: &[(String, RocCurve, f64)], path: &Path) -> Result<(), MetricsError> {
    let (w, h, m) = (480.0, 480.0, 50.0);
    let plot = w - 2.0 * m;
    let x = |fpr: f64| m + fpr * plot;
    let y = |tpr: f64| h - m - tpr * plot;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"#333\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n",
        fmt(x(0.0)),
        fmt(y(0.0)),
        fmt(x(1.0)),
        fmt(y(1.0))
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>\n",
            fmt(x(tick)),
            fmt(h - m + 16.0),
            tick
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.2}</text>\n",
            fmt(m - 6.0),
            fmt(y(tick) + 4.0),
            tick
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">false positive rate</text>\n",
        fmt(w / 2.0),
        fmt(h - 12.0)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">true positive rate</text>\n",
        fmt(h / 2.0),
        fmt(h / 2.0)
    ));
    for (i, (name, curve, auc)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            curve.points.iter().map(|p| format!("{},{}", fmt(x(p.fpr)), fmt(y(p.tpr)))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            pts.join(" "),
            color
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{} (AUC={:.4})</text>\n",
            fmt(m + 12.0),
            fmt(m + 18.0 + i as f64 * 16.0),
            color,
            name,
            auc
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
