//! Agreement and detection statistics for scan-rescan pairs.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn detection_metrics(truth: &[bool], predicted: &[bool]) -> Result<DetectionMetrics> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(DetectionMetrics {
        tp,
        fp,
        tn,
        fn_,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        fpr: ratio(fp, fp + tn),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        accuracy: ratio(tp + tn, truth.len()),
    })
}

/// Absolute difference over the pair mean; a pair of zeros agrees exactly.
pub fn abs_rel_diff(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::InvalidArgument(format!("scores must be non-negative, got {a} and {b}")));
    }
    if a == 0.0 && b == 0.0 {
        return Ok(0.0);
    }
    Ok((a - b).abs() / ((a + b) / 2.0))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

fn f_quantile(p: f64, d1: f64, d2: f64) -> Result<f64> {
    let f = FisherSnedecor::new(d1, d2).map_err(|e| Error::InvalidArgument(format!("F({d1}, {d2}): {e}")))?;
    Ok(f.inverse_cdf(p))
}

/// Single-measure, absolute-agreement intraclass correlation of a two-way
/// random-effects model, with its 95% confidence interval.
///
/// `rows` holds one vector of `k` ratings per subject.
pub fn icc_absolute_agreement(rows: &[Vec<f64>]) -> Result<Interval> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("ICC needs at least 2 subjects, got {n}")));
    }
    let k = rows[0].len();
    if k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("ICC needs at least 2 ratings per subject, all rows equal length".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = rows.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ssr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssc = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let sst: f64 = rows.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let sse = (sst - ssr - ssc).max(0.0);
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    if sst == 0.0 {
        return Err(Error::InsufficientData("ICC undefined for constant ratings".into()));
    }
    let icc = (msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf);
    if mse == 0.0 && msc == 0.0 {
        return Ok(Interval {
            estimate: 1.0,
            lower: 1.0,
            upper: 1.0,
        });
    }

    let a = kf * icc / (nf * (1.0 - icc));
    let b = 1.0 + kf * icc * (nf - 1.0) / (nf * (1.0 - icc));
    let v = (a * msc + b * mse).powi(2) / ((a * msc).powi(2) / (kf - 1.0) + (b * mse).powi(2) / ((nf - 1.0) * (kf - 1.0)));
    let q = 1.0 - 0.05 / 2.0;
    let (lower, upper) = if v.is_finite() && v > 0.0 {
        let f_star = f_quantile(q, nf - 1.0, v)?;
        let f_lo = f_quantile(q, v, nf - 1.0)?;
        let c = kf * nf - kf - nf;
        (
            nf * (msr - f_star * mse) / (f_star * (kf * msc + c * mse) + nf * msr),
            nf * (f_lo * msr - mse) / (kf * msc + c * mse + nf * f_lo * msr),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Interval {
        estimate: icc,
        lower,
        upper,
    })
}

/// ICC of scan-rescan pairs.
pub fn icc_pairs(a: &[f64], b: &[f64]) -> Result<Interval> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired series differ in length".into()));
    }
    let rows: Vec<Vec<f64>> = a.iter().zip(b).map(|(&x, &y)| vec![x, y]).collect();
    icc_absolute_agreement(&rows)
}

/// Linearly weighted Cohen's kappa with a large-sample 95% interval.
pub fn weighted_kappa(r1: &[usize], r2: &[usize], categories: usize) -> Result<Interval> {
    if r1.len() != r2.len() {
        return Err(Error::InvalidArgument("rating series differ in length".into()));
    }
    if r1.is_empty() {
        return Err(Error::InsufficientData("kappa needs at least one pair".into()));
    }
    if categories < 2 {
        return Err(Error::InvalidArgument("kappa needs at least two categories".into()));
    }
    if let Some(&c) = r1.iter().chain(r2).find(|&&c| c >= categories) {
        return Err(Error::InvalidArgument(format!("category {c} outside 0..{categories}")));
    }
    let k = categories;
    let n = r1.len() as f64;
    let mut p = vec![vec![0.0; k]; k];
    for (&i, &j) in r1.iter().zip(r2) {
        p[i][j] += 1.0 / n;
    }
    let w = |i: usize, j: usize| 1.0 - (i as f64 - j as f64).abs() / (k as f64 - 1.0);
    let row: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| p.iter().map(|r| r[j]).sum()).collect();
    let mut po = 0.0;
    let mut pe = 0.0;
    for i in 0..k {
        for j in 0..k {
            po += w(i, j) * p[i][j];
            pe += w(i, j) * row[i] * col[j];
        }
    }
    if (1.0 - pe).abs() < 1e-15 {
        return Err(Error::InsufficientData("kappa undefined when expected agreement is 1".into()));
    }
    let kappa = (po - pe) / (1.0 - pe);
    let wi: Vec<f64> = (0..k).map(|i| (0..k).map(|j| col[j] * w(i, j)).sum()).collect();
    let wj: Vec<f64> = (0..k).map(|j| (0..k).map(|i| row[i] * w(i, j)).sum()).collect();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            s += p[i][j] * (w(i, j) - (wi[i] + wj[j]) * (1.0 - kappa)).powi(2);
        }
    }
    let var = ((s - (kappa - pe * (1.0 - kappa)).powi(2)) / (n * (1.0 - pe).powi(2))).max(0.0);
    let half = Z95 * var.sqrt();
    Ok(Interval {
        estimate: kappa,
        lower: kappa - half,
        upper: kappa + half,
    })
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    pub fn fit(x: &[f64], y: &[f64]) -> Result<Line> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InsufficientData("line fit needs two or more points".into()));
        }
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Ok(Line {
            intercept: my - slope * mx,
            slope,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitsMethod {
    /// Constant bias and limits from the standard deviation of differences.
    Constant,
    /// Bias and limits as linear functions of the pair mean.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanRow {
    pub mean: f64,
    pub diff: f64,
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub method: LimitsMethod,
    pub bias: Line,
    /// Half-width of the limits of agreement as a function of the mean.
    pub half_width: Line,
    pub rows: Vec<BlandAltmanRow>,
}

/// Bland-Altman analysis of `a - b` against `(a + b) / 2`.
///
/// With [`LimitsMethod::Regression`] the bias is regressed on the mean and the
/// absolute residuals are regressed on the mean; the limits are the bias line
/// plus or minus 1.96 * sqrt(pi / 2) times the fitted absolute residual.
pub fn bland_altman(a: &[f64], b: &[f64], method: LimitsMethod) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired series differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("Bland-Altman needs at least 2 pairs".into()));
    }
    let means: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (bias, half_width) = match method {
        LimitsMethod::Constant => {
            let m = mean(&diffs).expect("non-empty");
            let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
            (
                Line { intercept: m, slope: 0.0 },
                Line {
                    intercept: Z95 * sd,
                    slope: 0.0,
                },
            )
        }
        LimitsMethod::Regression => {
            let bias = Line::fit(&means, &diffs)?;
            let resid: Vec<f64> = means.iter().zip(&diffs).map(|(m, d)| (d - bias.at(*m)).abs()).collect();
            let fit = Line::fit(&means, &resid)?;
            let c = Z95 * (std::f64::consts::PI / 2.0).sqrt();
            (
                bias,
                Line {
                    intercept: c * fit.intercept,
                    slope: c * fit.slope,
                },
            )
        }
    };
    let rows = means
        .iter()
        .zip(&diffs)
        .map(|(&m, &d)| {
            let c = bias.at(m);
            let h = half_width.at(m).max(0.0);
            BlandAltmanRow {
                mean: m,
                diff: d,
                bias: c,
                lower: c - h,
                upper: c + h,
            }
        })
        .collect();
    Ok(BlandAltman {
        method,
        bias,
        half_width,
        rows,
    })
}

impl BlandAltman {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mean,diff,bias,lower,upper\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.mean, r.diff, r.bias, r.lower, r.upper);
        }
        s
    }

    /// Fraction of pairs whose difference lies within the limits.
    pub fn coverage(&self) -> f64 {
        let inside = self.rows.iter().filter(|r| r.diff >= r.lower && r.diff <= r.upper).count();
        inside as f64 / self.rows.len().max(1) as f64
    }

    /// Scatter of differences against means with bias and limit lines.
    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        if self.rows.is_empty() {
            return img;
        }
        let xs = self.rows.iter().map(|r| r.mean);
        let (mut x0, mut x1) = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let ys = self.rows.iter().flat_map(|r| [r.diff, r.lower, r.upper]);
        let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if x1 - x0 < 1e-12 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 1.0;
            y1 += 1.0;
        }
        let margin = 10.0;
        let (w, h) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
        let px = |x: f64| margin + (x - x0) / (x1 - x0) * w;
        let py = |y: f64| margin + (y1 - y) / (y1 - y0) * h;
        let put = |x: f64, y: f64, c: Rgb<u8>, img: &mut RgbImage| {
            let (xi, yi) = (x.round() as i64, y.round() as i64);
            if xi >= 0 && yi >= 0 && (xi as u32) < width && (yi as u32) < height {
                img.put_pixel(xi as u32, yi as u32, c);
            }
        };
        let steps = (w as usize).max(2);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s as f64 / steps as f64;
            let c = self.bias.at(x);
            let hw = self.half_width.at(x).max(0.0);
            put(px(x), py(c), Rgb([0, 0, 200]), &mut img);
            put(px(x), py(c - hw), Rgb([200, 0, 0]), &mut img);
            put(px(x), py(c + hw), Rgb([200, 0, 0]), &mut img);
        }
        for r in &self.rows {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    put(px(r.mean) + dx as f64, py(r.diff) + dy as f64, Rgb([0, 0, 0]), &mut img);
                }
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.render(480, 360).save(path)?;
        Ok(())
    }
}

/// One row of a pair table: the same score on two scans of one subject, with
/// optional risk categories (`I`..`IV` or `1`..`4`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub subject: String,
    pub score_type: String,
    pub scan1: f64,
    pub scan2: f64,
    #[serde(default)]
    pub category1: Option<String>,
    #[serde(default)]
    pub category2: Option<String>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

pub fn read_pair_table(path: &Path) -> Result<Vec<PairRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_pair_table(path: &Path, rows: &[PairRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Zero-based index of a risk category label.
pub fn category_index(label: &str) -> Result<usize> {
    match label.trim() {
        "I" | "1" => Ok(0),
        "II" | "2" => Ok(1),
        "III" | "3" => Ok(2),
        "IV" | "4" => Ok(3),
        other => Err(Error::InvalidArgument(format!("unknown risk category {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTypeSummary {
    pub score_type: String,
    pub pairs: usize,
    pub agreement: AgreementStats,
    /// Present when every row of this score type carries both categories.
    pub kappa: Option<Interval>,
    pub category_table: Option<[[usize; 4]; 4]>,
    pub bland_altman_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTableReport {
    pub score_types: Vec<ScoreTypeSummary>,
}

/// Summarize a pair table per score type, in order of first appearance.
/// Bland-Altman tables and plots go to `plots` when given.
pub fn evaluate_pair_table(rows: &[PairRow], limits: LimitsMethod, plots: Option<&Path>) -> Result<PairTableReport> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("empty pair table".into()));
    }
    let mut types: Vec<&str> = Vec::new();
    for r in rows {
        if !types.contains(&r.score_type.as_str()) {
            types.push(&r.score_type);
        }
    }
    let mut out = Vec::new();
    for t in types {
        let group: Vec<&PairRow> = rows.iter().filter(|r| r.score_type == t).collect();
        let a: Vec<f64> = group.iter().map(|r| r.scan1).collect();
        let b: Vec<f64> = group.iter().map(|r| r.scan2).collect();
        let (agreement, ba) = agreement(&a, &b, limits)?;
        let cats: Option<Vec<(usize, usize)>> = group
            .iter()
            .map(|r| match (&r.category1, &r.category2) {
                (Some(c1), Some(c2)) if !c1.is_empty() && !c2.is_empty() => Some((c1.as_str(), c2.as_str())),
                _ => None,
            })
            .map(|c| c.map(|(c1, c2)| Ok((category_index(c1)?, category_index(c2)?))))
            .collect::<Option<Vec<Result<(usize, usize)>>>>()
            .map(|v| v.into_iter().collect::<Result<Vec<_>>>())
            .transpose()?;
        let (kappa, category_table) = match &cats {
            Some(c) => {
                let (r1, r2): (Vec<usize>, Vec<usize>) = c.iter().copied().unzip();
                let mut table = [[0; 4]; 4];
                for &(i, j) in c {
                    table[i][j] += 1;
                }
                (weighted_kappa(&r1, &r2, 4).ok(), Some(table))
            }
            None => (None, None),
        };
        let mut files = Vec::new();
        if let (Some(dir), Some(ba)) = (plots, &ba) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let stem: String = t.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            let csv = format!("bland_altman_{stem}.csv");
            let png = format!("bland_altman_{stem}.png");
            std::fs::write(dir.join(&csv), ba.to_csv()).map_err(|e| Error::io(dir.join(&csv), e))?;
            ba.save_png(&dir.join(&png))?;
            files.push(csv);
            files.push(png);
        }
        out.push(ScoreTypeSummary {
            score_type: t.to_string(),
            pairs: group.len(),
            agreement,
            kappa,
            category_table,
            bland_altman_files: files,
        });
    }
    Ok(PairTableReport { score_types: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detection_hand_counts() {
        let t = [true, true, false, false, true];
        let p = [true, false, true, false, true];
        let m = detection_metrics(&t, &p).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (2, 1, 1, 1));
        assert_eq!(m.sensitivity, Some(2.0 / 3.0));
        assert_eq!(m.specificity, Some(0.5));
        assert_eq!(m.f1, Some(4.0 / 6.0));
        let m = detection_metrics(&[false, false], &[false, false]).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.ppv, None);
        assert_eq!(m.specificity, Some(1.0));
        assert!(detection_metrics(&[true], &[]).is_err());
    }

    #[test]
    fn rel_diff_values() {
        assert_eq!(abs_rel_diff(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(abs_rel_diff(10.0, 10.0).unwrap(), 0.0);
        assert!((abs_rel_diff(100.0, 120.0).unwrap() - 20.0 / 110.0).abs() < 1e-15);
        assert_eq!(abs_rel_diff(0.0, 5.0).unwrap(), 2.0);
        assert!(abs_rel_diff(-1.0, 2.0).is_err());
    }

    #[test]
    fn icc_shrout_fleiss_example() {
        let rows = vec![
            vec![9.0, 2.0, 5.0, 8.0],
            vec![6.0, 1.0, 3.0, 2.0],
            vec![8.0, 4.0, 6.0, 8.0],
            vec![7.0, 1.0, 2.0, 6.0],
            vec![10.0, 5.0, 6.0, 9.0],
            vec![6.0, 2.0, 4.0, 7.0],
        ];
        let r = icc_absolute_agreement(&rows).unwrap();
        assert!((r.estimate - 0.2898).abs() < 5e-4, "{r:?}");
        assert!((r.lower - 0.019).abs() < 5e-3, "{r:?}");
        assert!((r.upper - 0.76).abs() < 5e-3, "{r:?}");
    }

    /// Variance-component oracle for the two-rater case.
    fn icc_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let g = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2.0 * n);
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut ssr = 0.0;
        let mut sse = 0.0;
        for i in 0..a.len() {
            let m = (a[i] + b[i]) / 2.0;
            ssr += 2.0 * (m - g).powi(2);
            sse += (a[i] - m - ma + g).powi(2) + (b[i] - m - mb + g).powi(2);
        }
        let ssc = n * ((ma - g).powi(2) + (mb - g).powi(2));
        let msr = ssr / (n - 1.0);
        let mse = sse / (n - 1.0);
        let msc = ssc;
        let s_subj = (msr - mse) / 2.0;
        let s_rater = (msc - mse) / n;
        s_subj / (s_subj + s_rater + mse)
    }

    #[test]
    fn icc_perfect_and_degenerate() {
        let r = icc_pairs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert!(icc_pairs(&[1.0], &[1.0]).is_err());
        assert!(icc_pairs(&[2.0, 2.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn kappa_perfect_agreement() {
        let r = [0, 1, 2, 3, 1, 2];
        let k = weighted_kappa(&r, &r, 4).unwrap();
        assert!((k.estimate - 1.0).abs() < 1e-12);
        assert!((k.upper - k.lower).abs() < 1e-6);
        assert!(weighted_kappa(&[1, 1], &[1, 1], 4).is_err());
        assert!(weighted_kappa(&[5], &[0], 4).is_err());
    }

    /// Disagreement-weight oracle.
    fn kappa_oracle(r1: &[usize], r2: &[usize]) -> f64 {
        let n = r1.len() as f64;
        let d = |i: usize, j: usize| (i as f64 - j as f64).abs();
        let obs: f64 = r1.iter().zip(r2).map(|(&i, &j)| d(i, j)).sum::<f64>() / n;
        let mut exp = 0.0;
        for &i in r1 {
            for &j in r2 {
                exp += d(i, j);
            }
        }
        exp /= n * n;
        1.0 - obs / exp
    }

    #[test]
    fn kappa_matches_disagreement_form() {
        let r1 = [0, 1, 1, 2, 3, 3, 2, 0, 1, 2];
        let r2 = [0, 1, 2, 2, 3, 2, 2, 1, 1, 3];
        let k = weighted_kappa(&r1, &r2, 4).unwrap();
        assert!((k.estimate - kappa_oracle(&r1, &r2)).abs() < 1e-12);
        assert!(k.lower < k.estimate && k.estimate < k.upper);
    }

    #[test]
    fn bland_altman_constant_hand_values() {
        let a = [10.0, 20.0, 30.0, 40.0];
        let b = [8.0, 22.0, 27.0, 41.0];
        let ba = bland_altman(&a, &b, LimitsMethod::Constant).unwrap();
        let d = [2.0, -2.0, 3.0, -1.0];
        let m = 0.5;
        let sd = (d.iter().map(|x: &f64| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((ba.bias.intercept - m).abs() < 1e-12);
        assert!((ba.half_width.intercept - Z95 * sd).abs() < 1e-12);
        assert_eq!(ba.rows.len(), 4);
        assert!(ba.to_csv().starts_with("mean,diff,bias,lower,upper\n"));
    }

    #[test]
    fn bland_altman_regression_recovers_proportional_bias() {
        let a: Vec<f64> = (1..=20).map(|i| i as f64 * 10.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 0.9).collect();
        let ba = bland_altman(&a, &b, LimitsMethod::Regression).unwrap();
        // diff = 0.1 a, mean = 0.95 a
        assert!((ba.bias.slope - 0.1 / 0.95).abs() < 1e-9);
        assert!(ba.bias.intercept.abs() < 1e-9);
        assert!(ba.half_width.intercept.abs() < 1e-9 && ba.half_width.slope.abs() < 1e-9);
    }

    #[test]
    fn plot_renders() {
        let ba = bland_altman(&[1.0, 2.0, 3.0], &[1.5, 2.0, 2.5], LimitsMethod::Regression).unwrap();
        let img = ba.render(100, 80);
        assert!(img.pixels().any(|p| p.0 == [0, 0, 0]));
        let dir = tempfile::tempdir().unwrap();
        ba.save_png(&dir.path().join("ba.png")).unwrap();
    }

    proptest! {
        #[test]
        fn rel_diff_symmetric_and_bounded(a in 0.0f64..1e4, b in 0.0f64..1e4) {
            let d = abs_rel_diff(a, b).unwrap();
            prop_assert!((d - abs_rel_diff(b, a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&d));
        }

        #[test]
        fn icc_matches_variance_components(pairs in prop::collection::vec((0.0f64..100.0, -5.0f64..5.0), 3..20)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            if let Ok(r) = icc_pairs(&a, &b) {
                prop_assert!((r.estimate - icc_oracle(&a, &b)).abs() < 1e-9);
                prop_assert!(r.estimate <= 1.0 + 1e-12);
                if r.lower.is_finite() {
                    prop_assert!(r.lower <= r.estimate + 1e-9 && r.estimate <= r.upper + 1e-9);
                }
            }
        }

        #[test]
        fn kappa_bounded(v in prop::collection::vec((0usize..4, 0usize..4), 2..40)) {
            let r1: Vec<usize> = v.iter().map(|p| p.0).collect();
            let r2: Vec<usize> = v.iter().map(|p| p.1).collect();
            if let Ok(k) = weighted_kappa(&r1, &r2, 4) {
                prop_assert!(k.estimate <= 1.0 + 1e-12);
                prop_assert!((k.estimate - kappa_oracle(&r1, &r2)).abs() < 1e-9);
            }
        }
    }
}

/// Interscan agreement summary of one score over paired scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub mean_abs_rel_diff_all: Option<f64>,
    pub median_abs_rel_diff_all: Option<f64>,
    /// Over pairs where both scores are positive.
    pub mean_abs_rel_diff_positive: Option<f64>,
    pub median_abs_rel_diff_positive: Option<f64>,
    pub concordant_positive_pairs: usize,
    pub icc: Option<Interval>,
    pub bland_altman_bias: Option<f64>,
    pub bland_altman_coverage: Option<f64>,
}

/// Relative differences, ICC and Bland-Altman for two score columns. The
/// Bland-Altman analysis is returned when there are enough pairs for it.
pub fn agreement(a: &[f64], b: &[f64], limits: LimitsMethod) -> Result<(AgreementStats, Option<BlandAltman>)> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired series differ in length".into()));
    }
    let all: Vec<f64> = a.iter().zip(b).map(|(x, y)| abs_rel_diff(*x, *y)).collect::<Result<_>>()?;
    let pos: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| abs_rel_diff(*x, *y))
        .collect::<Result<_>>()?;
    let ba = bland_altman(a, b, limits).ok();
    Ok((
        AgreementStats {
            mean_abs_rel_diff_all: mean(&all),
            median_abs_rel_diff_all: median(&all),
            mean_abs_rel_diff_positive: mean(&pos),
            median_abs_rel_diff_positive: median(&pos),
            concordant_positive_pairs: pos.len(),
            icc: icc_pairs(a, b).ok(),
            bland_altman_bias: ba.as_ref().and_then(|b| mean(&b.rows.iter().map(|r| r.bias).collect::<Vec<_>>())),
            bland_altman_coverage: ba.as_ref().map(|b| b.coverage()),
        },
        ba,
    ))
}

#[cfg(test)]
mod pair_table_tests {
    use super::*;

    fn row(t: &str, a: f64, b: f64, c: Option<(&str, &str)>) -> PairRow {
        PairRow {
            subject: format!("s{a}"),
            score_type: t.into(),
            scan1: a,
            scan2: b,
            category1: c.map(|c| c.0.into()),
            category2: c.map(|c| c.1.into()),
        }
    }

    #[test]
    fn groups_by_score_type_and_reads_categories() {
        let rows = vec![
            row("mass", 10.0, 12.0, None),
            row("agatston", 50.0, 60.0, Some(("II", "II"))),
            row("mass", 0.0, 0.0, None),
            row("agatston", 500.0, 350.0, Some(("IV", "3"))),
            row("mass", 30.0, 20.0, None),
            row("agatston", 5.0, 0.0, Some(("1", "I"))),
        ];
        let dir = tempfile::tempdir().unwrap();
        let rep = evaluate_pair_table(&rows, LimitsMethod::Regression, Some(dir.path())).unwrap();
        let names: Vec<&str> = rep.score_types.iter().map(|s| s.score_type.as_str()).collect();
        assert_eq!(names, ["mass", "agatston"]);
        assert!(rep.score_types[0].kappa.is_none());
        let t = rep.score_types[1].category_table.unwrap();
        assert_eq!((t[1][1], t[3][2], t[0][0]), (1, 1, 1));
        assert_eq!(rep.score_types[0].agreement.concordant_positive_pairs, 2);
        assert!(dir.path().join("bland_altman_agatston.png").exists());
    }

    #[test]
    fn pair_table_round_trips_through_csv() {
        let rows = vec![row("mass", 1.5, 2.0, Some(("I", "II"))), row("mass", 3.0, 4.0, None)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        write_pair_table(&p, &rows).unwrap();
        assert_eq!(read_pair_table(&p).unwrap(), rows);
    }

    #[test]
    fn bad_category_is_rejected() {
        let rows = vec![row("a", 1.0, 2.0, Some(("V", "I"))), row("a", 2.0, 2.0, Some(("I", "I")))];
        assert!(evaluate_pair_table(&rows, LimitsMethod::Constant, None).is_err());
        assert!(evaluate_pair_table(&[], LimitsMethod::Constant, None).is_err());
    }
}
