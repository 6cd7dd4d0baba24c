//! L1 / L2 (means) over the whole volume and the lung area, and PSNR inside
//! lesion masks.

use std::fmt::Write as _;

use crate::dataset::{Case, NormStats};
use crate::error::{CoreError, Result};
use crate::volume::{Mask3, Volume3};

/// Mean absolute and mean squared difference, over every voxel or over the
/// voxels of `mask`.
pub fn l1_l2(pred: &Volume3, truth: &Volume3, mask: Option<&Mask3>) -> Result<(f64, f64)> {
    if !pred.same_grid(truth.shape, truth.spacing) {
        return Err(CoreError::Geometry(format!("metric inputs {:?} vs {:?}", pred.shape, truth.shape)));
    }
    if let Some(m) = mask {
        pred.check_mask(m)?;
    }
    let (mut s1, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
    for (i, (&a, &b)) in pred.data.iter().zip(&truth.data).enumerate() {
        if mask.is_none_or(|m| m.data[i] != 0) {
            let d = (a - b) as f64;
            s1 += d.abs();
            s2 += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::InvalidArgument("metric mask is empty".into()));
    }
    Ok((s1 / n as f64, s2 / n as f64))
}

/// Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros.
pub fn normalize_minmax(v: &Volume3) -> Volume3 {
    let (lo, hi) = v.min_max();
    let r = hi - lo;
    if r > 0.0 {
        v.map(|x| (x - lo) / r)
    } else {
        v.map(|_| 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// `f64::INFINITY` when the masked error is exactly zero.
    pub db: f64,
    pub infinite: bool,
    pub mse: f64,
}

/// PSNR with peak 1 after min-max normalizing each volume over its whole
/// extent; the squared error is averaged inside `mask`.
pub fn psnr(pred: &Volume3, truth: &Volume3, mask: &Mask3) -> Result<Psnr> {
    let (_, mse) = l1_l2(&normalize_minmax(pred), &normalize_minmax(truth), Some(mask))?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr { db: f64::INFINITY, infinite: true, mse }
    } else {
        Psnr { db: -10.0 * mse.log10(), infinite: false, mse }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub case_id: u64,
    pub method: String,
    pub l1: f64,
    pub l2: f64,
    pub l1_la: f64,
    pub l2_la: f64,
    pub psnr: Option<Psnr>,
}

/// Score each method's volume against the case's rib-free reconstruction.
/// With `stats`, errors are measured on dataset-normalized intensities
/// `(x - vol_min) / vol_range`; otherwise in mm^-1.
pub fn evaluate_methods(case: &Case, methods: &[(String, Volume3)], stats: Option<&NormStats>) -> Result<Vec<MetricsReport>> {
    let scale = |v: &Volume3| match stats {
        Some(s) => v.map(|x| s.norm_vol(x)),
        None => v.clone(),
    };
    let truth = scale(&case.vol_ribfree);
    let has_lesion = case.lesion_mask.count() > 0;
    methods
        .iter()
        .map(|(name, vol)| {
            let v = scale(vol);
            let (l1, l2) = l1_l2(&v, &truth, None)?;
            let (l1_la, l2_la) = l1_l2(&v, &truth, Some(&case.lung_mask))?;
            let psnr = if has_lesion { Some(psnr(&v, &truth, &case.lesion_mask)?) } else { None };
            Ok(MetricsReport { case_id: case.seed, method: name.clone(), l1, l2, l1_la, l2_la, psnr })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.context(format!("evaluating case {}", case.seed)))
}

fn psnr_text(p: &Option<Psnr>) -> String {
    match p {
        None => "n/a".into(),
        Some(p) if p.infinite => "inf".into(),
        Some(p) => format!("{:.2}", p.db),
    }
}

/// Aligned text table; L1 columns are scaled by 10^2 and L2 columns by 10^4.
pub fn format_table(title: &str, reports: &[MetricsReport]) -> String {
    let header = ["case", "method", "L1(x1e-2)", "L2(x1e-4)", "L1_LA(x1e-2)", "L2_LA(x1e-4)", "PSNR(dB)"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.case_id.to_string(),
                r.method.clone(),
                format!("{:.4}", r.l1 * 1e2),
                format!("{:.4}", r.l2 * 1e4),
                format!("{:.4}", r.l1_la * 1e2),
                format!("{:.4}", r.l2_la * 1e4),
                psnr_text(&r.psnr),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &rows {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    if !title.is_empty() {
        writeln!(out, "{title}").unwrap();
    }
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
    };
    line(header.to_vec(), &mut out);
    line(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub const CSV_HEADER: &str = "case,method,l1,l2,l1_la,l2_la,psnr_db,psnr_infinite";

/// One line per report, full precision, `CSV_HEADER` first.
pub fn format_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let (db, inf) = match r.psnr {
            None => (String::new(), String::new()),
            Some(p) => (if p.infinite { "inf".into() } else { p.db.to_string() }, p.infinite.to_string()),
        };
        writeln!(out, "{},{},{},{},{},{},{},{}", r.case_id, r.method, r.l1, r.l2, r.l1_la, r.l2_la, db, inf).unwrap();
    }
    out
}

/// Mean of each column over reports sharing a method, in first-seen order.
pub fn mean_by_method(reports: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    order
        .into_iter()
        .map(|m| {
            let rs: Vec<&MetricsReport> = reports.iter().filter(|r| r.method == m).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let finite: Vec<f64> = rs.iter().filter_map(|r| r.psnr.filter(|p| !p.infinite).map(|p| p.mse)).collect();
            let any_inf = rs.iter().any(|r| r.psnr.is_some_and(|p| p.infinite));
            let psnr = if finite.is_empty() {
                any_inf.then(|| psnr_from_mse(0.0))
            } else {
                Some(psnr_from_mse(finite.iter().sum::<f64>() / finite.len() as f64))
            };
            MetricsReport {
                case_id: 0,
                method: m,
                l1: mean(&|r| r.l1),
                l2: mean(&|r| r.l2),
                l1_la: mean(&|r| r.l1_la),
                l2_la: mean(&|r| r.l2_la),
                psnr,
            }
        })
        .collect()
}
