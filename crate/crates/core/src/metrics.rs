//! Confusion-matrix metrics and evaluation reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{infer_volume, VcNet};
use crate::volume::{VesselMask, Volume3D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`; two empty masks agree perfectly (1).
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FP)`; `None` when nothing was predicted.
    pub fn precision(&self) -> Option<f64> {
        let den = self.tp + self.fp;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    /// `FP / (FP + TN)`; `None` when the ground truth has no negatives.
    pub fn fpr(&self) -> Option<f64> {
        let den = self.fp + self.tn;
        (den > 0).then(|| self.fp as f64 / den as f64)
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

pub fn confusion(pred: &VesselMask, gt: &VesselMask) -> Result<Confusion> {
    if pred.dims() != gt.dims() {
        return Err(CoreError::DimensionMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub dice: f64,
    pub precision: Option<f64>,
    pub fpr: Option<f64>,
    pub inference_seconds: f64,
    pub confusion: Confusion,
}

impl ReportRow {
    pub fn from_confusion(case: impl Into<String>, c: Confusion, seconds: f64) -> Self {
        Self { case: case.into(), dice: c.dice(), precision: c.precision(), fpr: c.fpr(), inference_seconds: seconds, confusion: c }
    }
}

/// What to score: a ready mask, or a model run with patched inference.
pub enum MaskSource<'a> {
    Mask(&'a VesselMask),
    Model { model: &'a VcNet, threshold: f32 },
}

pub fn evaluate_case(case: &str, pred: MaskSource<'_>, vol: &Volume3D, gt: &VesselMask) -> Result<ReportRow> {
    gt.check_pair(vol)?;
    let (mask, seconds) = match pred {
        MaskSource::Mask(m) => (m.clone(), 0.0),
        MaskSource::Model { model, threshold } => {
            let t = Instant::now();
            let m = infer_volume(model, vol, threshold)?;
            (m, t.elapsed().as_secs_f64())
        }
    };
    Ok(ReportRow::from_confusion(case, confusion(&mask, gt)?, seconds))
}

/// Per-case rows plus an aggregate row pooled over all voxels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn aggregate(&self) -> ReportRow {
        let mut c = Confusion::default();
        let mut secs = 0.0;
        for r in &self.rows {
            c.tp += r.confusion.tp;
            c.fp += r.confusion.fp;
            c.fn_ += r.confusion.fn_;
            c.tn += r.confusion.tn;
            secs += r.inference_seconds;
        }
        ReportRow::from_confusion("aggregate", c, secs)
    }

    fn all_rows(&self) -> Vec<ReportRow> {
        let mut rows = self.rows.clone();
        rows.push(self.aggregate());
        rows
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("case,dice,precision,fpr,inference_seconds\n");
        for r in self.all_rows() {
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{:.3}",
                r.case,
                r.dice,
                opt(r.precision),
                opt(r.fpr),
                r.inference_seconds
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.all_rows() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 4x2x2 pair with TP=3, FP=1, FN=2, TN=10.
    pub(crate) fn hand_case() -> (VesselMask, VesselMask) {
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let gt = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        (
            VesselMask::new([4, 2, 2], pred.to_vec()).unwrap(),
            VesselMask::new([4, 2, 2], gt.to_vec()).unwrap(),
        )
    }

    #[test]
    fn hand_case_counts() {
        let (p, g) = hand_case();
        let c = confusion(&p, &g).unwrap();
        assert_eq!(c, Confusion { tp: 3, fp: 1, fn_: 2, tn: 10 });
        assert!((c.dice() - 6.0 / 9.0).abs() < 1e-12);
        assert_eq!(c.precision(), Some(0.75));
        assert_eq!(c.fpr(), Some(1.0 / 11.0));
    }

    #[test]
    fn degenerate_denominators() {
        let e = VesselMask::empty([2, 2, 1]);
        let c = confusion(&e, &e).unwrap();
        assert_eq!(c.dice(), 1.0);
        assert_eq!(c.precision(), None);
        let f = VesselMask::full([2, 2, 1]);
        let c = confusion(&f, &f).unwrap();
        assert_eq!((c.dice(), c.fpr()), (1.0, None));
        let c = confusion(&f, &e).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn report_formats() {
        let (p, g) = hand_case();
        let vol = Volume3D::zeros([4, 2, 2]);
        let mut r = Report::default();
        r.push(evaluate_case("a", MaskSource::Mask(&p), &vol, &g).unwrap());
        r.push(evaluate_case("b", MaskSource::Mask(&p), &vol, &g).unwrap());
        assert_eq!(r.aggregate().dice, r.rows[0].dice);
        let csv = r.to_csv();
        assert!(csv.starts_with("case,dice,precision,fpr,inference_seconds\na,0.666667,0.750000,0.090909,"));
        assert_eq!(r.to_jsonl().unwrap().lines().count(), 3);
    }
}
