//! Binary cross-entropy on logits and confusion-matrix metrics.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean over all pixels of `max(z,0) − z·g + ln(1 + e^−|z|)`, the overflow-free
/// form of `−[g·ln σ(z) + (1−g)·ln(1−σ(z))]`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor4<T>, targets: &Tensor4<T>) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(shape_err!(
            "logits {} and targets {} differ",
            logits.shape(),
            targets.shape()
        ));
    }
    let mut total = T::zero();
    for (&z, &g) in logits.data().iter().zip(targets.data()) {
        if g != T::zero() && g != T::one() {
            return Err(Error::InvalidArgument(format!("target value {g} is not binary")));
        }
        total += z.max(T::zero()) - z * g + (-z.abs()).exp().ln_1p();
    }
    Ok(total / T::of(logits.numel() as f64))
}

/// 1 where `prob > threshold`, else 0. Ties go to 0.
pub fn binarize<T: Scalar>(prob: &Tensor4<T>, threshold: f64) -> Tensor4<T> {
    let th = T::of(threshold);
    prob.map(|p| if p > th { T::one() } else { T::zero() })
}

/// Pixel tallies of a binary prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn report(&self) -> MetricReport {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        MetricReport {
            se: ratio(self.tp, self.tp + self.fn_),
            sp: ratio(self.tn, self.tn + self.fp),
            acc: ratio(self.tp + self.tn, self.total()),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            counts: *self,
        }
    }
}

/// Sensitivity, specificity, accuracy and F1. `None` marks a metric whose
/// denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
    pub counts: ConfusionCounts,
}

pub const CSV_HEADER: &str = "se,sp,acc,f1,tp,fp,fn,tn";

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

impl MetricReport {
    /// `se,sp,acc,f1,tp,fp,fn,tn`
    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{}",
            fmt_metric(self.se),
            fmt_metric(self.sp),
            fmt_metric(self.acc),
            fmt_metric(self.f1),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        )
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        let c = &self.counts;
        format!(
            "se={}\nsp={}\nacc={}\nf1={}\ntp={}\nfp={}\nfn={}\ntn={}\n",
            fmt_metric(self.se),
            fmt_metric(self.sp),
            fmt_metric(self.acc),
            fmt_metric(self.f1),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Se={} Sp={} F1={} Acc={}",
            fmt_metric(self.se),
            fmt_metric(self.sp),
            fmt_metric(self.f1),
            fmt_metric(self.acc)
        )
    }
}

fn is_one<T: Scalar>(v: T, what: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::InvalidArgument(format!("{what} value {v} is not binary")))
    }
}

/// Tallies TP/FP/FN/TN over binary masks, optionally restricted to the
/// pixels where `fov` is non-zero.
pub fn confusion_counts<T: Scalar>(
    pred: &Tensor4<T>,
    gt: &Tensor4<T>,
    fov: Option<&Tensor4<T>>,
) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("prediction {} and ground truth {} differ", pred.shape(), gt.shape()));
    }
    if let Some(m) = fov {
        if m.shape() != pred.shape() {
            return Err(shape_err!("field-of-view mask {} does not match {}", m.shape(), pred.shape()));
        }
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if let Some(m) = fov {
            if m.data()[i] == T::zero() {
                continue;
            }
        }
        match (is_one(p, "prediction")?, is_one(g, "ground truth")?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn metrics_from_masks<T: Scalar>(
    pred: &Tensor4<T>,
    gt: &Tensor4<T>,
    fov: Option<&Tensor4<T>>,
) -> Result<MetricReport> {
    Ok(confusion_counts(pred, gt, fov)?.report())
}
