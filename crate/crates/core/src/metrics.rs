//! Segmentation loss and the DSC / HD95 evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::phantom::{Mask, Sample};
use crate::segnet::Segmenter;

pub const DICE_EPS: f64 = 1e-5;

/// Scalar nodes of one segmentation loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub cross_entropy: Var,
    pub dice: Var,
    pub total: Var,
}

/// `0.5 * CE + 0.5 * (1 - mean soft Dice)` of `[K,H,W]` logits against a
/// class-index mask. Every channel, background included, enters the Dice mean.
pub fn seg_loss_parts<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Mask) -> Result<SegLoss> {
    let (k, h, w) = g.value(logits).chw()?;
    if (target.height(), target.width()) != (h, w) {
        return Err(Error::Shape {
            op: "seg_loss",
            detail: format!(
                "logits {h}x{w} vs mask {}x{}",
                target.height(),
                target.width()
            ),
        });
    }
    if let Some(&bad) = target.data().iter().find(|&&v| v as usize >= k) {
        return Err(Error::Contract(format!(
            "target class {bad} with {k} logit channels"
        )));
    }
    let onehot = target.one_hot::<T>(k)?;
    let gsum: Vec<T> = onehot
        .data()
        .chunks(h * w)
        .map(|c| c.iter().copied().sum::<T>() + T::from_f64_lossy(DICE_EPS))
        .collect();
    let eps = T::from_f64_lossy(DICE_EPS);
    let half = T::from_f64_lossy(0.5);
    let onehot = g.constant(onehot);

    let logp = g.log_softmax_channel(logits);
    let picked = g.mul(logp, onehot)?;
    let s = g.sum(picked);
    let ce = g.scale(s, -T::one() / T::from_usize(h * w).unwrap());

    let p = g.softmax_channel(logits);
    let pg = g.mul(p, onehot)?;
    let inter = g.sum_spatial(pg);
    let psum = g.sum_spatial(p);
    let num = g.scale(inter, T::from_f64_lossy(2.0));
    let num = g.add_scalar(num, eps);
    let gsum = g.constant(crate::Tensor::from_vec(&[k], gsum)?);
    let den = g.add(psum, gsum)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio);
    let neg = g.scale(mean, -T::one());
    let dice = g.add_scalar(neg, T::one());

    let a = g.scale(ce, half);
    let b = g.scale(dice, half);
    let total = g.add(a, b)?;
    Ok(SegLoss {
        cross_entropy: ce,
        dice,
        total,
    })
}

pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Mask) -> Result<Var> {
    seg_loss_parts(g, logits, target).map(|p| p.total)
}

/// `2|P∩G| / (|P|+|G|)` for class `k`; 1 when both sets are empty.
pub fn dsc(pred: &Mask, gt: &Mask, k: u8) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == k, b == k);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Pixels of class `k` with at least one 4-neighbour outside the class
/// (the canvas edge counts as outside).
pub fn boundary(mask: &Mask, k: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && mask.get(y as usize, x as usize) == k
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != k {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi)
                && inside(yi + 1, xi)
                && inside(yi, xi - 1)
                && inside(yi, xi + 1))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Linear-interpolated percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Distance reported when exactly one of the two sets is empty.
pub fn hd95_sentinel(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Symmetric 95th-percentile boundary distance for class `k`.
pub fn hd95(pred: &Mask, gt: &Mask, k: u8) -> f64 {
    let (bp, bg) = (boundary(pred, k), boundary(gt, k));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => hd95_sentinel(gt.height(), gt.width()),
        _ => percentile(&directed(&bp, &bg), 0.95).max(percentile(&directed(&bg, &bp), 0.95)),
    }
}

/// Metrics of one test sample; `None` where the class is absent from the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: Vec<Option<f64>>,
    pub hd95: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    /// Index `k - 1` holds organ class `k`.
    pub dsc: Vec<Option<f64>>,
    pub hd95: Vec<Option<f64>>,
    pub dsc_avg: f64,
    pub hd95_avg: f64,
    pub samples: Vec<SampleMetrics>,
}

fn mean_some(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricReport {
    /// Aggregates per-sample metrics: class means over samples whose
    /// ground truth contains the class, then the mean over classes.
    pub fn from_samples(num_classes: usize, samples: Vec<SampleMetrics>) -> Self {
        let per = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| mean_some(samples.iter().map(f));
        let dsc: Vec<Option<f64>> = (0..num_classes).map(|k| per(&|s| s.dsc[k])).collect();
        let hd95: Vec<Option<f64>> = (0..num_classes).map(|k| per(&|s| s.hd95[k])).collect();
        let dsc_avg = mean_some(dsc.iter().copied()).unwrap_or(0.0);
        let hd95_avg = mean_some(hd95.iter().copied()).unwrap_or(0.0);
        Self {
            num_classes,
            dsc,
            hd95,
            dsc_avg,
            hd95_avg,
            samples,
        }
    }

    fn cell(v: Option<f64>, prec: usize) -> String {
        v.map_or("-".into(), |x| format!("{x:.prec$}"))
    }

    /// Human-readable table: one row per metric, class columns then the average.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}{:>10}", "metric", "Avg");
        for k in 1..=self.num_classes {
            let _ = write!(s, "{:>10}", format!("class{k}"));
        }
        s.push('\n');
        let _ = write!(s, "{:<8}{:>10.3}", "DSC", self.dsc_avg);
        for v in &self.dsc {
            let _ = write!(s, "{:>10}", Self::cell(*v, 3));
        }
        s.push('\n');
        let _ = write!(s, "{:<8}{:>10.2}", "HD95", self.hd95_avg);
        for v in &self.hd95 {
            let _ = write!(s, "{:>10}", Self::cell(*v, 2));
        }
        s.push('\n');
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("metric,avg");
        for k in 1..=self.num_classes {
            let _ = write!(s, ",class{k}");
        }
        s.push('\n');
        for (name, avg, vals) in [
            ("dsc", self.dsc_avg, &self.dsc),
            ("hd95", self.hd95_avg, &self.hd95),
        ] {
            let _ = write!(s, "{name},{avg}");
            for v in vals {
                let _ = write!(s, ",{}", v.map_or(String::new(), |x| x.to_string()));
            }
            s.push('\n');
        }
        s
    }
}

pub fn sample_metrics(pred: &Mask, gt: &Mask, id: &str, num_classes: usize) -> SampleMetrics {
    let mut m = SampleMetrics {
        id: id.to_string(),
        dsc: Vec::with_capacity(num_classes),
        hd95: Vec::with_capacity(num_classes),
    };
    for k in 1..=num_classes as u8 {
        let present = gt.contains(k);
        m.dsc.push(present.then(|| dsc(pred, gt, k)));
        m.hd95.push(present.then(|| hd95(pred, gt, k)));
    }
    m
}

/// Runs `model` over `test` and reports per-class and averaged metrics.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    test: &[Sample],
    num_classes: usize,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Contract(
            "evaluate needs a non-empty test split".into(),
        ));
    }
    let samples = test
        .iter()
        .map(|s| {
            let pred = model.segment(s)?;
            Ok(sample_metrics(&pred, &s.mask, &s.id, num_classes))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(num_classes, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
        assert!((percentile(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn sentinel_for_sixty_four() {
        assert!((hd95_sentinel(64, 64) - 90.51).abs() < 5e-3);
    }
}
