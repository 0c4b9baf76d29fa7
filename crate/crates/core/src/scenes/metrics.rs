//! Box and mask accuracy at IoU thresholds, mean mask IoU and per-subset breakdowns.

use serde::Serialize;

use super::Tag;
use crate::geomloss::{iou3d, Box3D, GeomError};

/// Fraction of aligned pairs with box IoU at or above `thresh`.
pub fn acc_at_iou(preds: &[Box3D], gts: &[Box3D], thresh: f64) -> Result<f64, GeomError> {
    if preds.len() != gts.len() {
        return Err(GeomError::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou3d(p, g) >= thresh)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Point-set IoU of two binary masks. An empty union scores 0.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn binarize(m: &[f64]) -> Vec<bool> {
    m.iter()
        .map(|&p| p > crate::geomloss::MASK_THRESHOLD)
        .collect()
}

fn check_masks(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> Result<(), GeomError> {
    if preds.len() != gts.len() {
        return Err(GeomError::LengthMismatch(preds.len(), gts.len()));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(GeomError::LengthMismatch(p.len(), g.len()));
        }
    }
    Ok(())
}

/// Fraction of aligned soft masks whose binarized IoU is at or above `thresh`.
pub fn acc_at_mask_iou(
    preds: &[Vec<f64>],
    gts: &[Vec<f64>],
    thresh: f64,
) -> Result<f64, GeomError> {
    check_masks(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| mask_iou(&binarize(p), &binarize(g)) >= thresh)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean binarized mask IoU.
pub fn miou(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> Result<f64, GeomError> {
    check_masks(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| mask_iou(&binarize(p), &binarize(g)))
        .sum();
    Ok(total / preds.len() as f64)
}

/// Per-sample outcome used by [`subset_report`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleResult {
    pub box_iou: f64,
    pub mask_iou: f64,
    pub tags: Vec<Tag>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub acc25: f64,
    pub acc50: f64,
    pub mask_acc25: f64,
    pub mask_acc50: f64,
    pub miou: f64,
}

impl GroupMetrics {
    fn of(rs: &[&SampleResult]) -> Option<Self> {
        if rs.is_empty() {
            return None;
        }
        let n = rs.len() as f64;
        let frac =
            |f: &dyn Fn(&SampleResult) -> bool| rs.iter().filter(|r| f(r)).count() as f64 / n;
        Some(Self {
            count: rs.len(),
            acc25: frac(&|r| r.box_iou >= 0.25),
            acc50: frac(&|r| r.box_iou >= 0.5),
            mask_acc25: frac(&|r| r.mask_iou >= 0.25),
            mask_acc50: frac(&|r| r.mask_iou >= 0.5),
            miou: rs.iter().map(|r| r.mask_iou).sum::<f64>() / n,
        })
    }
}

/// Metrics overall and per tag group. Groups with no members are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetReport {
    pub overall: Option<GroupMetrics>,
    pub unique: Option<GroupMetrics>,
    pub multiple: Option<GroupMetrics>,
    pub implicit: Option<GroupMetrics>,
}

pub fn subset_report(results: &[SampleResult]) -> SubsetReport {
    let all: Vec<&SampleResult> = results.iter().collect();
    let with =
        |t: Tag| -> Vec<&SampleResult> { results.iter().filter(|r| r.tags.contains(&t)).collect() };
    SubsetReport {
        overall: GroupMetrics::of(&all),
        unique: GroupMetrics::of(&with(Tag::Unique)),
        multiple: GroupMetrics::of(&with(Tag::Multiple)),
        implicit: GroupMetrics::of(&with(Tag::Implicit)),
    }
}

impl SubsetReport {
    /// Plain-text table, one row per group.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "subset", "n", "acc@.25", "acc@.50", "m@.25", "m@.50", "miou"
        );
        for (name, g) in [
            ("overall", &self.overall),
            ("unique", &self.unique),
            ("multiple", &self.multiple),
            ("implicit", &self.implicit),
        ] {
            match g {
                Some(g) => s.push_str(&format!(
                    "{name:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                    g.count, g.acc25, g.acc50, g.mask_acc25, g.mask_acc50, g.miou
                )),
                None => s.push_str(&format!("{name:<10} {:>6} {:>8}\n", 0, "-")),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [x + 1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn box_accuracy_counts() {
        let gts: Vec<Box3D> = (0..5).map(|_| b(0.0)).collect();
        assert_eq!(acc_at_iou(&gts, &gts, 0.5).unwrap(), 1.0);
        let far: Vec<Box3D> = (0..5).map(|_| b(9.0)).collect();
        assert_eq!(acc_at_iou(&far, &gts, 0.25).unwrap(), 0.0);
        let mixed = vec![b(0.0), b(0.1), b(0.2), b(5.0), b(6.0)];
        assert_eq!(acc_at_iou(&mixed, &gts, 0.5).unwrap(), 0.6);
        assert!(acc_at_iou(&mixed[..2], &gts, 0.5).is_err());
    }

    #[test]
    fn mask_metrics() {
        let m = vec![vec![1.0, 0.0, 1.0, 0.0]];
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
        let comp = vec![vec![0.0, 1.0, 0.0, 1.0]];
        assert_eq!(miou(&comp, &m).unwrap(), 0.0);
        let empty = vec![vec![0.0; 4]];
        assert_eq!(miou(&empty, &m).unwrap(), 0.0);
        // per-sample IoUs 1/3 and 1/2
        let p = vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]];
        let g = vec![vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]];
        assert!((miou(&p, &g).unwrap() - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn subsets_partition() {
        let r = |iou: f64, t: Tag| SampleResult {
            box_iou: iou,
            mask_iou: iou,
            tags: vec![t],
        };
        let rs = vec![
            r(0.9, Tag::Unique),
            r(0.1, Tag::Multiple),
            r(0.6, Tag::Multiple),
        ];
        let rep = subset_report(&rs);
        assert!(rep.implicit.is_none());
        let (u, m, o) = (
            rep.unique.unwrap(),
            rep.multiple.unwrap(),
            rep.overall.unwrap(),
        );
        assert_eq!(u.acc50, 1.0);
        assert_eq!(m.acc50, 0.5);
        let weighted = (u.acc50 * u.count as f64 + m.acc50 * m.count as f64) / 3.0;
        assert!((o.acc50 - weighted).abs() < 1e-15);

        let only_unique = subset_report(&[r(0.9, Tag::Unique)]);
        assert!(only_unique.multiple.is_none() && only_unique.implicit.is_none());
        assert!(only_unique.table().contains("multiple        0        -"));
    }
}
