use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub iou: f64,
}

/// Dice `2|P∩G| / (|P|+|G|)` and IoU `|P∩G| / |P∪G|`; two empty masks
/// score 1 on both.
pub fn dice_iou(pred: &Mask, gt: &Mask) -> Result<SegmentationMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        p += a as u64;
        g += b as u64;
        inter += (a && b) as u64;
    }
    let union = p + g - inter;
    if union == 0 {
        return Ok(SegmentationMetrics { dice: 1.0, iou: 1.0 });
    }
    Ok(SegmentationMetrics { dice: 2.0 * inter as f64 / (p + g) as f64, iou: inter as f64 / union as f64 })
}

/// Unweighted mean over images.
pub fn mean_metrics(per_image: &[SegmentationMetrics]) -> Result<SegmentationMetrics> {
    if per_image.is_empty() {
        return Err(Error::Validation("cannot average metrics over an empty dataset".into()));
    }
    let n = per_image.len() as f64;
    Ok(SegmentationMetrics {
        dice: per_image.iter().map(|m| m.dice).sum::<f64>() / n,
        iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
    })
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    // Shifted by the first value: identical inputs give their value exactly.
    let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, bits: &[u8]) -> Mask {
        Mask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn identical_disjoint_and_half_subset() {
        let gt = mask(4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice_iou(&gt, &gt).unwrap(), SegmentationMetrics { dice: 1.0, iou: 1.0 });
        let other = mask(4, &[0, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(dice_iou(&other, &gt).unwrap(), SegmentationMetrics { dice: 0.0, iou: 0.0 });
        // |P| = |G|/2, P ⊂ G: dice = 2·2/(2+4) = 2/3, iou = 2/4.
        let half = mask(4, &[1, 1, 0, 0, 0, 0, 0, 0]);
        let m = dice_iou(&half, &gt).unwrap();
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.iou - 0.5).abs() < 1e-15);
    }

    #[test]
    fn both_empty_scores_one_and_shape_mismatch_errors() {
        let e = mask(2, &[0, 0, 0, 0]);
        assert_eq!(dice_iou(&e, &e).unwrap().dice, 1.0);
        let wide = mask(4, &[0, 0, 0, 0]);
        assert!(matches!(dice_iou(&e, &wide), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_std_single_value_has_zero_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn symmetric_and_dice_iou_identity(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let (a, b): (Vec<u8>, Vec<u8>) = bits.into_iter().unzip();
            let (pa, pb) = (mask(1, &a), mask(1, &b));
            let ab = dice_iou(&pa, &pb).unwrap();
            let ba = dice_iou(&pb, &pa).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.dice >= ab.iou);
            prop_assert!((ab.dice - 2.0 * ab.iou / (1.0 + ab.iou)).abs() < 1e-12);
        }
    }
}
