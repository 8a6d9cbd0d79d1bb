//! Box and mask algebra: IoU, non-maximum suppression, size filtering and
//! score aggregation.

use crate::error::GeometryError;
use crate::types::{BinaryMask, BoundingBox, Detection, MaskSet, ScoreMap, SizeThreshold};

/// Area fraction of the frame covered by the box.
pub fn box_area(b: &BoundingBox) -> f64 {
    (b.x1() - b.x0()) * (b.y1() - b.y0())
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = box_area(a) + box_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, ties by original position.
fn score_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score()
            .total_cmp(&detections[i].score())
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// A detection survives when its IoU with every higher-ranked survivor is
/// below `iou_threshold`. Output is in descending score order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let order = score_order(detections);
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        let keeper = &detections[i].bbox;
        for (later, &j) in order.iter().enumerate().skip(rank + 1) {
            if !suppressed[later] && iou(keeper, &detections[j].bbox) >= iou_threshold {
                suppressed[later] = true;
            }
        }
        kept.push(detections[i].clone());
    }
    kept
}

/// Keeps detections whose box area is strictly below the threshold.
pub fn filter_by_size(detections: &[Detection], threshold: SizeThreshold) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| box_area(&d.bbox) < threshold.value())
        .cloned()
        .collect()
}

/// Confidence-weighted sum of masks, clamped to 1.
///
/// Terms are summed in descending score order regardless of input order, so
/// permuting the mask set yields a bit-identical map.
pub fn aggregate_scores(
    mask_set: &MaskSet,
    width: u32,
    height: u32,
) -> Result<ScoreMap, GeometryError> {
    let terms = sorted_terms(mask_set, width, height)?;
    let mut values = vec![0f32; width as usize * height as usize];
    crate::par::for_each_row_mut(&mut values, width as usize, |y, row| {
        accumulate_row(&terms, y, row)
    });
    Ok(ScoreMap::new(width, height, values)?)
}

/// Single-threaded [`aggregate_scores`], kept for benchmarking.
pub fn aggregate_scores_sequential(
    mask_set: &MaskSet,
    width: u32,
    height: u32,
) -> Result<ScoreMap, GeometryError> {
    let terms = sorted_terms(mask_set, width, height)?;
    let mut values = vec![0f32; width as usize * height as usize];
    for (y, row) in values.chunks_mut(width as usize).enumerate() {
        accumulate_row(&terms, y, row);
    }
    Ok(ScoreMap::new(width, height, values)?)
}

fn sorted_terms(
    mask_set: &MaskSet,
    width: u32,
    height: u32,
) -> Result<Vec<(f64, &BinaryMask)>, GeometryError> {
    let mut terms = Vec::with_capacity(mask_set.len());
    for (mask, det) in mask_set.iter() {
        if (mask.width(), mask.height()) != (width, height) {
            return Err(GeometryError::DimensionMismatch {
                mask: (mask.width(), mask.height()),
                map: (width, height),
            });
        }
        terms.push((det.score(), mask));
    }
    // equal scores add the same value, so their relative order is irrelevant
    terms.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(terms)
}

fn accumulate_row(terms: &[(f64, &BinaryMask)], y: usize, row: &mut [f32]) {
    let width = row.len();
    let base = y * width;
    let mut acc = vec![0f64; width];
    for (score, mask) in terms {
        for (x, a) in acc.iter_mut().enumerate() {
            if mask.get_index(base + x) {
                *a += score;
            }
        }
    }
    for (out, a) in row.iter_mut().zip(acc) {
        *out = a.min(1.0) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BoundingBox, s: f64) -> Detection {
        Detection::new(b, s, "defect").unwrap()
    }

    /// Fraction of cells of an n x n grid whose centers fall in the box.
    fn raster_area(b: &BoundingBox, n: u32) -> f64 {
        BinaryMask::from_box(n, n, b).unwrap().count_ones() as f64 / f64::from(n * n)
    }

    fn raster_iou(a: &BoundingBox, b: &BoundingBox, n: u32) -> f64 {
        let ma = BinaryMask::from_box(n, n, a).unwrap();
        let mb = BinaryMask::from_box(n, n, b).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, q) in ma.iter().zip(mb.iter()) {
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
        inter as f64 / union as f64
    }

    #[test]
    fn areas() {
        assert_eq!(box_area(&bx(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(box_area(&bx(0.0, 0.0, 0.5, 0.5)), 0.25);
        // 1000x1000 raster of (0.1,0.2,0.4,0.8) covers 300*600 cells
        let b = bx(0.1, 0.2, 0.4, 0.8);
        assert_eq!(raster_area(&b, 1000), 0.18);
        assert!((box_area(&b) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.1, 0.2, 0.4, 0.8);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.5, 0.5), &bx(0.5, 0.5, 1.0, 1.0)), 0.0);
        let (p, q) = (bx(0.0, 0.0, 0.5, 1.0), bx(0.25, 0.0, 0.75, 1.0));
        let oracle = raster_iou(&p, &q, 1000);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-9);
        assert!((iou(&p, &q) - oracle).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let a = bx(0.0, 0.0, 0.4, 0.4);
        let b = bx(0.6, 0.6, 1.0, 1.0);
        let out = nms(&[det(a, 0.8), det(a, 0.9), det(b, 0.7)], 0.5);
        assert_eq!(out, vec![det(a, 0.9), det(b, 0.7)]);
    }

    #[test]
    fn nms_ties_keep_lower_index() {
        let a = bx(0.0, 0.0, 0.4, 0.4);
        let first = Detection::new(a, 0.5, "first").unwrap();
        let second = Detection::new(a, 0.5, "second").unwrap();
        assert_eq!(nms(&[first.clone(), second], 0.5), vec![first]);
    }

    #[test]
    fn size_filter_examples() {
        // areas 0.04, 0.25, 0.81
        let dets = vec![
            det(bx(0.0, 0.0, 0.2, 0.2), 0.5),
            det(bx(0.0, 0.0, 0.5, 0.5), 0.5),
            det(bx(0.0, 0.0, 0.9, 0.9), 0.5),
        ];
        let t = SizeThreshold::new(0.72).unwrap();
        assert_eq!(filter_by_size(&dets, t), dets[..2].to_vec());
        let tight = SizeThreshold::new(0.01).unwrap();
        assert!(filter_by_size(&dets, tight).is_empty());
        assert_eq!(filter_by_size(&dets, SizeThreshold::DISABLED), dets);
    }

    #[test]
    fn size_filter_is_strict() {
        let d = det(bx(0.0, 0.0, 0.5, 0.5), 0.5);
        let at = SizeThreshold::new(0.25).unwrap();
        assert!(filter_by_size(&[d], at).is_empty());
    }

    #[test]
    fn aggregate_empty_and_single() {
        let empty = aggregate_scores(&MaskSet::empty("x"), 4, 3).unwrap();
        assert!(empty.is_all_zero());
        let b = bx(0.0, 0.0, 0.5, 0.5);
        let m = BinaryMask::from_box(4, 4, &b).unwrap();
        let set = MaskSet::new("x", vec![m.clone()], vec![det(b, 0.6)]).unwrap();
        let map = aggregate_scores(&set, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if m.get(x, y) { 0.6f32 } else { 0.0 };
                assert_eq!(map.get(x, y), expected);
            }
        }
    }

    #[test]
    fn aggregate_overlap_clamps() {
        let (a, b) = (bx(0.0, 0.0, 0.5, 0.5), bx(0.25, 0.25, 0.75, 0.75));
        let ma = BinaryMask::from_box(8, 8, &a).unwrap();
        let mb = BinaryMask::from_box(8, 8, &b).unwrap();
        let set = MaskSet::new(
            "x",
            vec![ma.clone(), mb.clone()],
            vec![det(a, 0.6), det(b, 0.7)],
        )
        .unwrap();
        let map = aggregate_scores(&set, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let mut sum = 0.0f64;
                if ma.get(x, y) {
                    sum += 0.6;
                }
                if mb.get(x, y) {
                    sum += 0.7;
                }
                assert_eq!(map.get(x, y), sum.min(1.0) as f32, "({x},{y})");
            }
        }
        assert_eq!(map.get(3, 3), 1.0);
        assert_eq!(map.get(0, 0), 0.6);
        assert_eq!(map.get(5, 5), 0.7);
    }

    #[test]
    fn aggregate_rejects_dimension_mismatch() {
        let b = bx(0.0, 0.0, 0.5, 0.5);
        let m = BinaryMask::from_box(4, 4, &b).unwrap();
        let set = MaskSet::new("x", vec![m], vec![det(b, 0.6)]).unwrap();
        assert!(matches!(
            aggregate_scores(&set, 5, 4),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }
}
