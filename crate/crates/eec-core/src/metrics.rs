//! Mask-quality and association metrics.
//!
//! Per-frame metrics return `Option<f64>`: `None` means *undefined for this
//! frame* (e.g. region similarity when the ground truth is empty) and is
//! excluded from aggregation rather than counted as zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A binary segmentation mask on an `h x w` pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroDim { what: "mask height/width" });
        }
        if bits.len() != h * w {
            return Err(Error::DataLength { expected: h * w, got: bits.len() });
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![false; h * w])
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                bits.push(f(i, j));
            }
        }
        Self::new(h, w, bits)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.w + j] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Whether any pixel is foreground.
    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major 0/1 labels, one per pixel, as consumed by memory banks.
    pub fn to_labels(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::SpatialMismatch { a: (self.h, self.w), b: (other.h, other.w) });
        }
        Ok(())
    }
}

/// Intersection over union. Undefined when the ground truth is empty; an
/// empty prediction against a non-empty ground truth scores 0.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    if !gt.any() {
        return Ok(None);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.bits.iter().zip(&gt.bits) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok(Some(inter as f64 / union as f64))
}

fn centroid(m: &Mask) -> Option<(f64, f64)> {
    let mut si = 0.0;
    let mut sj = 0.0;
    let mut n = 0usize;
    for i in 0..m.h {
        for j in 0..m.w {
            if m.get(i, j) {
                si += i as f64;
                sj += j as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((si / n as f64, sj / n as f64))
    }
}

/// Centroid distance between prediction and ground truth, normalised by
/// the image diagonal. Undefined when either mask is empty.
pub fn location_error(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    let (Some(cp), Some(cg)) = (centroid(pred), centroid(gt)) else {
        return Ok(None);
    };
    let diag = libm::sqrt((gt.h * gt.h + gt.w * gt.w) as f64);
    Ok(Some(libm::hypot(cp.0 - cg.0, cp.1 - cg.1) / diag))
}

/// Foreground pixels with at least one background 4-neighbour, where
/// pixels beyond the image border count as background.
pub fn boundary_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..m.h {
        for j in 0..m.w {
            if !m.get(i, j) {
                continue;
            }
            let bg_up = i == 0 || !m.get(i - 1, j);
            let bg_down = i + 1 == m.h || !m.get(i + 1, j);
            let bg_left = j == 0 || !m.get(i, j - 1);
            let bg_right = j + 1 == m.w || !m.get(i, j + 1);
            if bg_up || bg_down || bg_left || bg_right {
                out.push((i, j));
            }
        }
    }
    out
}

/// Matching tolerance for contour accuracy: 0.8% of the image diagonal,
/// rounded, and at least one pixel.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = libm::sqrt((h * h + w * w) as f64);
    let r = libm::round(0.008 * diag) as usize;
    r.max(1)
}

/// Marks every grid cell within Chebyshev distance `rho` of some pixel in
/// `pixels`.
fn dilate_chebyshev(pixels: &[(usize, usize)], h: usize, w: usize, rho: usize) -> Vec<bool> {
    let mut marked = vec![false; h * w];
    for &(i, j) in pixels {
        let i0 = i.saturating_sub(rho);
        let i1 = (i + rho).min(h - 1);
        let j0 = j.saturating_sub(rho);
        let j1 = (j + rho).min(w - 1);
        for ii in i0..=i1 {
            for jj in j0..=j1 {
                marked[ii * w + jj] = true;
            }
        }
    }
    marked
}

/// Boundary F-measure: precision and recall of boundary pixels matched
/// within Chebyshev distance [`boundary_tolerance`], combined as
/// `2PR / (P + R)` (0 when both are 0). Undefined when the ground truth
/// is empty.
pub fn contour_accuracy(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    if !gt.any() {
        return Ok(None);
    }
    let rho = boundary_tolerance(gt.h, gt.w);
    let pred_b = boundary_pixels(pred);
    let gt_b = boundary_pixels(gt);
    // A non-empty mask always has boundary pixels; only pred can be empty.
    if pred_b.is_empty() {
        return Ok(Some(0.0));
    }
    let near_gt = dilate_chebyshev(&gt_b, gt.h, gt.w, rho);
    let near_pred = dilate_chebyshev(&pred_b, gt.h, gt.w, rho);
    let matched_pred = pred_b.iter().filter(|&&(i, j)| near_gt[i * gt.w + j]).count();
    let matched_gt = gt_b.iter().filter(|&&(i, j)| near_pred[i * gt.w + j]).count();
    let precision = matched_pred as f64 / pred_b.len() as f64;
    let recall = matched_gt as f64 / gt_b.len() as f64;
    if precision + recall == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some(2.0 * precision * recall / (precision + recall)))
}

/// Balanced visibility accuracy over `(gt_visible, pred_visible)` frame
/// pairs: mean of the true-positive and true-negative rates. Undefined
/// unless both ground-truth classes occur.
pub fn balanced_accuracy(frames: &[(bool, bool)]) -> Option<f64> {
    let mut tp = 0usize;
    let mut fnr = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for &(gt, pred) in frames {
        match (gt, pred) {
            (true, true) => tp += 1,
            (true, false) => fnr += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let pos = tp + fnr;
    let neg = tn + fp;
    if pos == 0 || neg == 0 {
        return None;
    }
    Some((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Fraction of frames whose IoU strictly exceeds 0.5. Undefined on an
/// empty list.
pub fn association_accuracy(ious: &[f64]) -> Option<f64> {
    if ious.is_empty() {
        return None;
    }
    let hits = ious.iter().filter(|&&v| v > 0.5).count();
    Some(hits as f64 / ious.len() as f64)
}

/// All per-frame metrics for one prediction / ground-truth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePairResult {
    pub iou: Option<f64>,
    pub le: Option<f64>,
    pub ca: Option<f64>,
    pub gt_visible: bool,
    pub pred_visible: bool,
}

pub fn evaluate_pair(pred: &Mask, gt: &Mask) -> Result<FramePairResult> {
    Ok(FramePairResult {
        iou: iou(pred, gt)?,
        le: location_error(pred, gt)?,
        ca: contour_accuracy(pred, gt)?,
        gt_visible: gt.any(),
        pred_visible: pred.any(),
    })
}

/// Sequence-level aggregation: means over the frames where each metric is
/// defined, plus visibility and association statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub frames: usize,
    pub mean_iou: Option<f64>,
    pub iou_frames: usize,
    pub mean_le: Option<f64>,
    pub le_frames: usize,
    pub mean_ca: Option<f64>,
    pub ca_frames: usize,
    pub balanced_accuracy: Option<f64>,
    pub association_accuracy: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        (None, 0)
    } else {
        (Some(sum / n as f64), n)
    }
}

pub fn aggregate(results: &[FramePairResult]) -> MetricSummary {
    let (mean_iou, iou_frames) = mean_defined(results.iter().map(|r| r.iou));
    let (mean_le, le_frames) = mean_defined(results.iter().map(|r| r.le));
    let (mean_ca, ca_frames) = mean_defined(results.iter().map(|r| r.ca));
    let visibility: Vec<(bool, bool)> = results.iter().map(|r| (r.gt_visible, r.pred_visible)).collect();
    let ious: Vec<f64> = results.iter().filter_map(|r| r.iou).collect();
    MetricSummary {
        frames: results.len(),
        mean_iou,
        iou_frames,
        mean_le,
        le_frames,
        mean_ca,
        ca_frames,
        balanced_accuracy: balanced_accuracy(&visibility),
        association_accuracy: association_accuracy(&ious),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, i0: usize, i1: usize, j0: usize, j1: usize) -> Mask {
        Mask::from_fn(h, w, |i, j| i >= i0 && i <= i1 && j >= j0 && j <= j1).unwrap()
    }

    #[test]
    fn iou_of_overlapping_rectangles_is_exact() {
        // Two 2x4 rectangles sharing a 2x2 corner: 4 / (8 + 8 - 4) = 1/3.
        let a = rect(8, 8, 1, 2, 1, 4);
        let b = rect(8, 8, 1, 2, 3, 6);
        assert_eq!(iou(&a, &b).unwrap(), Some(1.0 / 3.0));
        assert_eq!(iou(&a, &a).unwrap(), Some(1.0));
        let far = rect(8, 8, 5, 6, 5, 6);
        assert_eq!(iou(&a, &far).unwrap(), Some(0.0));
    }

    #[test]
    fn iou_undefined_only_for_empty_ground_truth() {
        let empty = Mask::empty(4, 4).unwrap();
        let full = rect(4, 4, 0, 1, 0, 1);
        assert_eq!(iou(&full, &empty).unwrap(), None);
        assert_eq!(iou(&empty, &full).unwrap(), Some(0.0));
        assert_eq!(iou(&empty, &empty).unwrap(), None);
    }

    #[test]
    fn location_error_normalises_by_diagonal() {
        // Single pixels at (0, 0) and (3, 4): distance 5 on a 100x100 grid.
        let a = rect(100, 100, 0, 0, 0, 0);
        let b = rect(100, 100, 3, 3, 4, 4);
        assert_eq!(location_error(&a, &b).unwrap(), Some(5.0 / libm::sqrt(20000.0)));
        assert_eq!(location_error(&a, &a).unwrap(), Some(0.0));
        let empty = Mask::empty(100, 100).unwrap();
        assert_eq!(location_error(&a, &empty).unwrap(), None);
        assert_eq!(location_error(&empty, &a).unwrap(), None);
    }

    #[test]
    fn centroid_of_rectangle_is_its_middle() {
        let m = rect(10, 10, 1, 2, 3, 4);
        assert_eq!(centroid(&m), Some((1.5, 3.5)));
    }

    #[test]
    fn boundary_requires_a_background_four_neighbour() {
        // Filled 3x3 block inside a 5x5 grid: the centre pixel is interior.
        let block = rect(5, 5, 1, 3, 1, 3);
        let b = boundary_pixels(&block);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // The image border counts as background: a full mask is all boundary
        // except interior pixels.
        let full = Mask::from_fn(3, 3, |_, _| true).unwrap();
        let fb = boundary_pixels(&full);
        assert_eq!(fb.len(), 8);
        assert!(!fb.contains(&(1, 1)));
        // A one-pixel-wide line is entirely boundary.
        let line = rect(4, 6, 2, 2, 0, 5);
        assert_eq!(boundary_pixels(&line).len(), 6);
    }

    #[test]
    fn boundary_tolerance_matches_known_grids() {
        assert_eq!(boundary_tolerance(100, 100), 1);
        assert_eq!(boundary_tolerance(480, 854), 8);
        assert_eq!(boundary_tolerance(4, 4), 1);
    }

    #[test]
    fn contour_accuracy_perfect_shifted_and_disjoint() {
        let a = rect(64, 64, 10, 20, 10, 20);
        assert_eq!(contour_accuracy(&a, &a).unwrap(), Some(1.0));
        // One-pixel shift stays within the tolerance (rho = 1 at 64x64).
        let shifted = rect(64, 64, 11, 21, 10, 20);
        assert_eq!(contour_accuracy(&shifted, &a).unwrap(), Some(1.0));
        // Far-apart boundaries match nothing.
        let far = rect(64, 64, 50, 60, 50, 60);
        assert_eq!(contour_accuracy(&far, &a).unwrap(), Some(0.0));
        // Empty prediction scores 0; empty ground truth is undefined.
        let empty = Mask::empty(64, 64).unwrap();
        assert_eq!(contour_accuracy(&empty, &a).unwrap(), Some(0.0));
        assert_eq!(contour_accuracy(&a, &empty).unwrap(), None);
    }

    /// Pairwise-distance reference for the boundary F-measure, sharing only
    /// the boundary definition with the implementation under test.
    fn contour_accuracy_oracle(pred: &Mask, gt: &Mask) -> Option<f64> {
        if !gt.any() {
            return None;
        }
        let rho = boundary_tolerance(gt.h(), gt.w()) as isize;
        let pb = boundary_pixels(pred);
        let gb = boundary_pixels(gt);
        if pb.is_empty() {
            return Some(0.0);
        }
        let chebyshev_close = |a: (usize, usize), b: (usize, usize)| {
            let di = (a.0 as isize - b.0 as isize).abs();
            let dj = (a.1 as isize - b.1 as isize).abs();
            di.max(dj) <= rho
        };
        let mp = pb.iter().filter(|&&p| gb.iter().any(|&g| chebyshev_close(p, g))).count();
        let mg = gb.iter().filter(|&&g| pb.iter().any(|&p| chebyshev_close(p, g))).count();
        let precision = mp as f64 / pb.len() as f64;
        let recall = mg as f64 / gb.len() as f64;
        if precision + recall == 0.0 {
            Some(0.0)
        } else {
            Some(2.0 * precision * recall / (precision + recall))
        }
    }

    #[test]
    fn contour_accuracy_matches_pairwise_oracle_on_random_masks() {
        let mut r = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..40 {
            let h = r.random_range(1..20);
            let w = r.random_range(1..20);
            let density = r.random_range(0.1..0.9);
            let pred = Mask::from_fn(h, w, |_, _| r.random_range(0.0..1.0) < density).unwrap();
            let gt = Mask::from_fn(h, w, |_, _| r.random_range(0.0..1.0) < density).unwrap();
            assert_eq!(contour_accuracy(&pred, &gt).unwrap(), contour_accuracy_oracle(&pred, &gt));
        }
    }

    #[test]
    fn balanced_accuracy_needs_both_classes() {
        let mixed = [(true, true), (true, false), (false, false), (false, true)];
        assert_eq!(balanced_accuracy(&mixed), Some(0.5));
        let perfect = [(true, true), (false, false)];
        assert_eq!(balanced_accuracy(&perfect), Some(1.0));
        assert_eq!(balanced_accuracy(&[(true, true), (true, true)]), None);
        assert_eq!(balanced_accuracy(&[]), None);
    }

    #[test]
    fn association_counts_strictly_above_half() {
        assert_eq!(association_accuracy(&[0.6, 0.4, 0.51]), Some(2.0 / 3.0));
        assert_eq!(association_accuracy(&[0.5]), Some(0.0));
        assert_eq!(association_accuracy(&[]), None);
    }

    #[test]
    fn aggregate_skips_undefined_frames() {
        let pred = rect(8, 8, 0, 1, 0, 1);
        let gt = rect(8, 8, 0, 1, 0, 3);
        let empty = Mask::empty(8, 8).unwrap();
        let results = [
            evaluate_pair(&pred, &gt).unwrap(),
            evaluate_pair(&empty, &empty).unwrap(),
            evaluate_pair(&pred, &empty).unwrap(),
        ];
        let summary = aggregate(&results);
        assert_eq!(summary.frames, 3);
        assert_eq!(summary.iou_frames, 1);
        assert_eq!(summary.mean_iou, Some(0.5));
        assert_eq!(summary.le_frames, 1);
        assert_eq!(summary.ca_frames, 1);
        // gt visible in 1 frame (predicted), invisible in 2 (one false
        // positive): TPR 1, TNR 0.5.
        assert_eq!(summary.balanced_accuracy, Some(0.75));
        // The only defined IoU is 0.5, not strictly above 0.5.
        assert_eq!(summary.association_accuracy, Some(0.0));
    }

    #[test]
    fn mask_shape_validation() {
        assert!(Mask::new(0, 3, vec![]).is_err());
        assert!(Mask::new(2, 2, vec![true; 3]).is_err());
        let a = Mask::empty(2, 2).unwrap();
        let b = Mask::empty(2, 3).unwrap();
        assert!(iou(&a, &b).is_err());
        assert!(location_error(&a, &b).is_err());
        assert!(contour_accuracy(&a, &b).is_err());
    }
}
