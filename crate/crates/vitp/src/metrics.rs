//! Evaluation: mIoU, PQ, and mask AP, each with dataset-level accumulators
//! that merge counts before the final division, plus the ground-truth
//! relabeling harness used for upper-bound analysis.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{highest_value_point, Instance, ProposalSet, SegResult, SegmentInfo, VOID_ID};

/// Reference annotation for one image.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    /// Class id per pixel; `VOID_ID` pixels are excluded from evaluation.
    pub semantic: Vec<u16>,
    /// Segment id per pixel, 0 = void.
    pub panoptic_map: Vec<u32>,
    pub panoptic_segments: Vec<SegmentInfo>,
    /// Thing instances: (binary mask, class id).
    pub instances: Vec<(Vec<bool>, usize)>,
}

/// Matched / unmatched counts where the metric defines them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

/// One metric outcome: headline value in [0,1] plus the per-class spread.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub value: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub counts: Option<MatchCounts>,
}

/// Intersection-over-union of two binary masks; 0 when the union is empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "iou",
            detail: format!("{} vs {} pixels", a.len(), b.len()),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ---- mIoU ----

/// Global confusion counts for semantic evaluation. Void ground-truth
/// pixels are excluded from both intersection and union; predictions of
/// classes >= K (including void) count only against the ground truth side.
pub struct MiouAccumulator {
    k: usize,
    inter: Vec<u64>,
    gt_count: Vec<u64>,
    pred_count: Vec<u64>,
}

impl MiouAccumulator {
    pub fn new(k: usize) -> Self {
        MiouAccumulator {
            k,
            inter: vec![0; k],
            gt_count: vec![0; k],
            pred_count: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &[u16], gt_semantic: &[u16]) -> Result<()> {
        if pred.len() != gt_semantic.len() {
            return Err(Error::ShapeMismatch {
                op: "miou",
                detail: format!("{} vs {} pixels", pred.len(), gt_semantic.len()),
            });
        }
        for (&p, &g) in pred.iter().zip(gt_semantic) {
            if g == VOID_ID {
                continue;
            }
            let g = g as usize;
            if g >= self.k {
                return Err(Error::InvalidInput(format!("gt class {} >= K={}", g, self.k)));
            }
            self.gt_count[g] += 1;
            if (p as usize) < self.k {
                self.pred_count[p as usize] += 1;
                if p as usize == g {
                    self.inter[g] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            if self.gt_count[c] == 0 {
                continue;
            }
            let union = self.gt_count[c] + self.pred_count[c] - self.inter[c];
            let v = if union == 0 { 0.0 } else { self.inter[c] as f64 / union as f64 };
            per_class.insert(c, v);
            sum += v;
            present += 1;
        }
        MetricReport {
            task: "semantic".into(),
            value: if present == 0 { 0.0 } else { sum / present as f64 },
            per_class,
            counts: None,
        }
    }
}

/// Single-pair convenience wrapper.
pub fn miou(pred: &[u16], gt: &GroundTruth, k: usize) -> Result<MetricReport> {
    let mut acc = MiouAccumulator::new(k);
    acc.add(pred, &gt.semantic)?;
    Ok(acc.report())
}

// ---- PQ ----

#[derive(Default, Clone, Copy)]
struct PqStat {
    tp: usize,
    fp: usize,
    fn_count: usize,
    iou_sum: f64,
}

/// Per-class PQ match statistics accumulated over images.
#[derive(Default)]
pub struct PqAccumulator {
    stats: BTreeMap<usize, PqStat>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        pred_map: &[u32],
        pred_segments: &[SegmentInfo],
        gt: &GroundTruth,
    ) -> Result<()> {
        if pred_map.len() != gt.panoptic_map.len() {
            return Err(Error::ShapeMismatch {
                op: "pq",
                detail: format!("{} vs {} pixels", pred_map.len(), gt.panoptic_map.len()),
            });
        }
        for seg in pred_segments {
            if seg.id == 0 {
                return Err(Error::InvalidInput("panoptic segment id 0 is reserved for void".into()));
            }
        }
        // one pass: contingency of (pred id, gt id) plus segment sizes
        let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        let mut pred_size: BTreeMap<u32, u64> = BTreeMap::new();
        let mut gt_size: BTreeMap<u32, u64> = BTreeMap::new();
        for (&p, &g) in pred_map.iter().zip(&gt.panoptic_map) {
            if p != 0 {
                *pred_size.entry(p).or_insert(0) += 1;
            }
            if g != 0 {
                *gt_size.entry(g).or_insert(0) += 1;
            }
            if p != 0 && g != 0 {
                *overlap.entry((p, g)).or_insert(0) += 1;
            }
        }
        let pred_class: BTreeMap<u32, usize> =
            pred_segments.iter().map(|s| (s.id, s.class_id)).collect();
        let gt_class: BTreeMap<u32, usize> =
            gt.panoptic_segments.iter().map(|s| (s.id, s.class_id)).collect();

        let mut pred_matched: BTreeMap<u32, bool> = BTreeMap::new();
        let mut gt_matched: BTreeMap<u32, bool> = BTreeMap::new();
        for (&(p, g), &inter) in &overlap {
            let (pc, gc) = match (pred_class.get(&p), gt_class.get(&g)) {
                (Some(&pc), Some(&gc)) => (pc, gc),
                _ => continue,
            };
            if pc != gc {
                continue;
            }
            let union = pred_size[&p] + gt_size[&g] - inter;
            let v = inter as f64 / union as f64;
            if v > 0.5 {
                // IoU > 0.5 matches are provably one-to-one
                assert!(
                    !pred_matched.get(&p).copied().unwrap_or(false)
                        && !gt_matched.get(&g).copied().unwrap_or(false),
                    "PQ matching uniqueness violated"
                );
                pred_matched.insert(p, true);
                gt_matched.insert(g, true);
                let stat = self.stats.entry(pc).or_default();
                stat.tp += 1;
                stat.iou_sum += v;
            }
        }
        for seg in pred_segments {
            if !pred_matched.get(&seg.id).copied().unwrap_or(false) {
                self.stats.entry(seg.class_id).or_default().fp += 1;
            }
        }
        for seg in &gt.panoptic_segments {
            if !gt_matched.get(&seg.id).copied().unwrap_or(false) {
                self.stats.entry(seg.class_id).or_default().fn_count += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut totals = MatchCounts { tp: 0, fp: 0, fn_count: 0 };
        for (&c, s) in &self.stats {
            if s.tp + s.fp + s.fn_count == 0 {
                continue;
            }
            let denom = s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_count as f64;
            let v = if denom == 0.0 { 0.0 } else { s.iou_sum / denom };
            per_class.insert(c, v);
            sum += v;
            totals.tp += s.tp;
            totals.fp += s.fp;
            totals.fn_count += s.fn_count;
        }
        MetricReport {
            task: "panoptic".into(),
            value: if per_class.is_empty() { 0.0 } else { sum / per_class.len() as f64 },
            per_class,
            counts: Some(totals),
        }
    }
}

/// Single-pair PQ.
pub fn pq(pred_map: &[u32], pred_segments: &[SegmentInfo], gt: &GroundTruth) -> Result<MetricReport> {
    let mut acc = PqAccumulator::new();
    acc.add(pred_map, pred_segments, gt)?;
    Ok(acc.report())
}

// ---- AP ----

/// COCO-style IoU thresholds 0.50:0.05:0.95.
pub fn default_ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Pools detections and ground-truth instances across images; matching and
/// the precision-recall integration happen in `report`.
#[derive(Default)]
pub struct ApAccumulator {
    images: Vec<(Vec<Instance>, Vec<(Vec<bool>, usize)>)>,
}

impl ApAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, detections: &[Instance], gt: &GroundTruth) {
        self.images.push((detections.to_vec(), gt.instances.clone()));
    }

    pub fn report(&self, thresholds: &[f64]) -> MetricReport {
        let mut classes: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
        for (_, gts) in &self.images {
            for (_, c) in gts {
                classes.insert(*c);
            }
        }
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        let mut counts = MatchCounts { tp: 0, fp: 0, fn_count: 0 };
        for &c in &classes {
            // detections of this class, sorted by score desc across images
            let mut dets: Vec<(usize, usize)> = Vec::new(); // (image, det index)
            for (img_idx, (ds, _)) in self.images.iter().enumerate() {
                for (di, d) in ds.iter().enumerate() {
                    if d.class_id == c {
                        dets.push((img_idx, di));
                    }
                }
            }
            dets.sort_by(|a, b| {
                let sa = self.images[a.0].0[a.1].score;
                let sb = self.images[b.0].0[b.1].score;
                sb.partial_cmp(&sa)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let n_gt: usize = self
                .images
                .iter()
                .map(|(_, gts)| gts.iter().filter(|(_, gc)| *gc == c).count())
                .sum();
            let mut ap_sum = 0.0;
            for (ti, &t) in thresholds.iter().enumerate() {
                let (ap, tc) = self.ap_at_threshold(c, &dets, n_gt, t);
                ap_sum += ap;
                if ti == 0 {
                    counts.tp += tc.tp;
                    counts.fp += tc.fp;
                    counts.fn_count += tc.fn_count;
                }
            }
            let ap_c = ap_sum / thresholds.len() as f64;
            per_class.insert(c, ap_c);
            sum += ap_c;
        }
        MetricReport {
            task: "instance".into(),
            value: if per_class.is_empty() { 0.0 } else { sum / per_class.len() as f64 },
            per_class,
            counts: Some(counts),
        }
    }

    fn ap_at_threshold(
        &self,
        class: usize,
        dets: &[(usize, usize)],
        n_gt: usize,
        threshold: f64,
    ) -> (f64, MatchCounts) {
        if n_gt == 0 {
            return (0.0, MatchCounts { tp: 0, fp: 0, fn_count: 0 });
        }
        // greedy in score order: each detection takes the best still-free gt
        let mut gt_taken: Vec<Vec<bool>> = self
            .images
            .iter()
            .map(|(_, gts)| vec![false; gts.len()])
            .collect();
        let mut tp_flags = Vec::with_capacity(dets.len());
        for &(img, di) in dets {
            let det = &self.images[img].0[di];
            let gts = &self.images[img].1;
            let mut best = (0.0f64, None);
            for (gi, (gmask, gclass)) in gts.iter().enumerate() {
                if *gclass != class || gt_taken[img][gi] {
                    continue;
                }
                let v = iou(&det.mask, gmask).unwrap_or(0.0);
                if v > best.0 {
                    best = (v, Some(gi));
                }
            }
            if best.0 >= threshold {
                if let Some(gi) = best.1 {
                    gt_taken[img][gi] = true;
                    tp_flags.push(true);
                    continue;
                }
            }
            tp_flags.push(false);
        }
        // 101-point interpolated precision-recall area
        let mut tp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len()); // (recall, precision)
        for (i, &is_tp) in tp_flags.iter().enumerate() {
            if is_tp {
                tp += 1;
            }
            let precision = tp as f64 / (i + 1) as f64;
            let recall = tp as f64 / n_gt as f64;
            curve.push((recall, precision));
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            let p = curve
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, prec)| *prec)
                .fold(0.0f64, f64::max);
            ap += p;
        }
        let total_tp = tp_flags.iter().filter(|&&b| b).count();
        (
            ap / 101.0,
            MatchCounts {
                tp: total_tp,
                fp: tp_flags.len() - total_tp,
                fn_count: n_gt - total_tp,
            },
        )
    }
}

/// Single-image AP at the default thresholds.
pub fn ap(detections: &[Instance], gt: &GroundTruth) -> Result<MetricReport> {
    let mut acc = ApAccumulator::new();
    acc.add(detections, gt);
    Ok(acc.report(&default_ap_thresholds()))
}

// ---- upper bound relabeling ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperBoundMode {
    /// Ground-truth semantic label at the proposal's highest-value point.
    Point,
    /// Class of the maximum-IoU ground-truth segment.
    Mask,
}

impl std::str::FromStr for UpperBoundMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(UpperBoundMode::Point),
            "mask" => Ok(UpperBoundMode::Mask),
            other => Err(Error::InvalidInput(format!("unknown upper-bound mode '{}'", other))),
        }
    }
}

/// Replace every proposal's class scores with a ground-truth one-hot.
/// Proposals without any positive mask value are dropped (count returned);
/// proposals that resolve to void / no overlap get a pure "no object" row.
pub fn upper_bound_relabel(
    proposals: &ProposalSet,
    gt: &GroundTruth,
    mode: UpperBoundMode,
) -> Result<(ProposalSet, usize)> {
    let (h, w) = (proposals.height, proposals.width);
    if (h, w) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op: "upper_bound_relabel",
            detail: format!("proposals {}x{} vs gt {}x{}", h, w, gt.height, gt.width),
        });
    }
    let k = proposals.num_classes();
    let gt_masks: Vec<(usize, Vec<bool>)> = gt
        .panoptic_segments
        .iter()
        .map(|seg| {
            let mask: Vec<bool> = gt.panoptic_map.iter().map(|&v| v == seg.id).collect();
            (seg.class_id, mask)
        })
        .collect();
    let mut masks = Vec::new();
    let mut scores = Vec::new();
    let mut dropped = 0usize;
    for i in 0..proposals.len() {
        let mask = proposals.mask(i);
        let label: Option<usize> = match mode {
            UpperBoundMode::Point => match highest_value_point(mask, h, w) {
                Ok((r, c)) => {
                    let g = gt.semantic[r * w + c];
                    if g == VOID_ID {
                        None
                    } else {
                        Some(g as usize)
                    }
                }
                Err(Error::EmptyProposal) => {
                    dropped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            UpperBoundMode::Mask => {
                if mask.iter().all(|&v| v <= 0.0) {
                    dropped += 1;
                    continue;
                }
                let bin: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
                let mut best = (0.0f64, None);
                for (class_id, gmask) in &gt_masks {
                    let v = iou(&bin, gmask)?;
                    if v > best.0 {
                        best = (v, Some(*class_id));
                    }
                }
                best.1
            }
        };
        let mut row = vec![0.0f32; k + 1];
        match label {
            Some(c) if c < k => row[c] = 1.0,
            Some(c) => {
                return Err(Error::InvalidInput(format!("gt class {} >= K={}", c, k)));
            }
            None => row[k] = 1.0,
        }
        masks.push(mask.to_vec());
        scores.push(row);
    }
    let set = ProposalSet::new(proposals.image_id.clone(), h, w, k, masks, scores)?;
    Ok((set, dropped))
}

/// Dispatch a task result to its metric.
pub fn evaluate(pred: &SegResult, gt: &GroundTruth, k: usize) -> Result<MetricReport> {
    match pred {
        SegResult::Semantic { map, .. } => miou(map, gt, k),
        SegResult::Panoptic { map, segments, .. } => pq(map, segments, gt),
        SegResult::Instances { instances, .. } => ap(instances, gt),
    }
}

/// Dataset-level evaluation: counts merge across images before division.
pub fn evaluate_dataset(items: &[(SegResult, GroundTruth)], k: usize) -> Result<MetricReport> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("empty evaluation set".into()))?;
    match first.0 {
        SegResult::Semantic { .. } => {
            let mut acc = MiouAccumulator::new(k);
            for (pred, gt) in items {
                match pred {
                    SegResult::Semantic { map, .. } => acc.add(map, &gt.semantic)?,
                    _ => return Err(Error::InvalidInput("mixed task tags in evaluation set".into())),
                }
            }
            Ok(acc.report())
        }
        SegResult::Panoptic { .. } => {
            let mut acc = PqAccumulator::new();
            for (pred, gt) in items {
                match pred {
                    SegResult::Panoptic { map, segments, .. } => acc.add(map, segments, gt)?,
                    _ => return Err(Error::InvalidInput("mixed task tags in evaluation set".into())),
                }
            }
            Ok(acc.report())
        }
        SegResult::Instances { .. } => {
            let mut acc = ApAccumulator::new();
            for (pred, gt) in items {
                match pred {
                    SegResult::Instances { instances, .. } => acc.add(instances, gt),
                    _ => return Err(Error::InvalidInput("mixed task tags in evaluation set".into())),
                }
            }
            Ok(acc.report(&default_ap_thresholds()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strip_gt(h: usize, w: usize, semantic: Vec<u16>) -> GroundTruth {
        GroundTruth {
            height: h,
            width: w,
            semantic,
            panoptic_map: vec![0; h * w],
            panoptic_segments: vec![],
            instances: vec![],
        }
    }

    #[test]
    fn iou_cases() {
        let a = vec![true, true, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = vec![false, false, true];
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // 3-pixel strips shifted by one: 2 overlap, 4 union
        let s1 = vec![true, true, true, false];
        let s2 = vec![false, true, true, true];
        assert_eq!(iou(&s1, &s2).unwrap(), 0.5);
        let empty = vec![false; 3];
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        assert!(iou(&a, &vec![true; 4]).is_err());
    }

    #[test]
    fn miou_cases() {
        let gt = strip_gt(1, 4, vec![1, 1, 2, 2]);
        let r = miou(&[1, 1, 2, 2], &gt, 3).unwrap();
        assert_eq!(r.value, 1.0);

        // all predicted class 1 on half-1 / half-2 gt: (0.5 + 0) / 2
        let r = miou(&[1, 1, 1, 1], &gt, 3).unwrap();
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!((r.per_class[&1] - 0.5).abs() < 1e-12);
        assert_eq!(r.per_class[&2], 0.0);

        // void gt pixels are ignored entirely
        let gt = strip_gt(1, 4, vec![1, VOID_ID, 2, 2]);
        let r = miou(&[2, 2, 2, 2], &gt, 3).unwrap();
        assert!((r.per_class[&2] - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Independent per-class double-loop confusion oracle.
    fn miou_oracle(pred: &[u16], gt: &[u16], k: usize) -> f64 {
        let mut vals = Vec::new();
        for c in 0..k as u16 {
            let mut any_gt = false;
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&p, &g) in pred.iter().zip(gt) {
                if g == VOID_ID {
                    continue;
                }
                if g == c {
                    any_gt = true;
                }
                if g == c && p == c {
                    inter += 1;
                }
                if g == c || p == c {
                    union += 1;
                }
            }
            if any_gt {
                vals.push(if union == 0 { 0.0 } else { inter as f64 / union as f64 });
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    #[test]
    fn miou_matches_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (h, w) = (8, 8);
            let k = 4;
            let pred: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..k as u16)).collect();
            let gt_map: Vec<u16> = (0..h * w)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        VOID_ID
                    } else {
                        rng.gen_range(0..k as u16)
                    }
                })
                .collect();
            let gt = strip_gt(h, w, gt_map.clone());
            let fast = miou(&pred, &gt, k).unwrap().value;
            let slow = miou_oracle(&pred, &gt_map, k);
            assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn miou_aggregation_equals_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = 3;
        let gen_map = |rng: &mut ChaCha8Rng| -> Vec<u16> {
            (0..32).map(|_| rng.gen_range(0..k as u16)).collect()
        };
        let (p1, g1) = (gen_map(&mut rng), gen_map(&mut rng));
        let (p2, g2) = (gen_map(&mut rng), gen_map(&mut rng));
        let mut acc = MiouAccumulator::new(k);
        acc.add(&p1, &g1).unwrap();
        acc.add(&p2, &g2).unwrap();
        let dataset_value = acc.report().value;

        let canvas_pred: Vec<u16> = p1.iter().chain(&p2).copied().collect();
        let canvas_gt: Vec<u16> = g1.iter().chain(&g2).copied().collect();
        let gt = strip_gt(1, 64, canvas_gt);
        let canvas_value = miou(&canvas_pred, &gt, k).unwrap().value;
        assert!((dataset_value - canvas_value).abs() < 1e-12);
    }

    #[test]
    fn miou_monotone_degradation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let k = 3;
            let gt_map: Vec<u16> = (0..36).map(|_| rng.gen_range(0..k as u16)).collect();
            let mut pred = gt_map.clone();
            for p in pred.iter_mut() {
                if rng.gen_bool(0.3) {
                    *p = rng.gen_range(0..k as u16);
                }
            }
            let gt = strip_gt(6, 6, gt_map.clone());
            let base = miou(&pred, &gt, k).unwrap().value;
            // flip one currently-correct pixel to a wrong class
            if let Some(idx) = (0..pred.len()).find(|&i| pred[i] == gt_map[i]) {
                let mut worse = pred.clone();
                worse[idx] = (gt_map[idx] + 1) % k as u16;
                let v = miou(&worse, &gt, k).unwrap().value;
                assert!(v <= base + 1e-12, "{} > {}", v, base);
            }
        }
    }

    fn seg(id: u32, class_id: usize, is_thing: bool) -> SegmentInfo {
        SegmentInfo { id, class_id, is_thing }
    }

    #[test]
    fn pq_cases() {
        // identical single-segment maps
        let map: Vec<u32> = vec![1, 1, 0, 0];
        let gt = GroundTruth {
            height: 1,
            width: 4,
            semantic: vec![0; 4],
            panoptic_map: map.clone(),
            panoptic_segments: vec![seg(1, 2, true)],
            instances: vec![],
        };
        let r = pq(&map, &[seg(1, 2, true)], &gt).unwrap();
        assert_eq!(r.value, 1.0);

        // IoU 0.6 single match: pred rows 1..5, gt rows 0..4 of a column
        let mut pred_map = vec![0u32; 6];
        let mut gt_map = vec![0u32; 6];
        for r in 1..5 {
            pred_map[r] = 1;
        }
        for r in 0..4 {
            gt_map[r] = 7;
        }
        let gt = GroundTruth {
            height: 6,
            width: 1,
            semantic: vec![0; 6],
            panoptic_map: gt_map,
            panoptic_segments: vec![seg(7, 1, true)],
            instances: vec![],
        };
        let r = pq(&pred_map, &[seg(1, 1, true)], &gt).unwrap();
        assert!((r.value - 0.6).abs() < 1e-12, "{}", r.value);
        let c = r.counts.unwrap();
        assert_eq!((c.tp, c.fp, c.fn_count), (1, 0, 0));
    }

    /// Brute-force PQ: pairwise IoU via per-pixel double loops.
    fn pq_oracle(
        pred_map: &[u32],
        pred_segs: &[SegmentInfo],
        gt_map: &[u32],
        gt_segs: &[SegmentInfo],
    ) -> f64 {
        let mut per_class: BTreeMap<usize, (usize, usize, usize, f64)> = BTreeMap::new();
        let mut gt_used: Vec<bool> = vec![false; gt_segs.len()];
        let mut pred_used: Vec<bool> = vec![false; pred_segs.len()];
        for (pi, p) in pred_segs.iter().enumerate() {
            for (gi, g) in gt_segs.iter().enumerate() {
                if p.class_id != g.class_id {
                    continue;
                }
                let pm: Vec<bool> = pred_map.iter().map(|&v| v == p.id).collect();
                let gm: Vec<bool> = gt_map.iter().map(|&v| v == g.id).collect();
                let v = iou(&pm, &gm).unwrap();
                if v > 0.5 {
                    let e = per_class.entry(p.class_id).or_insert((0, 0, 0, 0.0));
                    e.0 += 1;
                    e.3 += v;
                    gt_used[gi] = true;
                    pred_used[pi] = true;
                }
            }
        }
        for (pi, p) in pred_segs.iter().enumerate() {
            if !pred_used[pi] {
                per_class.entry(p.class_id).or_insert((0, 0, 0, 0.0)).1 += 1;
            }
        }
        for (gi, g) in gt_segs.iter().enumerate() {
            if !gt_used[gi] {
                per_class.entry(g.class_id).or_insert((0, 0, 0, 0.0)).2 += 1;
            }
        }
        if per_class.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for (_, (tp, fp, fn_c, iou_sum)) in &per_class {
            let denom = *tp as f64 + 0.5 * *fp as f64 + 0.5 * *fn_c as f64;
            sum += if denom == 0.0 { 0.0 } else { iou_sum / denom };
        }
        sum / per_class.len() as f64
    }

    fn random_panoptic(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<u32>, Vec<SegmentInfo>) {
        let n = rng.gen_range(1..4u32);
        let map: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..=n)).collect();
        let segs: Vec<SegmentInfo> = (1..=n)
            .filter(|&id| map.iter().any(|&v| v == id))
            .map(|id| seg(id, rng.gen_range(0..3), true))
            .collect();
        // keep only mapped ids that have segments
        let valid: std::collections::BTreeSet<u32> = segs.iter().map(|s| s.id).collect();
        let map = map
            .into_iter()
            .map(|v| if valid.contains(&v) { v } else { 0 })
            .collect();
        (map, segs)
    }

    #[test]
    fn pq_matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let (h, w) = (8, 8);
            let (pred_map, pred_segs) = random_panoptic(&mut rng, h, w);
            let (gt_map, gt_segs) = random_panoptic(&mut rng, h, w);
            let gt = GroundTruth {
                height: h,
                width: w,
                semantic: vec![0; h * w],
                panoptic_map: gt_map.clone(),
                panoptic_segments: gt_segs.clone(),
                instances: vec![],
            };
            let fast = pq(&pred_map, &pred_segs, &gt).unwrap().value;
            let slow = pq_oracle(&pred_map, &pred_segs, &gt_map, &gt_segs);
            assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
        }
    }

    fn inst(mask: Vec<bool>, class_id: usize, score: f64) -> Instance {
        Instance { mask, class_id, score }
    }

    #[test]
    fn ap_cases() {
        let gmask = vec![true, true, false, false];
        let gt = GroundTruth {
            height: 1,
            width: 4,
            semantic: vec![0; 4],
            panoptic_map: vec![0; 4],
            panoptic_segments: vec![],
            instances: vec![(gmask.clone(), 1)],
        };
        // exact match -> AP 1.0
        let r = ap(&[inst(gmask.clone(), 1, 0.9)], &gt).unwrap();
        assert_eq!(r.value, 1.0);
        // no predictions -> AP 0.0
        let r = ap(&[], &gt).unwrap();
        assert_eq!(r.value, 0.0);
    }

    /// Literal per-prefix rematching oracle at one threshold.
    fn ap_oracle_single_threshold(
        dets: &[Instance],
        gts: &[(Vec<bool>, usize)],
        class: usize,
        t: f64,
    ) -> f64 {
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let n_gt = gts.iter().filter(|(_, c)| *c == class).count();
        if n_gt == 0 {
            return 0.0;
        }
        let run_prefix = |s: usize| -> (usize, usize) {
            let mut taken = vec![false; gts.len()];
            let mut tp = 0;
            for &di in order.iter().take(s) {
                let mut best = (0.0, None);
                for (gi, (gm, gc)) in gts.iter().enumerate() {
                    if *gc != class || taken[gi] {
                        continue;
                    }
                    let v = iou(&dets[di].mask, gm).unwrap();
                    if v > best.0 {
                        best = (v, Some(gi));
                    }
                }
                if best.0 >= t {
                    if let Some(gi) = best.1 {
                        taken[gi] = true;
                        tp += 1;
                    }
                }
            }
            (tp, s)
        };
        let mut ap = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            let mut best_p = 0.0f64;
            for s in 1..=order.len() {
                let (tp, total) = run_prefix(s);
                let recall = tp as f64 / n_gt as f64;
                let precision = tp as f64 / total as f64;
                if recall >= r {
                    best_p = best_p.max(precision);
                }
            }
            ap += best_p;
        }
        ap / 101.0
    }

    #[test]
    fn ap_matches_prefix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let (h, w) = (6, 6);
            let n_gt = rng.gen_range(1..4);
            let n_det = rng.gen_range(0..4);
            let rand_mask = |rng: &mut ChaCha8Rng| -> Vec<bool> {
                let r0 = rng.gen_range(0..h - 2);
                let c0 = rng.gen_range(0..w - 2);
                let rh = rng.gen_range(1..3);
                let rw = rng.gen_range(1..3);
                (0..h * w)
                    .map(|px| {
                        let (r, c) = (px / w, px % w);
                        r >= r0 && r < r0 + rh && c >= c0 && c < c0 + rw
                    })
                    .collect()
            };
            let gts: Vec<(Vec<bool>, usize)> = (0..n_gt).map(|_| (rand_mask(&mut rng), 1)).collect();
            let dets: Vec<Instance> = (0..n_det)
                .map(|_| inst(rand_mask(&mut rng), 1, rng.gen_range(0.0..1.0)))
                .collect();
            let gt = GroundTruth {
                height: h,
                width: w,
                semantic: vec![0; h * w],
                panoptic_map: vec![0; h * w],
                panoptic_segments: vec![],
                instances: gts.clone(),
            };
            for &t in &[0.5, 0.75] {
                let mut acc = ApAccumulator::new();
                acc.add(&dets, &gt);
                let fast = acc.report(&[t]).value;
                let slow = ap_oracle_single_threshold(&dets, &gts, 1, t);
                assert!((fast - slow).abs() < 1e-9, "t={}: {} vs {}", t, fast, slow);
            }
        }
    }

    #[test]
    fn metrics_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = 3;
        let imgs: Vec<(Vec<u16>, Vec<u16>)> = (0..4)
            .map(|_| {
                let p: Vec <u16> = (0..16).map(|_| rng.gen_range(0..k as u16)).collect();
                let g: Vec<u16> = (0..16).map(|_| rng.gen_range(0..k as u16)).collect();
                (p, g)
            })
            .collect();
        let mut fwd = MiouAccumulator::new(k);
        for (p, g) in &imgs {
            fwd.add(p, g).unwrap();
        }
        let mut rev = MiouAccumulator::new(k);
        for (p, g) in imgs.iter().rev() {
            rev.add(p, g).unwrap();
        }
        assert_eq!(fwd.report().value, rev.report().value);
    }

    #[test]
    fn upper_bound_point_mode() {
        // two proposals on a 2-class semantic gt
        let gt = GroundTruth {
            height: 2,
            width: 2,
            semantic: vec![1, 1, 0, 0],
            panoptic_map: vec![1, 1, 2, 2],
            panoptic_segments: vec![seg(1, 1, true), seg(2, 0, false)],
            instances: vec![],
        };
        let masks = vec![vec![0.9, 0.8, 0.0, 0.0], vec![0.0, 0.0, 0.7, 0.9]];
        let scores = vec![vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2]];
        let ps = ProposalSet::new("x", 2, 2, 2, masks, scores).unwrap();
        let (out, dropped) = upper_bound_relabel(&ps, &gt, UpperBoundMode::Point).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(out.scores(0), &[0.0, 1.0, 0.0]);
        assert_eq!(out.scores(1), &[1.0, 0.0, 0.0]);

        // empty proposal dropped and counted
        let masks = vec![vec![0.0; 4]];
        let scores = vec![vec![0.5, 0.3, 0.2]];
        let ps = ProposalSet::new("x", 2, 2, 2, masks, scores).unwrap();
        let (out, dropped) = upper_bound_relabel(&ps, &gt, UpperBoundMode::Point).unwrap();
        assert_eq!((out.len(), dropped), (0, 1));
    }

    #[test]
    fn upper_bound_mask_mode_exact_masks_give_perfect_pq() {
        use crate::pipeline::{panoptic_inference, ClassInfo, Taxonomy};
        let gt = GroundTruth {
            height: 2,
            width: 3,
            semantic: vec![1, 1, 0, 0, 0, 0],
            panoptic_map: vec![1, 1, 2, 2, 2, 2],
            panoptic_segments: vec![seg(1, 1, true), seg(2, 0, false)],
            instances: vec![(vec![true, true, false, false, false, false], 1)],
        };
        let masks = vec![
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        ];
        // deliberately wrong labels before relabeling
        let scores = vec![vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05]];
        let ps = ProposalSet::new("x", 2, 3, 2, masks, scores).unwrap();
        let (relabeled, _) = upper_bound_relabel(&ps, &gt, UpperBoundMode::Mask).unwrap();
        assert_eq!(relabeled.scores(0), &[0.0, 1.0, 0.0]);
        assert_eq!(relabeled.scores(1), &[1.0, 0.0, 0.0]);
        let tax = Taxonomy {
            classes: vec![
                ClassInfo { name: "bg".into(), is_thing: false },
                ClassInfo { name: "obj".into(), is_thing: true },
            ],
        };
        match panoptic_inference(&relabeled, &tax, 0.8, 0.8) {
            SegResult::Panoptic { map, segments, .. } => {
                let r = pq(&map, &segments, &gt).unwrap();
                assert_eq!(r.value, 1.0);
            }
            _ => panic!("wrong task"),
        }
    }

    #[test]
    fn upper_bound_no_overlap_goes_null() {
        let gt = GroundTruth {
            height: 1,
            width: 4,
            semantic: vec![VOID_ID, VOID_ID, 0, 0],
            panoptic_map: vec![0, 0, 1, 1],
            panoptic_segments: vec![seg(1, 0, false)],
            instances: vec![],
        };
        let ps = ProposalSet::new(
            "x",
            1,
            4,
            2,
            vec![vec![1.0, 1.0, 0.0, 0.0]],
            vec![vec![0.5, 0.3, 0.2]],
        )
        .unwrap();
        let (point, _) = upper_bound_relabel(&ps, &gt, UpperBoundMode::Point).unwrap();
        assert_eq!(point.scores(0), &[0.0, 0.0, 1.0]);
        let (mask, _) = upper_bound_relabel(&ps, &gt, UpperBoundMode::Mask).unwrap();
        assert_eq!(mask.scores(0), &[0.0, 0.0, 1.0]);
    }
}
