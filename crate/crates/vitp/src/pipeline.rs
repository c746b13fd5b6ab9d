//! Inference glue: pick a point inside each proposal mask, classify the
//! points in one forward pass, fuse the two score sources geometrically,
//! and assemble semantic / instance / panoptic outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointBatch, PointPrompt, VitP};
use crate::tensor::{NoGradGuard, Tensor};

/// Void/unlabeled id in semantic and instance-id maps.
pub const VOID_ID: u16 = u16::MAX;

/// Class taxonomy: index = class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub classes: Vec<ClassInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub is_thing: bool,
}

impl Taxonomy {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_thing(&self, class_id: usize) -> bool {
        self.classes.get(class_id).map(|c| c.is_thing).unwrap_or(false)
    }
}

/// Per-image set of N soft masks plus `[K+1]` class-score rows whose last
/// column is the "no object" score.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    num_classes: usize,
    masks: Vec<Vec<f32>>,
    class_scores: Vec<Vec<f32>>,
}

impl ProposalSet {
    /// Validates mask ranges and score rows. Rows whose sum is within 1e-4
    /// of 1 are renormalized (exactly-normalized rows are kept bit-for-bit
    /// so file round trips stay exact); anything further off is an error.
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        num_classes: usize,
        masks: Vec<Vec<f32>>,
        class_scores: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if masks.len() != class_scores.len() {
            return Err(Error::ShapeMismatch {
                op: "proposal_set",
                detail: format!("{} masks vs {} score rows", masks.len(), class_scores.len()),
            });
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("proposal set needs K >= 1".into()));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != height * width {
                return Err(Error::ShapeMismatch {
                    op: "proposal_set",
                    detail: format!("mask {} has {} values for {}x{}", i, m.len(), height, width),
                });
            }
            if m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidInput(format!("mask {} has values outside [0,1]", i)));
            }
        }
        let mut scores = class_scores;
        for (i, row) in scores.iter_mut().enumerate() {
            if row.len() != num_classes + 1 {
                return Err(Error::ShapeMismatch {
                    op: "proposal_set",
                    detail: format!("score row {} has {} entries, want {}", i, row.len(), num_classes + 1),
                });
            }
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "score row {} has negative or non-finite entries",
                    i
                )));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidInput(format!(
                    "score row {} sums to {}, outside 1 +/- 1e-4",
                    i, sum
                )));
            }
            if (sum - 1.0).abs() > 1e-6 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / sum) as f32;
                }
            }
        }
        Ok(ProposalSet {
            image_id,
            height,
            width,
            num_classes,
            masks,
            class_scores: scores,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        &self.masks[i]
    }

    pub fn scores(&self, i: usize) -> &[f32] {
        &self.class_scores[i]
    }
}

/// Geometric-ensemble knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub epsilon_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.4,
            epsilon_floor: 1e-12,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.epsilon_floor <= 0.0 {
            return Err(Error::Config("epsilon_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// One detected instance: binarized mask, class, confidence.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mask: Vec<bool>,
    pub class_id: usize,
    pub score: f64,
}

/// Panoptic segment table entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_id: usize,
    pub is_thing: bool,
}

/// Task-specific output; exactly one representation per task.
#[derive(Debug, Clone)]
pub enum SegResult {
    Semantic {
        height: usize,
        width: usize,
        map: Vec<u16>,
    },
    Instances {
        height: usize,
        width: usize,
        instances: Vec<Instance>,
    },
    Panoptic {
        height: usize,
        width: usize,
        map: Vec<u32>,
        segments: Vec<SegmentInfo>,
    },
}

/// Point-selection rule for proposal classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRule {
    Highest,
    Central,
    Random,
}

impl std::str::FromStr for PointRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(PointRule::Highest),
            "central" => Ok(PointRule::Central),
            "random" => Ok(PointRule::Random),
            other => Err(Error::InvalidInput(format!("unknown point rule '{}'", other))),
        }
    }
}

/// Argmax pixel of a soft mask; ties break to the smallest row, then column.
pub fn highest_value_point(mask: &[f32], height: usize, width: usize) -> Result<(usize, usize)> {
    debug_assert_eq!(mask.len(), height * width);
    let mut best = 0.0f32;
    let mut at = None;
    for (idx, &v) in mask.iter().enumerate() {
        if v > best {
            best = v;
            at = Some(idx);
        }
    }
    match at {
        Some(idx) => Ok((idx / width, idx % width)),
        None => Err(Error::EmptyProposal),
    }
}

/// 4-connected distance of every in-support pixel to the binarized mask's
/// complement; the image border counts as boundary. Multi-source BFS.
pub fn distance_transform(mask: &[f32], height: usize, width: usize, bin_threshold: f32) -> Vec<u32> {
    let support: Vec<bool> = mask.iter().map(|&v| v >= bin_threshold).collect();
    let mut dist = vec![0u32; height * width];
    let mut queue = std::collections::VecDeque::new();
    for r in 0..height {
        for c in 0..width {
            let idx = r * width + c;
            if !support[idx] {
                continue;
            }
            let on_border = r == 0 || c == 0 || r == height - 1 || c == width - 1;
            let next_to_bg = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                nr >= 0
                    && nc >= 0
                    && (nr as usize) < height
                    && (nc as usize) < width
                    && !support[nr as usize * width + nc as usize]
            });
            if on_border || next_to_bg {
                dist[idx] = 1;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * width + c];
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr as usize >= height || nc as usize >= width {
                continue;
            }
            let nidx = nr as usize * width + nc as usize;
            if support[nidx] && dist[nidx] == 0 {
                dist[nidx] = d + 1;
                queue.push_back((nr as usize, nc as usize));
            }
        }
    }
    dist
}

/// In-support pixel farthest from the binarized mask's boundary.
pub fn central_point(
    mask: &[f32],
    height: usize,
    width: usize,
    bin_threshold: f32,
) -> Result<(usize, usize)> {
    let dist = distance_transform(mask, height, width, bin_threshold);
    let mut best = 0u32;
    let mut at = None;
    for (idx, &d) in dist.iter().enumerate() {
        if d > best {
            best = d;
            at = Some(idx);
        }
    }
    match at {
        Some(idx) => Ok((idx / width, idx % width)),
        None => Err(Error::EmptyProposal),
    }
}

/// Uniform pixel over the binarized support.
pub fn random_point(
    mask: &[f32],
    height: usize,
    width: usize,
    bin_threshold: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    debug_assert_eq!(mask.len(), height * width);
    let support: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= bin_threshold)
        .map(|(i, _)| i)
        .collect();
    if support.is_empty() {
        return Err(Error::EmptyProposal);
    }
    let idx = support[rng.gen_range(0..support.len())];
    Ok((idx / width, idx % width))
}

/// Strip the trailing "no object" column: returns row-renormalized real-class
/// scores and the raw null scores for later reattachment.
pub fn split_no_object(set: &ProposalSet) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = set.num_classes();
    let mut c_m = Vec::with_capacity(set.len());
    let mut nulls = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let row = set.scores(i);
        let mass: f64 = row[..k].iter().map(|&v| v as f64).sum();
        if mass <= 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        c_m.push(row[..k].iter().map(|&v| v as f64 / mass).collect());
        nulls.push(row[k] as f64);
    }
    Ok((c_m, nulls))
}

/// Geometric ensemble `C_m^(1-alpha) * C_p^alpha`, floored at
/// `epsilon_floor` before exponentiation and renormalized per row.
pub fn fuse(c_m: &[Vec<f64>], c_p: &[Vec<f64>], cfg: &FusionConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if c_m.len() != c_p.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            detail: format!("{} vs {} rows", c_m.len(), c_p.len()),
        });
    }
    let mut out = Vec::with_capacity(c_m.len());
    for (i, (rm, rp)) in c_m.iter().zip(c_p).enumerate() {
        if rm.len() != rp.len() {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                detail: format!("row {}: {} vs {} entries", i, rm.len(), rp.len()),
            });
        }
        let mut row: Vec<f64> = rm
            .iter()
            .zip(rp)
            .map(|(&m, &p)| {
                let m = m.max(cfg.epsilon_floor);
                let p = p.max(cfg.epsilon_floor);
                m.powf(1.0 - cfg.alpha) * p.powf(cfg.alpha)
            })
            .collect();
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::NonFinite { op: "fuse" });
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        out.push(row);
    }
    Ok(out)
}

/// Append the "no object" column back: the null score keeps its original
/// proportion relative to the non-null mass (rows sum to 1 again).
pub fn reattach_no_object(c_fuse: &[Vec<f64>], nulls: &[f64]) -> Result<Vec<Vec<f64>>> {
    if c_fuse.len() != nulls.len() {
        return Err(Error::ShapeMismatch {
            op: "reattach_no_object",
            detail: format!("{} rows vs {} null scores", c_fuse.len(), nulls.len()),
        });
    }
    Ok(c_fuse
        .iter()
        .zip(nulls)
        .map(|(row, &null)| {
            let keep = 1.0 - null;
            let mut out: Vec<f64> = row.iter().map(|&v| v * keep).collect();
            out.push(null);
            out
        })
        .collect())
}

/// Classify every proposal at its selected point and fuse the scores.
/// Empty proposals are dropped; the count of drops is returned.
pub fn classify_proposals(
    model: &VitP<f32>,
    image: &Tensor<f32>,
    proposals: &ProposalSet,
    rule: PointRule,
    fusion: &FusionConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ProposalSet, usize)> {
    fusion.validate()?;
    let (h, w) = (proposals.height, proposals.width);
    let mut kept = Vec::new();
    let mut prompts = Vec::new();
    for i in 0..proposals.len() {
        let picked = match rule {
            PointRule::Highest => highest_value_point(proposals.mask(i), h, w),
            PointRule::Central => central_point(proposals.mask(i), h, w, 0.5),
            PointRule::Random => {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::InvalidInput("random point rule needs an RNG".into()))?;
                random_point(proposals.mask(i), h, w, 0.5, rng)
            }
        };
        match picked {
            Ok((r, c)) => {
                prompts.push(PointPrompt::from_pixel(r, c, h, w)?);
                kept.push(i);
            }
            Err(Error::EmptyProposal) => continue,
            Err(e) => return Err(e),
        }
    }
    let dropped = proposals.len() - kept.len();
    if kept.is_empty() {
        let empty = ProposalSet::new(
            proposals.image_id.clone(),
            h,
            w,
            proposals.num_classes(),
            Vec::new(),
            Vec::new(),
        )?;
        return Ok((empty, dropped));
    }

    let guard = NoGradGuard::new();
    let logits = model.forward(image, &PointBatch::new(prompts)?)?;
    drop(guard);
    let k = model.cfg.num_classes;
    let logit_vals = logits.values();
    let mut c_p: Vec<Vec<f64>> = Vec::with_capacity(kept.len());
    for row in logit_vals.chunks(k) {
        c_p.push(softmax_f64(row));
    }

    let kept_set = ProposalSet::new(
        proposals.image_id.clone(),
        h,
        w,
        proposals.num_classes(),
        kept.iter().map(|&i| proposals.mask(i).to_vec()).collect(),
        kept.iter().map(|&i| proposals.scores(i).to_vec()).collect(),
    )?;
    if proposals.num_classes() != k {
        return Err(Error::ShapeMismatch {
            op: "classify_proposals",
            detail: format!("proposal K={} vs model K={}", proposals.num_classes(), k),
        });
    }
    let (c_m, nulls) = split_no_object(&kept_set)?;
    let fused = fuse(&c_m, &c_p, fusion)?;
    let full = reattach_no_object(&fused, &nulls)?;
    let scores_f32: Vec<Vec<f32>> = full
        .iter()
        .map(|row| row.iter().map(|&v| v as f32).collect())
        .collect();
    let out = ProposalSet::new(
        proposals.image_id.clone(),
        h,
        w,
        proposals.num_classes(),
        (0..kept_set.len()).map(|i| kept_set.mask(i).to_vec()).collect(),
        scores_f32,
    )?;
    Ok((out, dropped))
}

fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-pixel argmax of mask-weighted class scores; zero-mass pixels get void.
pub fn semantic_inference(proposals: &ProposalSet) -> SegResult {
    let (h, w) = (proposals.height, proposals.width);
    let k = proposals.num_classes();
    let mut map = vec![VOID_ID; h * w];
    let mut acc = vec![0.0f64; k];
    for px in 0..h * w {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        for i in 0..proposals.len() {
            let m = proposals.mask(i)[px] as f64;
            if m == 0.0 {
                continue;
            }
            let row = proposals.scores(i);
            for (kk, a) in acc.iter_mut().enumerate() {
                *a += row[kk] as f64 * m;
            }
        }
        let mut best = 0.0f64;
        let mut best_k = None;
        for (kk, &a) in acc.iter().enumerate() {
            if a > best {
                best = a;
                best_k = Some(kk);
            }
        }
        if let Some(kk) = best_k {
            map[px] = kk as u16;
        }
    }
    SegResult::Semantic { height: h, width: w, map }
}

/// Mask-classification panoptic assembly: confidence filter, per-pixel
/// argmax of `prob * mask`, low-retention drop, stuff merge.
pub fn panoptic_inference(
    proposals: &ProposalSet,
    taxonomy: &Taxonomy,
    object_thresh: f64,
    overlap_thresh: f64,
) -> SegResult {
    let (h, w) = (proposals.height, proposals.width);
    let k = proposals.num_classes();
    // confident proposals with their best real class
    let mut cand: Vec<(usize, usize, f64)> = Vec::new(); // (proposal, class, prob)
    for i in 0..proposals.len() {
        let row = proposals.scores(i);
        let mut best = 0.0f64;
        let mut best_k = 0usize;
        for kk in 0..k {
            if (row[kk] as f64) > best {
                best = row[kk] as f64;
                best_k = kk;
            }
        }
        if best >= object_thresh {
            cand.push((i, best_k, best));
        }
    }
    let mut assigned: Vec<Option<usize>> = vec![None; h * w]; // index into cand
    for px in 0..h * w {
        let mut best_v = 0.0f64;
        let mut best_c = None;
        for (ci, &(pi, _, prob)) in cand.iter().enumerate() {
            let v = prob * proposals.mask(pi)[px] as f64;
            if v > best_v {
                best_v = v;
                best_c = Some(ci);
            }
        }
        assigned[px] = best_c;
    }
    // retention filter against the binarized mask
    let mut map = vec![0u32; h * w];
    let mut segments: Vec<SegmentInfo> = Vec::new();
    let mut stuff_ids: std::collections::BTreeMap<usize, u32> = std::collections::BTreeMap::new();
    let mut next_id = 1u32;
    for (ci, &(pi, class_id, _)) in cand.iter().enumerate() {
        let bin: Vec<bool> = proposals.mask(pi).iter().map(|&v| v >= 0.5).collect();
        let bin_area = bin.iter().filter(|&&b| b).count();
        if bin_area == 0 {
            continue;
        }
        let final_pixels: Vec<usize> = (0..h * w)
            .filter(|&px| assigned[px] == Some(ci) && bin[px])
            .collect();
        if (final_pixels.len() as f64) < overlap_thresh * bin_area as f64 {
            continue;
        }
        let is_thing = taxonomy.is_thing(class_id);
        let id = if is_thing {
            let id = next_id;
            next_id += 1;
            segments.push(SegmentInfo { id, class_id, is_thing });
            id
        } else {
            *stuff_ids.entry(class_id).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                segments.push(SegmentInfo { id, class_id, is_thing });
                id
            })
        };
        for px in final_pixels {
            map[px] = id;
        }
    }
    SegResult::Panoptic { height: h, width: w, map, segments }
}

/// Per-(proposal, thing-class) detections scored by class prob times mean
/// in-mask value, sorted by descending score.
pub fn instance_inference(
    proposals: &ProposalSet,
    taxonomy: &Taxonomy,
    score_thresh: f64,
) -> SegResult {
    let (h, w) = (proposals.height, proposals.width);
    let k = proposals.num_classes();
    let mut instances = Vec::new();
    for i in 0..proposals.len() {
        let mask = proposals.mask(i);
        let bin: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
        let area = bin.iter().filter(|&&b| b).count();
        if area == 0 {
            continue;
        }
        let mean_in: f64 = mask
            .iter()
            .zip(&bin)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / area as f64;
        let row = proposals.scores(i);
        for kk in 0..k {
            if !taxonomy.is_thing(kk) {
                continue;
            }
            let score = row[kk] as f64 * mean_in;
            if score >= score_thresh {
                instances.push((i, kk, score));
            }
        }
    }
    instances.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let instances = instances
        .into_iter()
        .map(|(i, kk, score)| Instance {
            mask: proposals.mask(i).iter().map(|&v| v >= 0.5).collect(),
            class_id: kk,
            score,
        })
        .collect();
    SegResult::Instances { height: h, width: w, instances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(
        h: usize,
        w: usize,
        k: usize,
        masks: Vec<Vec<f32>>,
        scores: Vec<Vec<f32>>,
    ) -> ProposalSet {
        ProposalSet::new("img", h, w, k, masks, scores).unwrap()
    }

    #[test]
    fn highest_value_point_cases() {
        let mut mask = vec![0.0f32; 6 * 7];
        mask[3 * 7 + 5] = 0.9;
        assert_eq!(highest_value_point(&mask, 6, 7).unwrap(), (3, 5));

        let tie = vec![0.1, 0.9, 0.3, 0.9];
        assert_eq!(highest_value_point(&tie, 2, 2).unwrap(), (0, 1));

        let zero = vec![0.0f32; 4];
        assert!(matches!(highest_value_point(&zero, 2, 2), Err(Error::EmptyProposal)));
    }

    /// Independent BFS-from-each-pixel oracle for the distance transform.
    fn bfs_distance_oracle(support: &[bool], h: usize, w: usize, r0: usize, c0: usize) -> u32 {
        // distance to nearest non-support pixel or border, 4-connected
        let mut best = u32::MAX;
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                if !support[r as usize * w + c as usize] {
                    let d = (r - r0 as i64).abs() + (c - c0 as i64).abs();
                    best = best.min(d as u32);
                }
            }
        }
        let to_border = (r0 as u32 + 1)
            .min(h as u32 - r0 as u32)
            .min(c0 as u32 + 1)
            .min(w as u32 - c0 as u32);
        best.min(to_border)
    }

    #[test]
    fn central_point_cases() {
        let mask = vec![1.0f32; 25];
        assert_eq!(central_point(&mask, 5, 5, 0.5).unwrap(), (2, 2));

        let mut single = vec![0.0f32; 16];
        single[1 * 4 + 2] = 1.0;
        assert_eq!(central_point(&single, 4, 4, 0.5).unwrap(), (1, 2));

        let empty = vec![0.2f32; 9];
        assert!(matches!(central_point(&empty, 3, 3, 0.5), Err(Error::EmptyProposal)));
    }

    #[test]
    fn central_point_matches_bfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (h, w) = (16, 16);
            let mask: Vec<f32> = (0..h * w)
                .map(|_| if rng.gen_bool(0.55) { 1.0 } else { 0.0 })
                .collect();
            let support: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
            if !support.iter().any(|&b| b) {
                continue;
            }
            let dist = distance_transform(&mask, h, w, 0.5);
            for r in 0..h {
                for c in 0..w {
                    if support[r * w + c] {
                        assert_eq!(
                            dist[r * w + c],
                            bfs_distance_oracle(&support, h, w, r, c),
                            "at ({}, {})",
                            r,
                            c
                        );
                    } else {
                        assert_eq!(dist[r * w + c], 0);
                    }
                }
            }
            // central point lies in the support and attains the max distance
            let (r, c) = central_point(&mask, h, w, 0.5).unwrap();
            assert!(support[r * w + c]);
            assert_eq!(dist[r * w + c], *dist.iter().max().unwrap());
        }
    }

    #[test]
    fn random_point_properties() {
        let mut single = vec![0.0f32; 9];
        single[4] = 1.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(random_point(&single, 3, 3, 0.5, &mut rng).unwrap(), (1, 1));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask: Vec<f32> = (0..64).map(|i| if i % 3 == 0 { 0.8 } else { 0.1 }).collect();
        for _ in 0..50 {
            let (r, c) = random_point(&mask, 8, 8, 0.5, &mut rng).unwrap();
            assert!(mask[r * 8 + c] >= 0.5);
        }

        // fixed seed -> identical sequence
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| random_point(&mask, 8, 8, 0.5, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn split_no_object_cases() {
        let s = set(
            1,
            1,
            2,
            vec![vec![1.0]],
            vec![vec![0.3, 0.3, 0.4]],
        );
        let (c_m, nulls) = split_no_object(&s).unwrap();
        assert!((c_m[0][0] - 0.5).abs() < 1e-9);
        assert!((c_m[0][1] - 0.5).abs() < 1e-9);
        assert!((nulls[0] - 0.4).abs() < 1e-6);

        // null column zero: first K columns already normalized
        let s = set(1, 1, 2, vec![vec![1.0]], vec![vec![0.25, 0.75, 0.0]]);
        let (c_m, nulls) = split_no_object(&s).unwrap();
        assert!((c_m[0][0] - 0.25).abs() < 1e-9);
        assert_eq!(nulls[0], 0.0);

        let s = set(1, 1, 2, vec![vec![1.0]], vec![vec![0.0, 0.0, 1.0]]);
        assert!(matches!(split_no_object(&s), Err(Error::DegenerateRow { row: 0 })));
    }

    #[test]
    fn fuse_identities_and_worked_value() {
        let c_m = vec![vec![0.8, 0.2]];
        let c_p = vec![vec![0.6, 0.4]];
        let renorm = |row: &[f64]| {
            let s: f64 = row.iter().sum();
            row.iter().map(|&v| v / s).collect::<Vec<_>>()
        };

        let at0 = fuse(&c_m, &c_p, &FusionConfig { alpha: 0.0, ..Default::default() }).unwrap();
        for (a, b) in at0[0].iter().zip(renorm(&c_m[0])) {
            assert!((a - b).abs() <= 1e-12);
        }
        let at1 = fuse(&c_m, &c_p, &FusionConfig { alpha: 1.0, ..Default::default() }).unwrap();
        for (a, b) in at1[0].iter().zip(renorm(&c_p[0])) {
            assert!((a - b).abs() <= 1e-12);
        }

        let mid = fuse(&c_m, &c_p, &FusionConfig { alpha: 0.4, ..Default::default() }).unwrap();
        assert!((mid[0][0] - 0.72987).abs() < 1e-4, "{}", mid[0][0]);
        assert!((mid[0][1] - 0.27013).abs() < 1e-4, "{}", mid[0][1]);
    }

    #[test]
    fn fuse_preserves_common_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let k = rng.gen_range(2..6);
            let mk_row = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let rm = mk_row(&mut rng);
            let rp = mk_row(&mut rng);
            let am = crate::util::argmax(&rm).unwrap();
            let ap = crate::util::argmax(&rp).unwrap();
            if am != ap {
                continue;
            }
            let alpha = rng.gen_range(0.0..=1.0);
            let fused = fuse(
                &[rm],
                &[rp],
                &FusionConfig { alpha, ..Default::default() },
            )
            .unwrap();
            assert_eq!(crate::util::argmax(&fused[0]).unwrap(), am);
        }
    }

    #[test]
    fn reattach_cases() {
        let fused = vec![vec![0.7, 0.3]];
        let out = reattach_no_object(&fused, &[0.0]).unwrap();
        assert_eq!(out[0], vec![0.7, 0.3, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(1..5);
            let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            let null = rng.gen_range(0.0..1.0);
            let out = reattach_no_object(&[row], &[null]).unwrap();
            let total: f64 = out[0].iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!((out[0][k] - null).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_inference_cases() {
        // single full-image mask, 0.9 on class 0
        let s = set(2, 2, 2, vec![vec![1.0; 4]], vec![vec![0.9, 0.05, 0.05]]);
        match semantic_inference(&s) {
            SegResult::Semantic { map, .. } => assert_eq!(map, vec![0, 0, 0, 0]),
            _ => panic!("wrong task"),
        }

        // two disjoint one-hot masks -> exact two-region map
        let m1 = vec![1.0, 1.0, 0.0, 0.0];
        let m2 = vec![0.0, 0.0, 1.0, 1.0];
        let s = set(
            2,
            2,
            2,
            vec![m1, m2],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        );
        match semantic_inference(&s) {
            SegResult::Semantic { map, .. } => assert_eq!(map, vec![0, 0, 1, 1]),
            _ => panic!("wrong task"),
        }

        // all-zero coverage -> void
        let s = set(1, 2, 2, vec![vec![0.0, 0.0]], vec![vec![0.5, 0.5, 0.0]]);
        match semantic_inference(&s) {
            SegResult::Semantic { map, .. } => assert_eq!(map, vec![VOID_ID, VOID_ID]),
            _ => panic!("wrong task"),
        }
    }

    #[test]
    fn semantic_inference_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (h, w) = (8, 8);
            let k = 3;
            let n = rng.gen_range(1..5);
            let masks: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..h * w).map(|_| rng.gen_range(0.0..1.0f32)).collect())
                .collect();
            let scores: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let mut row: Vec<f32> = (0..k + 1).map(|_| rng.gen_range(0.0..1.0f32)).collect();
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    row
                })
                .collect();
            let ps = set(h, w, k, masks.clone(), scores.clone());
            let fast = match semantic_inference(&ps) {
                SegResult::Semantic { map, .. } => map,
                _ => unreachable!(),
            };
            // brute force double loop (reads the renormalized scores)
            for px in 0..h * w {
                let mut best = (0.0f64, None);
                for kk in 0..k {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        acc += ps.scores(i)[kk] as f64 * ps.mask(i)[px] as f64;
                    }
                    if acc > best.0 {
                        best = (acc, Some(kk as u16));
                    }
                }
                assert_eq!(fast[px], best.1.unwrap_or(VOID_ID));
            }
        }
    }

    fn two_class_taxonomy() -> Taxonomy {
        Taxonomy {
            classes: vec![
                ClassInfo { name: "bg".into(), is_thing: false },
                ClassInfo { name: "obj".into(), is_thing: true },
            ],
        }
    }

    #[test]
    fn panoptic_inference_cases() {
        let tax = two_class_taxonomy();
        // one confident full-image stuff proposal
        let s = set(2, 2, 2, vec![vec![1.0; 4]], vec![vec![0.95, 0.03, 0.02]]);
        match panoptic_inference(&s, &tax, 0.8, 0.8) {
            SegResult::Panoptic { map, segments, .. } => {
                assert_eq!(segments.len(), 1);
                assert!(map.iter().all(|&id| id == segments[0].id));
                assert!(!segments[0].is_thing);
            }
            _ => panic!("wrong task"),
        }

        // two identical masks, different confidence: higher one wins, the
        // other keeps no pixels and is dropped
        let m = vec![1.0f32; 4];
        let s = set(
            2,
            2,
            2,
            vec![m.clone(), m],
            vec![vec![0.05, 0.9, 0.05], vec![0.13, 0.85, 0.02]],
        );
        match panoptic_inference(&s, &tax, 0.8, 0.8) {
            SegResult::Panoptic { segments, .. } => assert_eq!(segments.len(), 1),
            _ => panic!("wrong task"),
        }
    }

    #[test]
    fn panoptic_partition_property() {
        let tax = two_class_taxonomy();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let (h, w) = (8, 8);
            let n = rng.gen_range(1..6);
            let masks: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..h * w).map(|_| rng.gen_range(0.0..1.0f32)).collect())
                .collect();
            let scores: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let hot = rng.gen_range(0..2);
                    let conf = rng.gen_range(0.5..1.0f32);
                    let mut row = vec![(1.0 - conf) / 2.0; 3];
                    row[hot] = conf;
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    row
                })
                .collect();
            let ps = set(h, w, 2, masks, scores);
            match panoptic_inference(&ps, &tax, 0.6, 0.5) {
                SegResult::Panoptic { map, segments, .. } => {
                    let ids: std::collections::BTreeSet<u32> =
                        segments.iter().map(|s| s.id).collect();
                    assert_eq!(ids.len(), segments.len(), "segment ids unique");
                    for &px in map.iter() {
                        assert!(px == 0 || ids.contains(&px), "map id {} in table", px);
                    }
                }
                _ => panic!("wrong task"),
            }
        }
    }

    #[test]
    fn instance_inference_cases() {
        let tax = two_class_taxonomy();
        // crisp one-hot thing proposal: one instance with score = class prob
        let s = set(2, 2, 2, vec![vec![1.0; 4]], vec![vec![0.02, 0.93, 0.05]]);
        match instance_inference(&s, &tax, 0.05) {
            SegResult::Instances { instances, .. } => {
                assert_eq!(instances.len(), 1);
                assert_eq!(instances[0].class_id, 1);
                assert!((instances[0].score - s.scores(0)[1] as f64).abs() < 1e-9);
            }
            _ => panic!("wrong task"),
        }

        // below threshold -> dropped
        let s = set(2, 2, 2, vec![vec![1.0; 4]], vec![vec![0.97, 0.02, 0.01]]);
        match instance_inference(&s, &tax, 0.05) {
            SegResult::Instances { instances, .. } => assert!(instances.is_empty()),
            _ => panic!("wrong task"),
        }
    }

    #[test]
    fn instance_inference_sorted() {
        let tax = two_class_taxonomy();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let masks: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..16).map(|_| rng.gen_range(0.0..1.0f32)).collect())
                .collect();
            let scores: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let mut row: Vec<f32> = (0..3).map(|_| rng.gen_range(0.0..1.0f32)).collect();
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    row
                })
                .collect();
            let ps = set(4, 4, 2, masks, scores);
            match instance_inference(&ps, &tax, 0.0) {
                SegResult::Instances { instances, .. } => {
                    for pair in instances.windows(2) {
                        assert!(pair[0].score >= pair[1].score);
                    }
                }
                _ => panic!("wrong task"),
            }
        }
    }

    #[test]
    fn proposal_set_validation() {
        // row sum off by more than 1e-4 -> error
        assert!(ProposalSet::new("x", 1, 1, 2, vec![vec![0.5]], vec![vec![0.5, 0.2, 0.1]]).is_err());
        // mask value out of range -> error
        assert!(ProposalSet::new("x", 1, 1, 2, vec![vec![1.5]], vec![vec![0.5, 0.3, 0.2]]).is_err());
        // mild drift renormalized
        let s = ProposalSet::new("x", 1, 1, 2, vec![vec![0.5]], vec![vec![0.50002, 0.3, 0.2]]).unwrap();
        let sum: f64 = s.scores(0).iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
