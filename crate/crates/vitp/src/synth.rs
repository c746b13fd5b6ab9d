//! Deterministic synthetic dataset: colored geometric shapes over a
//! backdrop, with pixel-exact instance labels, eroded coarse labels, tight
//! boxes, and simulated mask proposals with controllable quality and label
//! noise. Every output is a pure function of (config, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::pipeline::{
    central_point, distance_transform, ClassInfo, ProposalSet, SegmentInfo, Taxonomy, VOID_ID,
};
use crate::util::{derive_seed, parallel_map};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// The background; exactly one class uses it and it must be stuff.
    Backdrop,
    Disk,
    Rect,
    Triangle,
}

/// One taxonomy entry plus how to draw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub is_thing: bool,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub color_jitter: u8,
}

/// Simulated mask-generator noise knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalNoise {
    /// Boundary jitter amplitude in pixels. Zero reproduces ground truth.
    pub mask_jitter_sigma: f64,
    /// Probability that a proposal's one-hot is moved to a wrong class.
    pub label_corruption_rate: f64,
    /// Softmax temperature applied to the one-hot; zero keeps it exact.
    pub confidence_temperature: f64,
    /// Constant "no object" score appended to every row.
    pub null_score: f64,
}

impl Default for ProposalNoise {
    fn default() -> Self {
        ProposalNoise {
            mask_jitter_sigma: 1.0,
            label_corruption_rate: 0.3,
            confidence_temperature: 0.35,
            null_score: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: (usize, usize),
    pub classes: Vec<ClassSpec>,
    pub shapes_per_image: (usize, usize),
    pub coarse_erosion: usize,
    pub seed: u64,
    pub proposal_noise: ProposalNoise,
    /// Extra high-null proposals per image, exercising panoptic filtering.
    pub distractors: usize,
}

/// Six classes: a dark backdrop plus five colored shape classes.
pub fn default_classes() -> Vec<ClassSpec> {
    let spec = |name: &str, is_thing, shape, color| ClassSpec {
        name: name.into(),
        is_thing,
        shape,
        color,
        color_jitter: 24,
    };
    vec![
        ClassSpec {
            name: "backdrop".into(),
            is_thing: false,
            shape: ShapeKind::Backdrop,
            color: [44, 44, 52],
            color_jitter: 10,
        },
        spec("red-disk", true, ShapeKind::Disk, [205, 50, 45]),
        spec("green-rect", true, ShapeKind::Rect, [55, 190, 70]),
        spec("blue-triangle", true, ShapeKind::Triangle, [60, 90, 210]),
        spec("yellow-disk", true, ShapeKind::Disk, [220, 205, 60]),
        spec("magenta-rect", true, ShapeKind::Rect, [195, 70, 200]),
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 120,
            image_size: (64, 64),
            classes: default_classes(),
            shapes_per_image: (2, 5),
            coarse_erosion: 2,
            seed: 7,
            proposal_noise: ProposalNoise::default(),
            distractors: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let backdrops = self
            .classes
            .iter()
            .filter(|c| c.shape == ShapeKind::Backdrop)
            .count();
        if backdrops != 1 || self.classes[0].shape != ShapeKind::Backdrop {
            return Err(Error::Config("class 0 must be the single backdrop class".into()));
        }
        if self.classes[0].is_thing {
            return Err(Error::Config("backdrop class must be stuff".into()));
        }
        if !self.classes.iter().any(|c| c.is_thing) {
            return Err(Error::Config("need at least one thing class".into()));
        }
        if self.coarse_erosion < 1 {
            return Err(Error::Config("coarse_erosion must be >= 1".into()));
        }
        let rho = self.proposal_noise.label_corruption_rate;
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("label corruption rate {} outside [0,1]", rho)));
        }
        if self.proposal_noise.mask_jitter_sigma < 0.0 || self.proposal_noise.confidence_temperature < 0.0 {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.proposal_noise.null_score) {
            return Err(Error::Config("null_score must be in [0,1)".into()));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::Config("shapes_per_image min > max".into()));
        }
        let min_dim = self.image_size.0.min(self.image_size.1);
        if self.shapes_per_image.1 > 0 && min_dim < 4 * MIN_SHAPE_RADIUS {
            return Err(Error::Config(format!(
                "image side {} too small for shapes (need >= {})",
                min_dim,
                4 * MIN_SHAPE_RADIUS
            )));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy {
            classes: self
                .classes
                .iter()
                .map(|c| ClassInfo {
                    name: c.name.clone(),
                    is_thing: c.is_thing,
                })
                .collect(),
        }
    }
}

const MIN_SHAPE_RADIUS: usize = 3;
const STREAM_SHAPES: u64 = 0x53;
const STREAM_PROPOSALS: u64 = 0x50;

/// Normalized tight box around one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxAnnotation {
    pub class_id: u16,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One image with fine / coarse / box annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub index: usize,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    /// Instance id per pixel (all pixels labeled; backdrop is instance 0).
    pub fine: Vec<u16>,
    /// Eroded instance cores; `VOID_ID` on the boundary band.
    pub coarse: Vec<u16>,
    /// Instance id -> class id, sorted by id.
    pub id_to_class: Vec<(u16, u16)>,
    pub boxes: Vec<BoxAnnotation>,
}

impl AnnotatedImage {
    pub fn class_of(&self, instance: u16) -> Option<u16> {
        self.id_to_class
            .iter()
            .find(|(id, _)| *id == instance)
            .map(|(_, c)| *c)
    }

    /// Binary mask per instance, in table order.
    pub fn segments(&self) -> Vec<(u16, u16, Vec<bool>)> {
        self.id_to_class
            .iter()
            .map(|&(id, class)| {
                let mask: Vec<bool> = self.fine.iter().map(|&v| v == id).collect();
                (id, class, mask)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn split_images(&self, split: Split) -> Vec<&AnnotatedImage> {
        self.images.iter().filter(|im| im.split == split).collect()
    }
}

/// Generate the full dataset; 90/10 train/val split by image index.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train_count = cfg.num_images * 9 / 10;
    let images = parallel_map(cfg.num_images, |i| {
        let split = if i < train_count { Split::Train } else { Split::Val };
        generate_image(cfg, i, split)
    });
    Ok(Dataset {
        taxonomy: cfg.taxonomy(),
        images,
    })
}

fn generate_image(cfg: &SynthConfig, index: usize, split: Split) -> AnnotatedImage {
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64, STREAM_SHAPES]));
    let backdrop = &cfg.classes[0];
    let bg_color = jitter_color(backdrop.color, backdrop.color_jitter, &mut rng);

    let mut rgb = vec![0u8; h * w * 3];
    let mut fine = vec![0u16; h * w];
    for px in 0..h * w {
        for ch in 0..3 {
            rgb[px * 3 + ch] = pixel_noise(bg_color[ch], &mut rng);
        }
    }

    let shape_classes: Vec<u16> = (0..cfg.classes.len())
        .filter(|&c| cfg.classes[c].shape != ShapeKind::Backdrop)
        .map(|c| c as u16)
        .collect();
    let n_shapes = rng.gen_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let mut drawn: Vec<(u16, u16)> = vec![(0, 0)]; // (instance id, class id), backdrop first
    for s in 0..n_shapes {
        let class_id = shape_classes[rng.gen_range(0..shape_classes.len())];
        let spec = &cfg.classes[class_id as usize];
        let color = jitter_color(spec.color, spec.color_jitter, &mut rng);
        let id = (s + 1) as u16;
        for px in shape_pixels(spec.shape, h, w, &mut rng) {
            fine[px] = id;
            for ch in 0..3 {
                rgb[px * 3 + ch] = pixel_noise(color[ch], &mut rng);
            }
        }
        drawn.push((id, class_id));
    }

    // occlusion can erase earlier instances entirely
    let mut visible = vec![false; drawn.len()];
    for &id in fine.iter() {
        visible[id as usize] = true;
    }
    let id_to_class: Vec<(u16, u16)> = drawn
        .iter()
        .filter(|(id, _)| visible[*id as usize])
        .copied()
        .collect();

    let coarse = make_coarse(&fine, h, w, cfg.coarse_erosion, &id_to_class);
    let boxes = boxes_from_fine(&fine, h, w, &id_to_class);

    AnnotatedImage {
        index,
        split,
        height: h,
        width: w,
        rgb,
        fine,
        coarse,
        id_to_class,
        boxes,
    }
}

fn jitter_color(base: [u8; 3], jitter: u8, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &b) in out.iter_mut().zip(&base) {
        let j = rng.gen_range(-(jitter as i32)..=jitter as i32);
        *o = (b as i32 + j).clamp(0, 255) as u8;
    }
    out
}

fn pixel_noise(base: u8, rng: &mut ChaCha8Rng) -> u8 {
    (base as i32 + rng.gen_range(-4..=4)).clamp(0, 255) as u8
}

fn shape_pixels(kind: ShapeKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // sized so shapes span several patches of the default model config
    let min_dim = h.min(w);
    let r_min = (min_dim / 4).max(MIN_SHAPE_RADIUS);
    let r_max = (min_dim / 3).max(r_min);
    let r = rng.gen_range(r_min..=r_max);
    let cy = rng.gen_range(r..h - r) as i64;
    let cx = rng.gen_range(r..w - r) as i64;
    let r = r as i64;
    let mut pixels = Vec::new();
    match kind {
        ShapeKind::Backdrop => unreachable!("backdrop is never painted as a shape"),
        ShapeKind::Disk => {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy <= r * r {
                        pixels.push(((cy + dy) as usize) * w + (cx + dx) as usize);
                    }
                }
            }
        }
        ShapeKind::Rect => {
            let rx = (((r as f64) * rng.gen_range(0.6..1.0)).round() as i64).clamp(2, r);
            let ry = (((r as f64) * rng.gen_range(0.6..1.0)).round() as i64).clamp(2, r);
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    pixels.push(((cy + dy) as usize) * w + (cx + dx) as usize);
                }
            }
        }
        ShapeKind::Triangle => {
            // upright isoceles triangle inscribed in the radius
            for dy in -r..=r {
                let frac = (dy + r) as f64 / (2 * r) as f64;
                let half = (frac * r as f64).round() as i64;
                for dx in -half..=half {
                    pixels.push(((cy + dy) as usize) * w + (cx + dx) as usize);
                }
            }
        }
    }
    pixels
}

/// Erode every instance region by `erosion` (4-connected; the image border
/// counts as boundary). Regions that vanish keep their central pixel.
/// Everything outside the eroded cores is `VOID_ID`.
pub fn make_coarse(
    fine: &[u16],
    h: usize,
    w: usize,
    erosion: usize,
    id_to_class: &[(u16, u16)],
) -> Vec<u16> {
    let mut coarse = vec![VOID_ID; h * w];
    for &(id, _) in id_to_class {
        let mask: Vec<f32> = fine.iter().map(|&v| if v == id { 1.0 } else { 0.0 }).collect();
        let dist = distance_transform(&mask, h, w, 0.5);
        let mut any = false;
        for px in 0..h * w {
            if dist[px] > erosion as u32 {
                coarse[px] = id;
                any = true;
            }
        }
        if !any {
            if let Ok((r, c)) = central_point(&mask, h, w, 0.5) {
                coarse[r * w + c] = id;
            }
        }
    }
    coarse
}

/// Tight normalized boxes for every instance in the table, in table order.
pub fn boxes_from_fine(fine: &[u16], h: usize, w: usize, id_to_class: &[(u16, u16)]) -> Vec<BoxAnnotation> {
    let mut out = Vec::with_capacity(id_to_class.len());
    for &(id, class_id) in id_to_class {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for r in 0..h {
            for c in 0..w {
                if fine[r * w + c] == id {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        if r0 == usize::MAX {
            continue;
        }
        out.push(BoxAnnotation {
            class_id,
            cx: (c0 + c1 + 1) as f64 / (2.0 * w as f64),
            cy: (r0 + r1 + 1) as f64 / (2.0 * h as f64),
            w: (c1 - c0 + 1) as f64 / w as f64,
            h: (r1 - r0 + 1) as f64 / h as f64,
        });
    }
    out
}

/// L1 grid distance of every pixel to the nearest `true` pixel (0 on the
/// set itself). Used to build signed distances for mask jitter.
fn l1_distance_to_set(set: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for px in 0..h * w {
        if set[px] {
            dist[px] = 0;
            queue.push_back(px);
        }
    }
    while let Some(px) = queue.pop_front() {
        let (r, c) = (px / w, px % w);
        let d = dist[px];
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                continue;
            }
            let nidx = nr as usize * w + nc as usize;
            if dist[nidx] == u32::MAX {
                dist[nidx] = d + 1;
                queue.push_back(nidx);
            }
        }
    }
    dist
}

/// Soft mask from a binary segment: signed distance plus a smooth noise
/// field of amplitude sigma, squashed to [0,1]. Sigma zero reproduces the
/// binary mask exactly.
fn jittered_mask(seg: &[bool], h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return seg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    }
    let complement: Vec<bool> = seg.iter().map(|&b| !b).collect();
    let d_out = l1_distance_to_set(seg, h, w);
    let d_in = l1_distance_to_set(&complement, h, w);
    // coarse gaussian grid, bilinearly interpolated
    let spacing = 4usize;
    let (gh, gw) = (h / spacing + 2, w / spacing + 2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let soft_width = 1.0 + sigma / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let px = r * w + c;
            let sdf = if seg[px] { d_in[px] as f64 } else { -(d_out[px] as f64) };
            let gy = r as f64 / spacing as f64;
            let gx = c as f64 / spacing as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |yy: usize, xx: usize| grid[yy.min(gh - 1) * gw + xx.min(gw - 1)];
            let noise = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            let v = 0.5 + (sdf + sigma * noise) / (2.0 * soft_width);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// One proposal per ground-truth segment: jittered soft mask plus a
/// temperature-softened (optionally corrupted) one-hot, with a constant
/// "no object" score. Optional distractor proposals carry high null score.
pub fn synth_proposals(
    ann: &AnnotatedImage,
    noise: &ProposalNoise,
    num_classes: usize,
    distractors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProposalSet> {
    let (h, w) = (ann.height, ann.width);
    let mut masks = Vec::new();
    let mut scores = Vec::new();
    for (_, class_id, seg) in ann.segments() {
        let mask = jittered_mask(&seg, h, w, noise.mask_jitter_sigma, rng);
        let corrupt = rng.gen_bool(noise.label_corruption_rate);
        let label = if corrupt && num_classes > 1 {
            let wrong = rng.gen_range(0..num_classes - 1);
            if wrong >= class_id as usize {
                wrong + 1
            } else {
                wrong
            }
        } else {
            class_id as usize
        };
        scores.push(score_row(label, num_classes, noise));
        masks.push(mask);
    }
    for _ in 0..distractors {
        let blob: Vec<bool> = {
            let r = rng.gen_range(2..(h.min(w) / 3).max(3)) as i64;
            let cy = rng.gen_range(0..h) as i64;
            let cx = rng.gen_range(0..w) as i64;
            (0..h * w)
                .map(|px| {
                    let (pr, pc) = ((px / w) as i64, (px % w) as i64);
                    (pr - cy).pow(2) + (pc - cx).pow(2) <= r * r
                })
                .collect()
        };
        if !blob.iter().any(|&b| b) {
            continue;
        }
        let mask = jittered_mask(&blob, h, w, noise.mask_jitter_sigma.max(0.5), rng);
        let mut row = vec![(0.1 / num_classes as f32) as f32; num_classes + 1];
        row[num_classes] = 0.9;
        scores.push(row);
        masks.push(mask);
    }
    ProposalSet::new(format!("prop_{:06}", ann.index), h, w, num_classes, masks, scores)
}

fn score_row(label: usize, num_classes: usize, noise: &ProposalNoise) -> Vec<f32> {
    let tau = noise.confidence_temperature;
    let keep = 1.0 - noise.null_score;
    let mut row = vec![0.0f32; num_classes + 1];
    if tau <= 1e-9 {
        row[label] = keep as f32;
    } else {
        let top = (1.0 / tau).exp();
        let denom = top + (num_classes - 1) as f64;
        for (k, v) in row.iter_mut().take(num_classes).enumerate() {
            let p = if k == label { top / denom } else { 1.0 / denom };
            *v = (p * keep) as f32;
        }
    }
    row[num_classes] = noise.null_score as f32;
    row
}

/// Proposal sets for every image, each from its own derived RNG stream.
pub fn proposals_for_dataset(ds: &Dataset, cfg: &SynthConfig) -> Result<Vec<ProposalSet>> {
    let k = cfg.classes.len();
    let sets = parallel_map(ds.images.len(), |i| {
        let ann = &ds.images[i];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[ann.index as u64, STREAM_PROPOSALS]));
        synth_proposals(ann, &cfg.proposal_noise, k, cfg.distractors, &mut rng)
    });
    sets.into_iter().collect()
}

/// Assemble the metric-facing ground truth for one annotated image: the
/// semantic map, a panoptic partition (stuff merged per class), and the
/// thing instances.
pub fn ground_truth_from_annotation(ann: &AnnotatedImage, taxonomy: &Taxonomy) -> GroundTruth {
    let (h, w) = (ann.height, ann.width);
    let mut semantic = vec![VOID_ID; h * w];
    for (px, &id) in ann.fine.iter().enumerate() {
        if let Some(class) = ann.class_of(id) {
            semantic[px] = class;
        }
    }
    let mut pan_map = vec![0u32; h * w];
    let mut segments = Vec::new();
    let mut next_id = 1u32;
    let mut stuff_seg: std::collections::BTreeMap<u16, u32> = std::collections::BTreeMap::new();
    let mut instances = Vec::new();
    for (_, class_id, seg) in ann.segments() {
        let is_thing = taxonomy.is_thing(class_id as usize);
        let pan_id = if is_thing {
            let id = next_id;
            next_id += 1;
            segments.push(SegmentInfo {
                id,
                class_id: class_id as usize,
                is_thing,
            });
            id
        } else {
            *stuff_seg.entry(class_id).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                segments.push(SegmentInfo {
                    id,
                    class_id: class_id as usize,
                    is_thing,
                });
                id
            })
        };
        for (px, &inside) in seg.iter().enumerate() {
            if inside {
                pan_map[px] = pan_id;
            }
        }
        if is_thing {
            instances.push((seg, class_id as usize));
        }
    }
    GroundTruth {
        height: h,
        width: w,
        semantic,
        panoptic_map: pan_map,
        panoptic_segments: segments,
        instances,
    }
}
