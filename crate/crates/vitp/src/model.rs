//! The point-prompted classifier: a plain ViT encoder that takes N point
//! (or box) prompts alongside the patch tokens and emits per-prompt class
//! logits.
//!
//! Prompt tokens come first in the sequence. All prompt tokens share one
//! positional vector; on checkpoint load that vector can be seeded from a
//! stored CLS positional slot, which is how pre-trained ViT checkpoints
//! remain compatible even though this model has no CLS token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::CheckpointTensors;
use crate::optim::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: full training fits in minutes on a CPU.
        ModelConfig {
            image_size: (64, 64),
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            num_classes: 6,
            mlp_ratio: 4.0,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by patch size {}",
                h, w, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be > 0".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size.0 / self.patch_size) * (self.image_size.1 / self.patch_size)
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// A normalized `[x, y, w, h]` prompt. A pure point has `w = h = 0`; a box
/// carries its center and extent. Coordinates are fractions of image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: Option<usize>,
}

impl PointPrompt {
    pub fn point(x: f64, y: f64) -> Result<Self> {
        Self::boxed(x, y, 0.0, 0.0)
    }

    pub fn boxed(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let p = PointPrompt {
            x,
            y,
            w,
            h,
            label: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.x, self.y, self.w, self.h] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "prompt [{}, {}, {}, {}] outside [0,1]",
                    self.x, self.y, self.w, self.h
                )));
            }
        }
        Ok(())
    }

    /// Pixel (row, col) center -> normalized point prompt.
    pub fn from_pixel(row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        Self::point(
            (col as f64 + 0.5) / width as f64,
            (row as f64 + 0.5) / height as f64,
        )
    }
}

/// A non-empty batch of prompts; one forward classifies all of them at once.
#[derive(Debug, Clone)]
pub struct PointBatch {
    prompts: Vec<PointPrompt>,
}

impl PointBatch {
    pub fn new(prompts: Vec<PointPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidInput("point batch must not be empty".into()));
        }
        for p in &prompts {
            p.validate()?;
        }
        Ok(PointBatch { prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompts(&self) -> &[PointPrompt] {
        &self.prompts
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.prompts
            .iter()
            .map(|p| p.label.ok_or_else(|| Error::InvalidInput("prompt missing label".into())))
            .collect()
    }
}

/// Attention connectivity. `Full` is the model; `PointIsolation` is a
/// diagnostic mode where prompt tokens see only patch tokens (plus
/// themselves) and patch tokens see only patches, so each prompt's output
/// is independent of the other prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    PointIsolation,
}

/// Convert packed RGB bytes to an `[H, W, C]` tensor scaled to [0, 1].
pub fn image_tensor_from_rgb<T: Scalar>(rgb: &[u8], height: usize, width: usize) -> Result<Tensor<T>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::ShapeMismatch {
            op: "image_tensor_from_rgb",
            detail: format!("{} bytes for {}x{}x3", rgb.len(), height, width),
        });
    }
    let values: Vec<T> = rgb.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
    Tensor::new(&[height, width, 3], values)
}

/// Cut the image into non-overlapping patches and project each to a
/// D-vector. Row i of the output is patch i in row-major patch order.
pub fn patch_embed<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w) = cfg.image_size;
    let expect = vec![h, w, cfg.channels];
    if image.dims() != expect {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            detail: format!("image dims {:?}, config wants {:?}", image.dims(), expect),
        });
    }
    let p = cfg.patch_size;
    let c = cfg.channels;
    let (ph, pw) = (h / p, w / p);
    let patch_dim = cfg.patch_dim();
    let mut patches = Vec::with_capacity(ph * pw * patch_dim);
    image.with_values(|v| {
        for pr in 0..ph {
            for pc in 0..pw {
                for r in 0..p {
                    let row = pr * p + r;
                    let base = (row * w + pc * p) * c;
                    patches.extend_from_slice(&v[base..base + p * c]);
                }
            }
        }
    });
    let patch_mat = Tensor::new(&[ph * pw, patch_dim], patches)?;
    let w_mat = param(params, "patch.w")?;
    let b = param(params, "patch.b")?;
    patch_mat.matmul(w_mat)?.add_row_broadcast(b)
}

/// Map each `[x, y, w, h]` prompt through the shared affine point encoder.
pub fn encode_points<T: Scalar>(params: &ParamStore<T>, batch: &PointBatch) -> Result<Tensor<T>> {
    let n = batch.len();
    let mut vals = Vec::with_capacity(n * 4);
    for pr in batch.prompts() {
        pr.validate()?;
        vals.push(T::from_f64(pr.x));
        vals.push(T::from_f64(pr.y));
        vals.push(T::from_f64(pr.w));
        vals.push(T::from_f64(pr.h));
    }
    let mat = Tensor::new(&[n, 4], vals)?;
    let w = param(params, "point.w")?;
    let b = param(params, "point.b")?;
    mat.matmul(w)?.add_row_broadcast(b)
}

/// Token sequence: prompt embeddings first, then patch embeddings.
pub fn build_sequence<T: Scalar>(x_p: &Tensor<T>, x_i: &Tensor<T>) -> Result<Tensor<T>> {
    let pd = x_p.dims();
    if pd.len() != 2 || pd[0] == 0 {
        return Err(Error::InvalidInput(
            "sequence needs at least one point token".into(),
        ));
    }
    x_p.concat_rows(x_i)
}

/// Add positional embeddings: each patch token gets its own vector, every
/// point token gets the single shared `pos_point` vector.
pub fn add_positional<T: Scalar>(
    z: &Tensor<T>,
    pos_patch: &Tensor<T>,
    pos_point: &Tensor<T>,
) -> Result<Tensor<T>> {
    let zd = z.dims();
    let pd = pos_patch.dims();
    if zd.len() != 2 || pd.len() != 2 || pd[1] != zd[1] || pd[0] > zd[0] {
        return Err(Error::ShapeMismatch {
            op: "add_positional",
            detail: format!("z {:?} vs pos_patch {:?}", zd, pd),
        });
    }
    let n_points = zd[0] - pd[0];
    if n_points == 0 {
        return Err(Error::InvalidInput(
            "sequence needs at least one point token".into(),
        ));
    }
    let points = z.slice_rows(0, n_points)?.add_row_broadcast(pos_point)?;
    let patches = z.slice_rows(n_points, pd[0])?.add(&pos_patch.clone())?;
    points.concat_rows(&patches)
}

/// Report of which parameters a checkpoint load copied vs left fresh.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub initialized: Vec<String>,
}

/// The model: config plus named parameters.
pub struct VitP<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> VitP<T> {
    /// Fresh model with seeded Xavier-uniform init. Each parameter draws
    /// from its own name-derived stream, so init is order-independent.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let d = cfg.embed_dim;
        let add_linear = |params: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize| -> Result<()> {
            let wname = format!("{}.w", prefix);
            let bname = format!("{}.b", prefix);
            params.insert(&wname, &[fan_in, fan_out], xavier(seed, &wname, fan_in, fan_out))?;
            params.insert(&bname, &[fan_out], vec![T::ZERO; fan_out])?;
            Ok(())
        };
        add_linear(&mut params, "patch", cfg.patch_dim(), d)?;
        add_linear(&mut params, "point", 4, d)?;
        // learned patch positions, seeded with a coordinate code so that
        // prompt-to-patch routing can bootstrap without a pretrained encoder
        params.insert(
            "pos.patch",
            &[cfg.n_patches(), d],
            coord_pos_init(seed, &cfg),
        )?;
        params.insert("pos.point", &[d], uniform_init(seed, "pos.point", d, 0.02))?;
        for b in 0..cfg.depth {
            let pre = format!("enc.block{:02}", b);
            for ln in ["ln1", "ln2"] {
                params.insert(&format!("{}.{}.g", pre, ln), &[d], vec![T::ONE; d])?;
                params.insert(&format!("{}.{}.b", pre, ln), &[d], vec![T::ZERO; d])?;
            }
            for proj in ["wq", "wk", "wv", "wo"] {
                let name = format!("{}.attn.{}", pre, proj);
                params.insert(&name, &[d, d], xavier(seed, &name, d, d))?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                params.insert(&format!("{}.attn.{}", pre, bias), &[d], vec![T::ZERO; d])?;
            }
            add_linear(&mut params, &format!("{}.mlp.fc1", pre), d, cfg.mlp_dim())?;
            add_linear(&mut params, &format!("{}.mlp.fc2", pre), cfg.mlp_dim(), d)?;
        }
        params.insert("enc.final_ln.g", &[d], vec![T::ONE; d])?;
        params.insert("enc.final_ln.b", &[d], vec![T::ZERO; d])?;
        add_linear(&mut params, "head.fc1", d, d)?;
        // damped classifier init keeps the fresh-model loss at ln K
        let k = cfg.num_classes;
        let damp = T::from_f64(0.1);
        let head_w: Vec<T> = xavier::<T>(seed, "head.fc2.w", d, k)
            .into_iter()
            .map(|v| v * damp)
            .collect();
        params.insert("head.fc2.w", &[d, k], head_w)?;
        params.insert("head.fc2.b", &[k], vec![T::ZERO; k])?;
        Ok(VitP { cfg, params })
    }

    /// Per-prompt logits `[N x K]`.
    pub fn forward(&self, image: &Tensor<T>, batch: &PointBatch) -> Result<Tensor<T>> {
        self.forward_with_mode(image, batch, AttentionMode::Full)
    }

    pub fn forward_with_mode(
        &self,
        image: &Tensor<T>,
        batch: &PointBatch,
        mode: AttentionMode,
    ) -> Result<Tensor<T>> {
        let n = batch.len();
        let x_i = patch_embed(&self.cfg, &self.params, image)?;
        let x_p = encode_points(&self.params, batch)?;
        let z = build_sequence(&x_p, &x_i)?;
        let z = add_positional(&z, param(&self.params, "pos.patch")?, param(&self.params, "pos.point")?)?;
        let mask = self.attention_mask(n, mode)?;
        let mut x = z;
        for b in 0..self.cfg.depth {
            x = self.block(&x, b, mask.as_ref())?;
        }
        let x = x.layer_norm(
            param(&self.params, "enc.final_ln.g")?,
            param(&self.params, "enc.final_ln.b")?,
            T::from_f64(LN_EPS),
        )?;
        let points = x.slice_rows(0, n)?;
        let hidden = points
            .matmul(param(&self.params, "head.fc1.w")?)?
            .add_row_broadcast(param(&self.params, "head.fc1.b")?)?
            .gelu()?;
        hidden
            .matmul(param(&self.params, "head.fc2.w")?)?
            .add_row_broadcast(param(&self.params, "head.fc2.b")?)
    }

    fn block(&self, x: &Tensor<T>, idx: usize, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let pre = format!("enc.block{:02}", idx);
        let eps = T::from_f64(LN_EPS);
        let normed = x.layer_norm(
            param(&self.params, &format!("{}.ln1.g", pre))?,
            param(&self.params, &format!("{}.ln1.b", pre))?,
            eps,
        )?;
        let attn = self.attention(&normed, &pre, mask)?;
        let x = x.add(&attn)?;
        let normed = x.layer_norm(
            param(&self.params, &format!("{}.ln2.g", pre))?,
            param(&self.params, &format!("{}.ln2.b", pre))?,
            eps,
        )?;
        let h = normed
            .matmul(param(&self.params, &format!("{}.mlp.fc1.w", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.mlp.fc1.b", pre))?)?
            .gelu()?
            .matmul(param(&self.params, &format!("{}.mlp.fc2.w", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.mlp.fc2.b", pre))?)?;
        x.add(&h)
    }

    fn attention(&self, x: &Tensor<T>, pre: &str, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let q = x
            .matmul(param(&self.params, &format!("{}.attn.wq", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.attn.bq", pre))?)?;
        let k = x
            .matmul(param(&self.params, &format!("{}.attn.wk", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.attn.bk", pre))?)?;
        let v = x
            .matmul(param(&self.params, &format!("{}.attn.wv", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.attn.bv", pre))?)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let attn = scores.softmax()?;
            head_outs.push(attn.matmul(&vh)?);
        }
        Tensor::concat_cols(&head_outs)?
            .matmul(param(&self.params, &format!("{}.attn.wo", pre))?)?
            .add_row_broadcast(param(&self.params, &format!("{}.attn.bo", pre))?)
    }

    fn attention_mask(&self, n_points: usize, mode: AttentionMode) -> Result<Option<Tensor<T>>> {
        match mode {
            AttentionMode::Full => Ok(None),
            AttentionMode::PointIsolation => {
                let total = n_points + self.cfg.n_patches();
                let neg = T::from_f64(-1e9);
                let mut m = vec![T::ZERO; total * total];
                for i in 0..total {
                    for j in 0..total {
                        let allowed = if i < n_points {
                            j >= n_points || j == i
                        } else {
                            j >= n_points
                        };
                        if !allowed {
                            m[i * total + j] = neg;
                        }
                    }
                }
                Ok(Some(Tensor::new(&[total, total], m)?))
            }
        }
    }

    /// Copy checkpoint tensors into this model.
    ///
    /// With `skip_scratch`, the point encoder and classification head stay
    /// freshly initialized. The shared point positional vector prefers a
    /// stored CLS positional slot (`pos.cls`) when the checkpoint has one.
    pub fn load_pretrained(&mut self, ckpt: &CheckpointTensors, skip_scratch: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for name in self.params.names() {
            if skip_scratch && (name.starts_with("point.") || name.starts_with("head.")) {
                report.initialized.push(name);
                continue;
            }
            let source = if name == "pos.point" && ckpt.contains_key("pos.cls") {
                Some("pos.cls")
            } else if ckpt.contains_key(name.as_str()) {
                Some(name.as_str())
            } else {
                None
            };
            match source {
                Some(src) => {
                    let (dims, data) = &ckpt[src];
                    let target = self.params.get(&name).expect("name from store");
                    if *dims != target.dims() {
                        return Err(Error::ShapeMismatch {
                            op: "load_pretrained",
                            detail: format!(
                                "'{}': checkpoint {:?} vs model {:?}",
                                name,
                                dims,
                                target.dims()
                            ),
                        });
                    }
                    let vals: Vec<T> = data.iter().map(|&x| T::from_f64(x as f64)).collect();
                    self.params.set_values(&name, &vals)?;
                    report.loaded.push(name);
                }
                None => {
                    if name == "pos.point" {
                        report.initialized.push(name);
                    } else {
                        return Err(Error::InvalidInput(format!(
                            "checkpoint missing required parameter '{}'",
                            name
                        )));
                    }
                }
            }
        }
        Ok(report)
    }
}

const LN_EPS: f64 = 1e-6;

fn param<'a, T: Scalar>(params: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
    params
        .get(name)
        .ok_or_else(|| Error::InvalidInput(format!("missing parameter '{}'", name)))
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h = crate::util::fnv1a(crate::util::FNV_OFFSET, name.as_bytes());
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[h]))
}

fn xavier<T: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = name_rng(seed, name);
    (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect()
}

fn uniform_init<T: Scalar>(seed: u64, name: &str, n: usize, amplitude: f64) -> Vec<T> {
    let mut rng = name_rng(seed, name);
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-amplitude..amplitude)))
        .collect()
}

/// Patch positional init: the first four dims carry the patch center as
/// (x, y, x^2+y^2 helpers) in normalized coordinates, the rest is small
/// uniform noise. Purely an initialization; the embedding stays trainable.
fn coord_pos_init<T: Scalar>(seed: u64, cfg: &ModelConfig) -> Vec<T> {
    let d = cfg.embed_dim;
    let (h, w) = cfg.image_size;
    let p = cfg.patch_size;
    let (rows, cols) = (h / p, w / p);
    let mut rng = name_rng(seed, "pos.patch");
    let mut out = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            let cx = (c as f64 + 0.5) / cols as f64;
            let cy = (r as f64 + 0.5) / rows as f64;
            for i in 0..d {
                let v = match i {
                    0 => cx - 0.5,
                    1 => cy - 0.5,
                    2 => cx * cx - 0.5,
                    3 => cy * cy - 0.5,
                    _ => rng.gen_range(-0.02..0.02),
                };
                out.push(T::from_f64(v));
            }
        }
    }
    out
}

/// Full-model gradient check against central finite differences (f64).
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

/// Compare analytic gradients of a model's cross-entropy loss to central
/// finite differences over every parameter element.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = VitP::<f64>::new(cfg.clone(), seed)?;
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF00D]));
    let image_vals: Vec<f64> = (0..h * w * cfg.channels).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Tensor::new(&[h, w, cfg.channels], image_vals)?;
    let n_points = 3;
    let prompts: Vec<PointPrompt> = (0..n_points)
        .map(|_| {
            PointPrompt::point(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)).expect("in range")
        })
        .collect();
    let batch = PointBatch::new(prompts)?;
    let labels: Vec<usize> = (0..n_points).map(|_| rng.gen_range(0..cfg.num_classes)).collect();

    let loss = model.forward(&image, &batch)?.cross_entropy(&labels)?;
    loss.backward()?;

    let eval_loss = |m: &VitP<f64>| -> Result<f64> {
        let guard = crate::tensor::NoGradGuard::new();
        let l = m.forward(&image, &batch)?.cross_entropy(&labels)?.item()?;
        drop(guard);
        Ok(l)
    };

    let h_step = 1e-5;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for name in model.params.names() {
        let tensor = model.params.get(&name).unwrap().clone();
        let mut analytic = tensor.grad().ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        if corrupt && !analytic.is_empty() && name.starts_with("head.") {
            analytic[0] += 0.5;
        }
        let base = tensor.values();
        for i in 0..base.len() {
            let orig = base[i];
            let mut v = base.clone();
            v[i] = orig + h_step;
            model.params.set_values(&name, &v)?;
            let fp = eval_loss(&model)?;
            v[i] = orig - h_step;
            model.params.set_values(&name, &v)?;
            let fm = eval_loss(&model)?;
            v[i] = orig;
            model.params.set_values(&name, &v)?;
            let numeric = (fp - fm) / (2.0 * h_step);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", name, i);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        params_checked: checked,
    })
}
