//! On-disk formats.
//!
//! Three families, all documented byte-exactly in `docs/FORMATS.md`:
//!
//! * `VTP1` proposal files: magic, version, `H W N K` and flags as
//!   little-endian u32, then `N*H*W` mask samples (f32 LE or u8) and
//!   `N*(K+1)` f32 LE class scores. The image id is the file stem.
//! * `VTPC` checkpoints: named f32 tensors in lexicographic order with a
//!   trailing FNV-1a checksum over every preceding byte.
//! * dataset directories: P6 PPM images, 16-bit P5 PGM id maps (PNM
//!   convention: big-endian samples, maxval 65535), JSON metadata.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::pipeline::{ClassInfo, Instance, ProposalSet, SegResult, SegmentInfo, Taxonomy, VOID_ID};
use crate::synth::{AnnotatedImage, BoxAnnotation, Dataset, Split};
use crate::util::{fnv1a, FNV_OFFSET};

/// In-memory checkpoint contents: name -> (dims, f32 data), sorted by name.
pub type CheckpointTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Mask payload encoding inside a proposal file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStorage {
    F32,
    /// Lossy: stores `round(255 * v)`; max absolute error 1/510.
    U8,
}

const PROPOSAL_MAGIC: &[u8; 4] = b"VTP1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"VTPC";
const FLAG_MASK_F32: u32 = 1;
const FLAG_MASK_U8: u32 = 2;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

// ---- proposal files ----

pub fn write_proposals(set: &ProposalSet, path: &Path, mode: MaskStorage) -> Result<()> {
    let n = set.len();
    let k = set.num_classes();
    let (h, w) = (set.height, set.width);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PROPOSAL_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    for v in [h as u32, w as u32, n as u32, k as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let flags = match mode {
        MaskStorage::F32 => FLAG_MASK_F32,
        MaskStorage::U8 => FLAG_MASK_U8,
    };
    buf.extend_from_slice(&flags.to_le_bytes());
    for i in 0..n {
        match mode {
            MaskStorage::F32 => {
                for &v in set.mask(i) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            MaskStorage::U8 => {
                for &v in set.mask(i) {
                    buf.push((v * 255.0).round() as u8);
                }
            }
        }
    }
    for i in 0..n {
        for &v in set.scores(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    let data = std::fs::read(path)?;
    let p = path_str(path);
    if data.len() < 28 {
        return Err(Error::format(&p, format!("header needs 28 bytes, file has {}", data.len())));
    }
    if &data[0..4] != PROPOSAL_MAGIC {
        return Err(Error::format(&p, "bad magic, expected VTP1"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != 1 {
        return Err(Error::format(&p, format!("unsupported version {}", version)));
    }
    let (h, w, n, k) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let flags = u32_at(24);
    let mask_bytes = match flags {
        FLAG_MASK_F32 => 4usize,
        FLAG_MASK_U8 => 1usize,
        other => return Err(Error::format(&p, format!("bad flags {:#x}", other))),
    };
    let expected = 28usize
        .checked_add(n.checked_mul(h * w).and_then(|v| v.checked_mul(mask_bytes)).ok_or_else(|| {
            Error::format(&p, "payload size overflow")
        })?)
        .and_then(|v| v.checked_add(n * (k + 1) * 4))
        .ok_or_else(|| Error::format(&p, "payload size overflow"))?;
    if data.len() != expected {
        return Err(Error::format(
            &p,
            format!("expected {} bytes, got {}", expected, data.len()),
        ));
    }
    let mut off = 28usize;
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let mut m = Vec::with_capacity(h * w);
        match flags {
            FLAG_MASK_F32 => {
                for _ in 0..h * w {
                    m.push(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()));
                    off += 4;
                }
            }
            _ => {
                for _ in 0..h * w {
                    m.push(data[off] as f32 / 255.0);
                    off += 1;
                }
            }
        }
        masks.push(m);
    }
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(k + 1);
        for _ in 0..k + 1 {
            row.push(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        scores.push(row);
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ProposalSet::new(stem, h, w, k, masks, scores)
}

// ---- checkpoints ----

pub fn write_checkpoint(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    let tensors: CheckpointTensors = params
        .iter()
        .map(|(name, t)| (name.clone(), (t.dims(), t.values())))
        .collect();
    write_checkpoint_tensors(&tensors, path)
}

pub fn write_checkpoint_tensors(tensors: &CheckpointTensors, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (dims, data)) in tensors {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "write_checkpoint",
                detail: format!("'{}': dims {:?} vs {} values", name, dims, data.len()),
            });
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(FNV_OFFSET, &buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointTensors> {
    let data = std::fs::read(path)?;
    let p = path_str(path);
    if data.len() < 20 {
        return Err(Error::format(&p, format!("too short: {} bytes", data.len())));
    }
    let payload_end = data.len() - 8;
    let stored = u64::from_le_bytes(data[payload_end..].try_into().unwrap());
    let computed = fnv1a(FNV_OFFSET, &data[..payload_end]);
    if stored != computed {
        return Err(Error::format(
            &p,
            format!(
                "checksum mismatch at byte offset {}: stored {:#018x}, computed {:#018x}",
                payload_end, stored, computed
            ),
        ));
    }
    if &data[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(&p, "bad magic, expected VTPC"));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != 1 {
        return Err(Error::format(&p, format!("unsupported version {}", version)));
    }
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let mut off = 12usize;
    let mut out = CheckpointTensors::new();
    let need = |p: &str, off: usize, len: usize, end: usize| -> Result<()> {
        if off + len > end {
            Err(Error::format(
                p,
                format!("truncated at byte offset {}: need {} more bytes", off, len),
            ))
        } else {
            Ok(())
        }
    };
    for _ in 0..count {
        need(&p, off, 4, payload_end)?;
        let name_len = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(&p, off, name_len, payload_end)?;
        let name = std::str::from_utf8(&data[off..off + name_len])
            .map_err(|_| Error::format(&p, format!("invalid UTF-8 name at offset {}", off)))?
            .to_string();
        off += name_len;
        need(&p, off, 4, payload_end)?;
        let rank = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(&p, off, rank * 4, payload_end)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let numel: usize = dims.iter().product();
        need(&p, off, numel * 4, payload_end)?;
        let mut vals = Vec::with_capacity(numel);
        for _ in 0..numel {
            vals.push(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        if out.insert(name.clone(), (dims, vals)).is_some() {
            return Err(Error::format(&p, format!("duplicate tensor name '{}'", name)));
        }
    }
    if off != payload_end {
        return Err(Error::format(
            &p,
            format!("{} trailing bytes after tensor {} at offset {}", payload_end - off, count, off),
        ));
    }
    Ok(out)
}

/// Copy checkpoint tensors into an existing f32 parameter store, name by
/// name, requiring exact name-set and shape agreement.
pub fn apply_checkpoint(params: &ParamStore<f32>, tensors: &CheckpointTensors) -> Result<()> {
    let names = params.names();
    if names.len() != tensors.len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            names.len()
        )));
    }
    for name in names {
        let (dims, data) = tensors
            .get(&name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint missing parameter '{}'", name)))?;
        let t = params.get(&name).expect("name from store");
        if *dims != t.dims() {
            return Err(Error::ShapeMismatch {
                op: "apply_checkpoint",
                detail: format!("'{}': {:?} vs {:?}", name, dims, t.dims()),
            });
        }
        params.set_values(&name, data)?;
    }
    Ok(())
}

// ---- PNM images ----

fn write_ppm(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", width, height)?;
    f.write_all(rgb)?;
    Ok(())
}

fn write_pgm16(path: &Path, ids: &[u16], height: usize, width: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n65535\n", width, height)?;
    let mut bytes = Vec::with_capacity(ids.len() * 2);
    for &v in ids {
        bytes.extend_from_slice(&v.to_be_bytes()); // PNM 16-bit samples are big-endian
    }
    f.write_all(&bytes)?;
    Ok(())
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pnm_header(path: &str, data: &[u8], magic: &str) -> Result<PnmHeader> {
    if data.len() < 2 || &data[0..2] != magic.as_bytes() {
        return Err(Error::format(path, format!("expected {} header", magic)));
    }
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PNM header"));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(path, "malformed PNM header"))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "malformed PNM header"));
    }
    pos += 1; // single whitespace after maxval
    Ok(PnmHeader {
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval: fields[2],
        data_offset: pos,
    })
}

fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let data = std::fs::read(path)?;
    let p = path_str(path);
    let hdr = parse_pnm_header(&p, &data, "P6")?;
    if hdr.maxval != 255 {
        return Err(Error::format(&p, format!("P6 maxval must be 255, got {}", hdr.maxval)));
    }
    let expected = hdr.data_offset + hdr.width * hdr.height * 3;
    if data.len() != expected {
        return Err(Error::format(&p, format!("expected {} bytes, got {}", expected, data.len())));
    }
    Ok((data[hdr.data_offset..].to_vec(), hdr.height, hdr.width))
}

fn read_pgm16(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let data = std::fs::read(path)?;
    let p = path_str(path);
    let hdr = parse_pnm_header(&p, &data, "P5")?;
    if hdr.maxval != 65535 {
        return Err(Error::format(
            &p,
            format!("16-bit PGM maxval must be 65535, got {}", hdr.maxval),
        ));
    }
    let expected = hdr.data_offset + hdr.width * hdr.height * 2;
    if data.len() != expected {
        return Err(Error::format(&p, format!("expected {} bytes, got {}", expected, data.len())));
    }
    let ids = data[hdr.data_offset..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((ids, hdr.height, hdr.width))
}

// ---- dataset directories ----

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    name: String,
    is_thing: bool,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    split: String,
    id_to_class: Vec<(u16, u16)>,
    boxes: Vec<BoxEntry>,
}

#[derive(Serialize, Deserialize)]
struct BoxEntry {
    class_id: u16,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tax = TaxonomyFile {
        classes: ds
            .taxonomy
            .classes
            .iter()
            .map(|c| ClassEntry {
                name: c.name.clone(),
                is_thing: c.is_thing,
            })
            .collect(),
    };
    write_json(&dir.join("taxonomy.json"), &tax)?;
    for img in &ds.images {
        let i = img.index;
        write_ppm(&dir.join(format!("img_{:06}.ppm", i)), &img.rgb, img.height, img.width)?;
        write_pgm16(&dir.join(format!("fine_{:06}.pgm", i)), &img.fine, img.height, img.width)?;
        write_pgm16(&dir.join(format!("coarse_{:06}.pgm", i)), &img.coarse, img.height, img.width)?;
        let meta = MetaFile {
            split: match img.split {
                Split::Train => "train".into(),
                Split::Val => "val".into(),
            },
            id_to_class: img.id_to_class.clone(),
            boxes: img
                .boxes
                .iter()
                .map(|b| BoxEntry {
                    class_id: b.class_id,
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                })
                .collect(),
        };
        write_json(&dir.join(format!("meta_{:06}.json", i)), &meta)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let tax_path = dir.join("taxonomy.json");
    let tax: TaxonomyFile = read_json(&tax_path)?;
    let taxonomy = Taxonomy {
        classes: tax
            .classes
            .into_iter()
            .map(|c| ClassInfo {
                name: c.name,
                is_thing: c.is_thing,
            })
            .collect(),
    };
    let mut indices: Vec<usize> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("img_").and_then(|s| s.strip_suffix(".ppm")) {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    let mut images = Vec::with_capacity(indices.len());
    for i in indices {
        let (rgb, h, w) = read_ppm(&dir.join(format!("img_{:06}.ppm", i)))?;
        let (fine, fh, fw) = read_pgm16(&dir.join(format!("fine_{:06}.pgm", i)))?;
        let (coarse, ch, cw) = read_pgm16(&dir.join(format!("coarse_{:06}.pgm", i)))?;
        if (fh, fw) != (h, w) || (ch, cw) != (h, w) {
            return Err(Error::format(
                dir.join(format!("fine_{:06}.pgm", i)).display().to_string(),
                "id map size differs from image",
            ));
        }
        let meta_path = dir.join(format!("meta_{:06}.json", i));
        let meta: MetaFile = read_json(&meta_path)?;
        let split = match meta.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            other => {
                return Err(Error::format(
                    path_str(&meta_path),
                    format!("unknown split '{}'", other),
                ))
            }
        };
        let table: BTreeMap<u16, u16> = meta.id_to_class.iter().copied().collect();
        for &id in fine.iter() {
            if id != VOID_ID && !table.contains_key(&id) {
                return Err(Error::format(
                    path_str(&meta_path),
                    format!("instance id {} in fine map missing from id_to_class", id),
                ));
            }
        }
        images.push(AnnotatedImage {
            index: i,
            split,
            height: h,
            width: w,
            rgb,
            fine,
            coarse,
            id_to_class: meta.id_to_class,
            boxes: meta
                .boxes
                .into_iter()
                .map(|b| BoxAnnotation {
                    class_id: b.class_id,
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                })
                .collect(),
        });
    }
    Ok(Dataset { taxonomy, images })
}

// ---- segmentation results ----

#[derive(Serialize, Deserialize)]
struct PanopticTableFile {
    segments: Vec<PanopticTableEntry>,
}

#[derive(Serialize, Deserialize)]
struct PanopticTableEntry {
    id: u32,
    class_id: u16,
    is_thing: bool,
}

/// Write a task result. Semantic maps and panoptic id maps go to 16-bit
/// PGM (panoptic adds a JSON segment table); instances reuse the proposal
/// container with `score` encoded as `1 - null`.
pub fn write_seg_result(result: &SegResult, dir: &Path, index: usize, num_classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    match result {
        SegResult::Semantic { height, width, map } => {
            write_pgm16(&dir.join(format!("sem_{:06}.pgm", index)), map, *height, *width)
        }
        SegResult::Panoptic { height, width, map, segments } => {
            let ids: Vec<u16> = map
                .iter()
                .map(|&v| if v > u16::MAX as u32 { u16::MAX } else { v as u16 })
                .collect();
            write_pgm16(&dir.join(format!("pan_{:06}.pgm", index)), &ids, *height, *width)?;
            let table = PanopticTableFile {
                segments: segments
                    .iter()
                    .map(|s| PanopticTableEntry {
                        id: s.id,
                        class_id: s.class_id as u16,
                        is_thing: s.is_thing,
                    })
                    .collect(),
            };
            write_json(&dir.join(format!("pan_{:06}.json", index)), &table)
        }
        SegResult::Instances { height, width, instances } => {
            let masks: Vec<Vec<f32>> = instances
                .iter()
                .map(|ins| ins.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect();
            let scores: Vec<Vec<f32>> = instances
                .iter()
                .map(|ins| {
                    let mut row = vec![0.0f32; num_classes + 1];
                    row[ins.class_id] = ins.score as f32;
                    row[num_classes] = 1.0 - ins.score as f32;
                    row
                })
                .collect();
            let set = ProposalSet::new(
                format!("inst_{:06}", index),
                *height,
                *width,
                num_classes,
                masks,
                scores,
            )?;
            write_proposals(&set, &dir.join(format!("inst_{:06}.vtp", index)), MaskStorage::U8)
        }
    }
}

/// Read back a written instance result file.
pub fn read_instances(path: &Path) -> Result<(usize, usize, Vec<Instance>)> {
    let set = read_proposals(path)?;
    let k = set.num_classes();
    let mut instances = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let row = set.scores(i);
        let class_id = crate::util::argmax(&row[..k]).unwrap_or(0);
        instances.push(Instance {
            mask: set.mask(i).iter().map(|&v| v >= 0.5).collect(),
            class_id,
            score: row[class_id] as f64,
        });
    }
    Ok((set.height, set.width, instances))
}

pub fn read_semantic_map(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    read_pgm16(path)
}

pub fn read_panoptic(dir: &Path, index: usize) -> Result<SegResult> {
    let (ids, h, w) = read_pgm16(&dir.join(format!("pan_{:06}.pgm", index)))?;
    let table: PanopticTableFile = read_json(&dir.join(format!("pan_{:06}.json", index)))?;
    Ok(SegResult::Panoptic {
        height: h,
        width: w,
        map: ids.iter().map(|&v| v as u32).collect(),
        segments: table
            .segments
            .into_iter()
            .map(|s| SegmentInfo {
                id: s.id,
                class_id: s.class_id as usize,
                is_thing: s.is_thing,
            })
            .collect(),
    })
}

// ---- JSON helpers ----

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path_str(path), format!("serialize: {}", e)))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path_str(path), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, h: usize, w: usize, k: usize) -> ProposalSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.gen_range(0.0..=1.0f32)).collect())
            .collect();
        let scores: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let mut row: Vec<f32> = (0..k + 1).map(|_| rng.gen_range(0.0..1.0f32)).collect();
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                row.iter_mut().for_each(|x| *x = (*x as f64 / s) as f32);
                row
            })
            .collect();
        ProposalSet::new("t", h, w, k, masks, scores).unwrap()
    }

    #[test]
    fn proposal_roundtrip_f32_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let set = random_set(1, 4, 6, 5, 3);
        let path = dir.path().join("prop_000000.vtp");
        write_proposals(&set, &path, MaskStorage::F32).unwrap();
        let back = read_proposals(&path).unwrap();
        assert_eq!(back.image_id, "prop_000000");
        assert_eq!((back.height, back.width, back.len()), (6, 5, 4));
        for i in 0..set.len() {
            let a: Vec<u32> = set.mask(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.mask(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            let a: Vec<u32> = set.scores(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.scores(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        // write(read(x)) produces identical bytes
        let path2 = dir.path().join("again.vtp");
        write_proposals(&back, &path2, MaskStorage::F32).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn proposal_u8_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let set = random_set(2, 3, 8, 8, 2);
        let path = dir.path().join("p.vtp");
        write_proposals(&set, &path, MaskStorage::U8).unwrap();
        let back = read_proposals(&path).unwrap();
        for i in 0..set.len() {
            for (a, b) in set.mask(i).iter().zip(back.mask(i)) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn proposal_truncation_names_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let set = random_set(3, 2, 4, 4, 2);
        let path = dir.path().join("p.vtp");
        write_proposals(&set, &path, MaskStorage::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_proposals(&path).unwrap_err().to_string();
        assert!(err.contains(&format!("{}", full)), "{}", err);
        assert!(err.contains(&format!("{}", full - 5)), "{}", err);
    }

    #[test]
    fn proposal_bad_magic_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let set = random_set(4, 1, 2, 2, 2);
        let path = dir.path().join("p.vtp");
        write_proposals(&set, &path, MaskStorage::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_proposals(&path).unwrap_err().to_string().contains("magic"));

        write_proposals(&set, &path, MaskStorage::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[24] = 3; // both mask flags set
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_proposals(&path).unwrap_err().to_string().contains("flags"));
    }

    #[test]
    fn checkpoint_roundtrip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = CheckpointTensors::new();
        tensors.insert("b.w".into(), (vec![2, 3], vec![0.5, -1.0, 3.25, 0.0, 2.0, -0.125]));
        tensors.insert("a.v".into(), (vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let path = dir.path().join("model.vtpc");
        write_checkpoint_tensors(&tensors, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a.v"].0, vec![4]);
        assert_eq!(
            back["b.w"].1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            tensors["b.w"].1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // full-file byte equality after a round trip
        let path2 = dir.path().join("again.vtpc");
        write_checkpoint_tensors(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // single flipped payload byte -> checksum error
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn pgm_rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n2 1\n255\n\x00\x01").unwrap();
        let err = read_pgm16(&path).unwrap_err().to_string();
        assert!(err.contains("65535"), "{}", err);
    }

    #[test]
    fn pnm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let p = dir.path().join("img.ppm");
        write_ppm(&p, &rgb, 2, 3).unwrap();
        let (back, h, w) = read_ppm(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, rgb);

        let ids: Vec<u16> = vec![0, 1, 65535, 42, 65534, 7];
        let p = dir.path().join("ids.pgm");
        write_pgm16(&p, &ids, 2, 3).unwrap();
        let (back, h, w) = read_pgm16(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, ids);
    }
}
