//! On-disk formats: binary PPM frames, PGM labels and masks, Middlebury
//! `.flo` flows, and plain-text manifests.

use std::fs;
use std::path::{Path, PathBuf};

use super::{PixelMask, SceneSequence, SceneSpec};
use crate::error::{Error, Result};
use crate::segmap::LabelMap;
use crate::tensor::Tensor;

/// Per-sequence file list, one filename per line.
pub const SEQUENCE_MANIFEST: &str = "manifest.txt";
/// Generator settings of a sequence.
pub const SPEC_FILE: &str = "spec.txt";
/// Dataset index: one sequence directory per line, relative to the root.
pub const DATASET_MANIFEST: &str = "dataset.txt";

const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

/// Parse a binary PNM header with the given magic. Only maxval 255 is accepted.
fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, start as u64, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, start as u64, "header field out of range"))?;
        if k == 2 && *field != 255 {
            return Err(Error::format(
                path,
                start as u64,
                format!("maxval must be 255, got {field}"),
            ));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, pos as u64, "expected whitespace after maxval")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        data_start: pos,
    })
}

fn payload<'a>(path: &Path, bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.data_start;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    Ok(&bytes[header.data_start..header.data_start + need])
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` frame in `[0, 1]` as P6.
pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dim("write_ppm", format!("expected [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(to_byte(d[c * h * w + p]));
        }
    }
    write_bytes(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let header = parse_pnm_header(path, &bytes, b"P6")?;
    let data = payload(path, &bytes, &header, 3)?;
    let (h, w) = (header.height, header.width);
    let mut t = Tensor::zeros(&[3, h, w]);
    for p in 0..h * w {
        for c in 0..3 {
            t.data_mut()[c * h * w + p] = f64::from(data[3 * p + c]) / 255.0;
        }
    }
    Ok(t)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    bytes.extend_from_slice(labels.labels());
    write_bytes(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = read_bytes(path)?;
    let header = parse_pnm_header(path, &bytes, b"P5")?;
    let data = payload(path, &bytes, &header, 1)?;
    LabelMap::new(header.height, header.width, data.to_vec())
}

fn write_mask(path: &Path, mask: &PixelMask) -> Result<()> {
    let labels = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, &LabelMap::new(mask.height(), mask.width(), labels)?)
}

fn read_mask(path: &Path) -> Result<PixelMask> {
    let map = read_pgm(path)?;
    let bits = map
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &v)| match v {
            0 => Ok(false),
            255 => Ok(true),
            _ => Err(Error::format(path, p as u64, format!("mask value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<_>>()?;
    PixelMask::new(map.height(), map.width(), bits)
}

/// Write a `[1, 2, H, W]` flow as Middlebury `.flo`.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let (n, c, h, w) = flow.dims4()?;
    if n != 1 || c != 2 {
        return Err(Error::dim("write_flo", format!("expected [1,2,H,W], got {:?}", flow.shape())));
    }
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(FLO_MAGIC);
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for p in 0..h * w {
        bytes.extend_from_slice(&(flow.plane(0, 0)[p] as f32).to_le_bytes());
        bytes.extend_from_slice(&(flow.plane(0, 1)[p] as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 4 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(path, 0, "expected magic \"PIEH\""));
    }
    if bytes.len() < 12 {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    let int = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
    let (w, h) = (int(4), int(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, 4, format!("invalid extent {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {need} bytes"),
        ));
    }
    let mut flow = Tensor::zeros(&[1, 2, h, w]);
    for p in 0..h * w {
        for c in 0..2 {
            let o = 12 + 8 * p + 4 * c;
            let v = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("four bytes"));
            flow.plane_mut(0, c)[p] = f64::from(v);
        }
    }
    Ok(flow)
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

fn label_name(t: usize) -> String {
    format!("label_{t:03}.pgm")
}

fn flow_name(t: usize) -> String {
    format!("flow_{t:03}.flo")
}

fn mask_name(t: usize) -> String {
    format!("mask_{t:03}.pgm")
}

pub fn write_sequence(seq: &SceneSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut add = |name: String| {
        manifest.push_str(&name);
        manifest.push('\n');
        dir.join(name)
    };
    let mut jobs: Vec<(PathBuf, usize, u8)> = Vec::new();
    for t in 0..seq.len() {
        jobs.push((add(frame_name(t)), t, 0));
    }
    for t in 0..seq.len() {
        jobs.push((add(label_name(t)), t, 1));
    }
    for t in 0..seq.flows.len() {
        jobs.push((add(flow_name(t)), t, 2));
    }
    for t in 0..seq.disocclusions.len() {
        jobs.push((add(mask_name(t)), t, 3));
    }
    for (path, t, kind) in jobs {
        match kind {
            0 => write_ppm(&path, &seq.frames[t])?,
            1 => write_pgm(&path, &seq.labels[t])?,
            2 => write_flo(&path, &seq.flows[t])?,
            _ => write_mask(&path, &seq.disocclusions[t])?,
        }
    }
    write_bytes(&dir.join(SPEC_FILE), seq.spec.to_text().as_bytes())?;
    write_bytes(&dir.join(SEQUENCE_MANIFEST), manifest.as_bytes())
}

pub fn read_sequence(dir: &Path) -> Result<SceneSequence> {
    let manifest_path = dir.join(SEQUENCE_MANIFEST);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let spec_path = dir.join(SPEC_FILE);
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec = SceneSpec::from_text(&spec_text)?;

    let (mut frames, mut labels, mut flows, mut masks) = (vec![], vec![], vec![], vec![]);
    let mut offset = 0u64;
    for line in manifest.lines() {
        let name = line.trim();
        let path = dir.join(name);
        match Path::new(name).extension().and_then(|e| e.to_str()) {
            Some("ppm") => frames.push(read_ppm(&path)?),
            Some("flo") => flows.push(read_flo(&path)?),
            Some("pgm") if name.starts_with("label_") => labels.push(read_pgm(&path)?),
            Some("pgm") if name.starts_with("mask_") => masks.push(read_mask(&path)?),
            _ if name.is_empty() => {}
            _ => {
                return Err(Error::format(
                    &manifest_path,
                    offset,
                    format!("unrecognized manifest entry {name:?}"),
                ))
            }
        }
        offset += line.len() as u64 + 1;
    }
    let t = frames.len();
    if t < 2 || labels.len() != t || flows.len() != t - 1 || masks.len() != t - 1 {
        return Err(Error::format(
            &manifest_path,
            0,
            format!(
                "inconsistent sequence: {t} frames, {} labels, {} flows, {} masks",
                labels.len(),
                flows.len(),
                masks.len()
            ),
        ));
    }
    let (h, w) = (spec.height, spec.width);
    let frames_ok = frames.iter().all(|f| f.shape() == [3, h, w]);
    let labels_ok = labels.iter().all(|l| l.height() == h && l.width() == w);
    let flows_ok = flows.iter().all(|f| f.shape() == [1, 2, h, w]);
    let masks_ok = masks.iter().all(|m| m.height() == h && m.width() == w);
    if !(frames_ok && labels_ok && flows_ok && masks_ok) || spec.num_frames != t {
        return Err(Error::format(
            &spec_path,
            0,
            "file extents do not match the recorded scene spec",
        ));
    }
    Ok(SceneSequence {
        spec,
        frames,
        labels,
        flows,
        disocclusions: masks,
    })
}

/// Train and validation sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSequence>,
    pub val: Vec<SceneSequence>,
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = String::new();
    for (split, seqs) in [("train", &dataset.train), ("val", &dataset.val)] {
        for (k, seq) in seqs.iter().enumerate() {
            let rel = format!("{split}/seq_{k:04}");
            write_sequence(seq, &root.join(&rel))?;
            index.push_str(&rel);
            index.push('\n');
        }
    }
    write_bytes(&root.join(DATASET_MANIFEST), index.as_bytes())
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(DATASET_MANIFEST);
    let index = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut dataset = Dataset::default();
    let mut offset = 0u64;
    for line in index.lines() {
        let rel = line.trim();
        if !rel.is_empty() {
            let split = match rel.split('/').next() {
                Some("train") => &mut dataset.train,
                Some("val") => &mut dataset.val,
                _ => {
                    return Err(Error::format(
                        &path,
                        offset,
                        format!("entry {rel:?} is not under train/ or val/"),
                    ))
                }
            };
            split.push(read_sequence(&root.join(rel))?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(dataset)
}
