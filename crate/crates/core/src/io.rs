//! On-disk formats: PNG images, masks, part maps and attention maps, the
//! dataset directory layout, and run directories.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::datagen::{display_render, EditTask, GarmentSpec, TaskType, TrainingTriple, NUM_PARTS};
use crate::error::{Error, Result};
use crate::masknet::{EditMask, MaskInput};
use crate::prompt::{PromptEncoder, PromptText};
use crate::tensor::{Grid, LatentImage};

/// RGB colours of the part palette: background then parts 1..=6.
const PART_PALETTE: [[u8; 3]; NUM_PARTS + 1] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(f));
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Writes a 3-channel image in `[-1, 1]` as 8-bit RGB.
pub fn write_image(path: &Path, img: &LatentImage) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::param("only 3-channel images can be written as RGB"));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    write_png(
        path,
        w,
        h,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        None,
        &data,
    )
}

/// Reads an 8-bit RGB or RGBA PNG into `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<LatentImage> {
    let d = read_png(path)?;
    if d.depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit samples"));
    }
    let stride = match d.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    let n = d.width * d.height;
    let mut out = vec![0.0; 3 * n];
    for s in 0..n {
        for c in 0..3 {
            out[c * n + s] = d.data[s * stride + c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    LatentImage::from_vec(3, d.height, d.width, out)
}

/// Writes a mask as 8-bit grayscale, 0 → black and 1 → white.
pub fn write_mask(path: &Path, m: &EditMask) -> Result<()> {
    let (h, w) = m.dims();
    let data: Vec<u8> = m
        .as_slice()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    write_png(
        path,
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        None,
        &data,
    )
}

/// Reads a grayscale mask; values ≥ 128 become 1.
pub fn read_mask(path: &Path) -> Result<EditMask> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected an 8-bit grayscale mask"));
    }
    let g = Grid::from_vec(
        d.height,
        d.width,
        d.data.iter().map(|&b| (b >= 128) as u8 as f64).collect(),
    )?;
    Ok(EditMask::binary(g))
}

/// Writes part labels as an indexed-palette PNG.
pub fn write_parts(path: &Path, parts: &[u8], height: usize, width: usize) -> Result<()> {
    if parts.len() != height * width || parts.iter().any(|p| *p as usize > NUM_PARTS) {
        return Err(Error::param("part map does not match its size or palette"));
    }
    let palette = PART_PALETTE.iter().flatten().copied().collect();
    write_png(
        path,
        width,
        height,
        png::ColorType::Indexed,
        png::BitDepth::Eight,
        Some(palette),
        parts,
    )
}

pub fn read_parts(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    // Keep palette indices rather than expanding them to RGB.
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected an 8-bit indexed part map"));
    }
    buf.truncate(info.buffer_size());
    if buf.iter().any(|p| *p as usize > NUM_PARTS) {
        return Err(png_err(path, "part index outside the palette"));
    }
    Ok((buf, info.height as usize, info.width as usize))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub max: f64,
    /// Row-major full-precision values.
    pub values: Vec<f64>,
}

/// Writes an attention map as 16-bit grayscale scaled to its own
/// `[min, max]`, plus a JSON sidecar with the range.
pub fn write_attention(
    png_path: &Path,
    json_path: &Path,
    a: &AttentionMap,
) -> Result<AttentionMeta> {
    let (h, w) = a.dims();
    let vals = a.grid().as_slice();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut data = Vec::with_capacity(2 * h * w);
    for v in vals {
        let q = (((v - min) / span) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    write_png(
        png_path,
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        None,
        &data,
    )?;
    let meta = AttentionMeta {
        height: h,
        width: w,
        min,
        max,
        values: vals.to_vec(),
    };
    write_json(json_path, &meta)?;
    Ok(meta)
}

/// Reads the exact map back from the JSON sidecar.
pub fn read_attention(json_path: &Path) -> Result<AttentionMap> {
    let meta: AttentionMeta = read_json(json_path)?;
    let g = Grid::from_vec(meta.height, meta.width, meta.values)
        .map_err(|e| Error::format(format!("{}: {e}", json_path.display())))?;
    AttentionMap::new(g).map_err(|e| Error::format(format!("{}: {e}", json_path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One line of `meta.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub spec: GarmentSpec,
    pub jitter: i32,
    pub task_type: TaskType,
    pub target_prompt: String,
    pub target_spec: GarmentSpec,
}

pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join("meta.jsonl")
    }

    pub fn image(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn parts(&self, id: &str) -> PathBuf {
        self.root.join("parts").join(format!("{id}.png"))
    }
}

/// Writes the training triples and evaluation tasks. `masks/` holds the
/// editing region each example asks for.
pub fn write_dataset(root: &Path, train: &[TrainingTriple], tasks: &[EditTask]) -> Result<()> {
    let layout = DatasetLayout::new(root);
    for sub in ["images", "masks", "parts"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut meta = create(&layout.meta())?;
    let mut emit = |rec: &MetaRecord| -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::format(e.to_string()))?;
        writeln!(meta, "{line}").map_err(|e| Error::io(layout.meta(), e))
    };
    for (i, t) in train.iter().enumerate() {
        let id = format!("train-{i:05}");
        let sample = crate::datagen::render_jittered(&t.source, t.jitter)?;
        write_image(&layout.image(&id), &sample.image)?;
        write_mask(&layout.mask(&id), &t.target)?;
        write_parts(
            &layout.parts(&id),
            &sample.parts,
            sample.foreground.height(),
            sample.foreground.width(),
        )?;
        emit(&MetaRecord {
            id,
            split: Split::Train,
            caption: sample.caption.raw().to_string(),
            spec: t.source,
            jitter: t.jitter,
            task_type: t.task_type,
            target_prompt: t.prompt.raw().to_string(),
            target_spec: crate::datagen::parse_caption(t.prompt.raw())?,
        })?;
    }
    for t in tasks {
        let s = &t.input;
        write_image(&layout.image(&t.id), &s.image)?;
        write_mask(&layout.mask(&t.id), &t.truth.region)?;
        write_parts(
            &layout.parts(&t.id),
            &s.parts,
            s.foreground.height(),
            s.foreground.width(),
        )?;
        emit(&MetaRecord {
            id: t.id.clone(),
            split: Split::Eval,
            caption: s.caption.raw().to_string(),
            spec: s.spec,
            jitter: s.jitter,
            task_type: t.task_type,
            target_prompt: t.target_prompt.raw().to_string(),
            target_spec: t.truth.spec,
        })?;
    }
    meta.flush().map_err(|e| Error::io(layout.meta(), e))
}

pub fn read_meta(root: &Path) -> Result<Vec<MetaRecord>> {
    let path = DatasetLayout::new(root).meta();
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// MaskNet examples of one split, read from the part maps and masks on disk.
pub fn load_mask_examples(
    root: &Path,
    split: Split,
    enc: &PromptEncoder,
) -> Result<Vec<(MaskInput, EditMask)>> {
    let layout = DatasetLayout::new(root);
    read_meta(root)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let (parts, h, w) = read_parts(&layout.parts(&r.id))?;
            let mask = read_mask(&layout.mask(&r.id))?;
            if mask.dims() != (h, w) {
                return Err(Error::format(format!(
                    "{}: mask and part map sizes differ",
                    r.id
                )));
            }
            let fg = Grid::from_vec(h, w, parts.iter().map(|p| (*p > 0) as u8 as f64).collect())?;
            let prompt = PromptText::new(&r.target_prompt);
            Ok((
                MaskInput::new(fg, parts, enc.mask_embedding(&prompt))?,
                mask,
            ))
        })
        .collect()
}

/// Evaluation tasks rebuilt from their recorded specs.
pub fn load_tasks(root: &Path) -> Result<Vec<EditTask>> {
    let mut tasks: Vec<EditTask> = read_meta(root)?
        .into_iter()
        .filter(|r| r.split == Split::Eval)
        .map(|r| EditTask::new(r.id, r.task_type, r.spec, r.target_spec, r.jitter))
        .collect::<Result<_>>()?;
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(tasks)
}

fn mask_as_image(m: &EditMask) -> LatentImage {
    let (h, w) = m.dims();
    let plane: Vec<f64> = m.as_slice().iter().map(|v| v * 2.0 - 1.0).collect();
    LatentImage::from_vec(
        3,
        h,
        w,
        plane.iter().chain(&plane).chain(&plane).copied().collect(),
    )
    .expect("finite")
}

/// Tile for [`write_contact_sheet`].
pub enum Tile<'a> {
    Image(&'a LatentImage),
    Mask(&'a EditMask),
}

/// Writes a grid of display-scaled tiles, one row per entry of `rows`,
/// separated by a one-pixel gap.
pub fn write_contact_sheet(path: &Path, rows: &[Vec<Tile>]) -> Result<()> {
    let tiles: Vec<Vec<LatentImage>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|t| match t {
                    Tile::Image(i) => display_render(i),
                    Tile::Mask(m) => display_render(&mask_as_image(m)),
                })
                .collect()
        })
        .collect();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let (th, tw) = tiles
        .iter()
        .flatten()
        .next()
        .map(|t| (t.height(), t.width()))
        .ok_or_else(|| Error::param("contact sheet needs at least one tile"))?;
    let gap = 1;
    let (h, w) = (tiles.len() * (th + gap), cols * (tw + gap));
    let mut sheet = LatentImage::filled(3, h, w, 1.0);
    for (r, row) in tiles.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            if (t.height(), t.width()) != (th, tw) {
                return Err(Error::param("contact sheet tiles must share a size"));
            }
            for ch in 0..3 {
                for y in 0..th {
                    for x in 0..tw {
                        sheet.set(ch, r * (th + gap) + y, c * (tw + gap) + x, t.get(ch, y, x));
                    }
                }
            }
        }
    }
    write_image(path, &sheet)
}
