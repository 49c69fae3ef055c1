//! Image and annotation data model, file I/O, dataset manifests.
//!
//! Images are binary PGM (P5) or PPM (P6) with maxval 255; manifests are
//! CSV `image_id,path,split`; ground truth is JSON-lines. All writes go
//! through a temp file in the target directory followed by an atomic rename.

use std::collections::HashSet;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2-D pixel raster, 8-bit, grayscale (1 channel) or RGB (3 channels),
/// row-major with top-left origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Image> {
        if width < 1 || height < 1 {
            return Err(Error::invalid(format!(
                "image dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expect = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::invalid("image dimensions overflow"))?;
        if pixels.len() != expect {
            return Err(Error::invalid(format!(
                "pixel buffer has {} bytes, expected {expect}",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Constant-valued grayscale image.
    pub fn flat(width: usize, height: usize, value: u8) -> Image {
        Image::new(width, height, 1, vec![value; width * height]).expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Grayscale pixel accessor; callers guarantee single-channel data.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.pixels[y * self.width + x]
    }
}

/// Axis-aligned box: top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<BBox> {
        if w < 1 || h < 1 {
            return Err(Error::invalid(format!(
                "box size must be at least 1x1, got {w}x{h}"
            )));
        }
        if x as u64 + w as u64 > u32::MAX as u64 || y as u64 + h as u64 > u32::MAX as u64 {
            return Err(Error::invalid("box coordinates overflow u32"));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Exclusive right edge.
    pub fn x1(&self) -> u32 {
        self.x + self.w
    }

    /// Exclusive bottom edge.
    pub fn y1(&self) -> u32 {
        self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x1() as usize <= width && self.y1() as usize <= height
    }

    /// Smallest box covering both inputs.
    pub fn union_box(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let x1 = self.x1().max(other.x1());
        let y1 = self.y1().max(other.y1());
        BBox {
            x,
            y,
            w: x1 - x,
            h: y1 - y,
        }
    }

    /// Overlap area in pixels.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let ix = self.x.max(other.x);
        let iy = self.y.max(other.y);
        let ix1 = self.x1().min(other.x1());
        let iy1 = self.y1().min(other.y1());
        if ix1 <= ix || iy1 <= iy {
            return 0;
        }
        (ix1 - ix) as u64 * (iy1 - iy) as u64
    }

    /// Intersection over union; symmetric, in [0,1].
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// Class index: 0 is background, 1-5 are the defect classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u8);

pub const NUM_CLASSES: usize = 6;
pub const NUM_DEFECT_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "crack",
    "spallation",
    "exposed bar",
    "efflorescence",
    "corrosion stain",
];

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const CRACK: ClassId = ClassId(1);
    pub const SPALLATION: ClassId = ClassId(2);
    pub const EXPOSED_BAR: ClassId = ClassId(3);
    pub const EFFLORESCENCE: ClassId = ClassId(4);
    pub const CORROSION_STAIN: ClassId = ClassId(5);

    pub fn new(id: u8) -> Result<ClassId> {
        if id as usize >= NUM_CLASSES {
            return Err(Error::invalid(format!("class id {id} out of range 0-5")));
        }
        Ok(ClassId(id))
    }

    pub fn id(&self) -> u8 {
        self.0
    }

    pub fn name(&self) -> &'static str {
        CLASS_NAMES[self.0 as usize]
    }

    pub fn is_background(&self) -> bool {
        self.0 == 0
    }

    /// Index into per-defect-class arrays (background has none).
    pub fn defect_index(&self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 as usize - 1)
    }

    pub fn defect_classes() -> impl Iterator<Item = ClassId> {
        (1..NUM_CLASSES as u8).map(ClassId)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Annotated defect region; several classes can co-occur on one box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub bbox: BBox,
    /// Sorted, duplicate-free, never contains background.
    pub labels: Vec<ClassId>,
}

impl GroundTruthBox {
    pub fn new(image_id: String, bbox: BBox, mut labels: Vec<ClassId>) -> Result<GroundTruthBox> {
        if labels.is_empty() {
            return Err(Error::invalid("ground-truth labels must be non-empty"));
        }
        if labels.iter().any(|c| c.is_background()) {
            return Err(Error::invalid(
                "background (class 0) cannot label a ground-truth box",
            ));
        }
        labels.sort();
        let before = labels.len();
        labels.dedup();
        if labels.len() != before {
            return Err(Error::invalid("duplicate labels on a ground-truth box"));
        }
        Ok(GroundTruthBox {
            image_id,
            bbox,
            labels,
        })
    }

    pub fn has_class(&self, c: ClassId) -> bool {
        self.labels.contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub split: Split,
}

/// Ordered dataset listing; image ids are unique and paths were resolvable
/// when the manifest was loaded.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for e in &self.entries {
            match e.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    /// Recorded split ratios (train, val, test) as fractions of the total.
    pub fn split_ratios(&self) -> (f64, f64, f64) {
        let (tr, va, te) = self.split_counts();
        let n = self.entries.len().max(1) as f64;
        (tr as f64 / n, va as f64 / n, te as f64 / n)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let werr = |source: std::io::Error| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(werr)?;
    tmp.write_all(bytes).map_err(werr)?;
    tmp.persist(path).map_err(|e| werr(e.error))?;
    Ok(())
}

/// Byte-offset-aware reader for the netpbm header.
struct HeaderCursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderCursor<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments (comment runs to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.data.len() {
            let b = self.data[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("missing {what} in header")));
        }
        Ok(&self.data[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        let tok = self.token(what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| self.err(start.max(self.pos - tok.len()), format!("malformed {what}")))
    }
}

/// Load a binary PGM (P5) or PPM (P6) image with maxval 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let data = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cur = HeaderCursor {
        data: &data,
        pos: 0,
        path,
    };
    let magic = cur.token("magic number")?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(cur.err(0, "not a binary PGM (P5) or PPM (P6) file")),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    if width < 1 || height < 1 {
        return Err(cur.err(2, format!("bad dimensions {width}x{height}")));
    }
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(maxval_at, format!("unsupported maxval {maxval}, want 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= data.len() || !data[cur.pos].is_ascii_whitespace() {
        return Err(cur.err(cur.pos, "missing whitespace after maxval"));
    }
    cur.pos += 1;
    let expect = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.err(2, "dimensions overflow"))?;
    let payload = &data[cur.pos..];
    if payload.len() < expect {
        return Err(cur.err(
            data.len(),
            format!(
                "truncated payload: have {} bytes, need {expect}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expect {
        return Err(cur.err(cur.pos + expect, "trailing data after payload"));
    }
    Image::new(width, height, channels, payload.to_vec())
}

/// Save as P5 (grayscale) or P6 (RGB); `load_image` inverts this exactly.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    write_atomic(path, &bytes)
}

/// Collapse RGB to grayscale with BT.601 luma weights; grayscale inputs
/// pass through unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut pixels = Vec::with_capacity(img.width * img.height);
    for px in img.pixels.chunks_exact(3) {
        let v = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        pixels.push(v.round().clamp(0.0, 255.0) as u8);
    }
    Image::new(img.width, img.height, 1, pixels).expect("same dimensions")
}

/// Parse the `image_id,path,split` manifest. Relative paths resolve
/// against the manifest's directory; every path must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let rerr = |line: usize, msg: String| Error::Record {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "image_id,path,split")) => {}
        Some((_, other)) => {
            return Err(rerr(
                1,
                format!("bad header {other:?}, want \"image_id,path,split\""),
            ))
        }
        None => return Err(rerr(1, "empty manifest".into())),
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(rerr(
                lineno,
                format!("expected 3 comma-separated fields, got {}", fields.len()),
            ));
        }
        let (image_id, rel, split_tok) = (fields[0], fields[1], fields[2]);
        if image_id.is_empty() {
            return Err(rerr(lineno, "empty image_id".into()));
        }
        if !seen.insert(image_id.to_string()) {
            return Err(rerr(lineno, format!("duplicate image_id {image_id:?}")));
        }
        let split = Split::parse(split_tok)
            .ok_or_else(|| rerr(lineno, format!("unknown split token {split_tok:?}")))?;
        let p = Path::new(rel);
        let resolved = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        };
        if !resolved.exists() {
            return Err(rerr(
                lineno,
                format!("path {} does not exist", resolved.display()),
            ));
        }
        entries.push(ManifestEntry {
            image_id: image_id.to_string(),
            path: resolved,
            split,
        });
    }
    Ok(DatasetManifest { entries })
}

/// Write the manifest CSV. Paths under the manifest's own directory are
/// stored relative to it so the dataset stays relocatable.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = String::from("image_id,path,split\n");
    for e in &manifest.entries {
        let stored = e.path.strip_prefix(parent).unwrap_or(&e.path);
        out.push_str(&format!(
            "{},{},{}\n",
            e.image_id,
            stored.display(),
            e.split.as_str()
        ));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    image_id: String,
    bbox: [u32; 4],
    labels: Vec<u8>,
}

/// Load ground truth from JSON-lines: one
/// `{"image_id","bbox":[x,y,w,h],"labels":[ints]}` object per line.
pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let rerr = |line: usize, msg: String| Error::Record {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let rec: GtRecord =
            serde_json::from_str(line).map_err(|e| rerr(lineno, e.to_string()))?;
        let bbox = BBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3])
            .map_err(|e| rerr(lineno, e.to_string()))?;
        let mut labels = Vec::with_capacity(rec.labels.len());
        for raw in rec.labels {
            let c = ClassId::new(raw).map_err(|e| rerr(lineno, e.to_string()))?;
            labels.push(c);
        }
        boxes.push(
            GroundTruthBox::new(rec.image_id, bbox, labels)
                .map_err(|e| rerr(lineno, e.to_string()))?,
        );
    }
    Ok(boxes)
}

pub fn save_ground_truth(boxes: &[GroundTruthBox], path: &Path) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        let rec = GtRecord {
            image_id: b.image_id.clone(),
            bbox: [b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h],
            labels: b.labels.iter().map(|c| c.id()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
