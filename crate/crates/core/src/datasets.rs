//! Dataset ingestion and file codecs.
//!
//! MVTec-AD style trees are scanned directly. Any other dataset is described
//! by a [`DatasetManifest`] JSON document. Score maps are stored in the
//! `.iaps` format:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IAPS"
//! 4       2     version, u16 LE (= 1)
//! 6       4     width, u32 LE
//! 10      4     height, u32 LE
//! 14      4*w*h values, IEEE-754 binary32 LE, row-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::types::{BinaryMask, ImageRef, ScoreMap, Split};

pub const IAPS_MAGIC: &[u8; 4] = b"IAPS";
pub const IAPS_VERSION: u16 = 1;
const IAPS_HEADER: usize = 14;
/// Largest accepted score map, in pixels.
pub const MAX_PIXELS: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    pub images: Vec<ImageRef>,
}

impl Category {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRef> {
        self.images.iter().filter(move |i| i.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    /// When false the test images carry no ground truth and evaluation is
    /// skipped.
    #[serde(default = "yes")]
    pub labels: bool,
    pub categories: Vec<Category>,
}

fn yes() -> bool {
    true
}

impl DatasetManifest {
    pub fn category(&self, name: &str) -> Result<&Category, DatasetError> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| DatasetError::UnknownCategory(name.to_string()))
    }

    /// Checks id uniqueness and ground-truth availability.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = HashSet::new();
        for cat in &self.categories {
            for img in &cat.images {
                if !ids.insert(img.id.as_str()) {
                    return Err(DatasetError::DuplicateId(img.id.clone()));
                }
                if let Some(gt) = &img.gt_mask_path {
                    if !gt.is_file() {
                        return Err(DatasetError::MissingMask {
                            image: img.path.clone(),
                            expected: gt.clone(),
                        });
                    }
                } else if self.labels && img.split == Split::Anomalous && !img.mask_free {
                    return Err(DatasetError::Manifest(format!(
                        "test image {} has neither gt_mask_path nor mask_free",
                        img.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads a manifest document. Relative image and mask paths resolve
    /// against `root`, which itself resolves against the document's directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.root = base.join(&manifest.root);
        for cat in &mut manifest.categories {
            for img in &mut cat.images {
                img.path = manifest.root.join(&img.path);
                if let Some(gt) = &img.gt_mask_path {
                    img.gt_mask_path = Some(manifest.root.join(gt));
                }
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sorted entries of `dir` matching `pred`. Missing directories yield nothing.
fn sorted_entries(dir: &Path, pred: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>, DatasetError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if pred(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

fn image_ref(
    path: &Path,
    id: String,
    category: &str,
    split: Split,
) -> Result<ImageRef, DatasetError> {
    let (width, height) = image::image_dimensions(path).map_err(|e| DatasetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(ImageRef::new(id, path, width, height, category, split)?)
}

/// Scans an MVTec-AD style directory tree.
///
/// Normal images come from `<cat>/train/good`. Every `<cat>/test/<defect>`
/// image joins the test pool; `good` test images get all-zero ground truth,
/// the rest need `<cat>/ground_truth/<defect>/<stem>_mask.png`.
pub fn scan_mvtec_layout(root: &Path) -> Result<DatasetManifest, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let cat_dirs = sorted_entries(root, |p| {
        p.is_dir() && (p.join("train").is_dir() || p.join("test").is_dir())
    })?;
    if cat_dirs.is_empty() {
        return Err(DatasetError::NoCategories(root.to_path_buf()));
    }
    let mut categories = Vec::new();
    for cat_dir in cat_dirs {
        let cat = file_name(&cat_dir);
        let mut images = Vec::new();
        for path in sorted_entries(&cat_dir.join("train").join("good"), is_png)? {
            let id = format!("{cat}/train/good/{}", file_stem(&path));
            images.push(image_ref(&path, id, &cat, Split::Normal)?);
        }
        for defect_dir in sorted_entries(&cat_dir.join("test"), Path::is_dir)? {
            let defect = file_name(&defect_dir);
            for path in sorted_entries(&defect_dir, is_png)? {
                let stem = file_stem(&path);
                let id = format!("{cat}/test/{defect}/{stem}");
                let img = image_ref(&path, id, &cat, Split::Anomalous)?;
                if defect == "good" {
                    images.push(img.with_mask_free(true));
                    continue;
                }
                let mask = cat_dir
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                if !mask.is_file() {
                    return Err(DatasetError::MissingMask {
                        image: path,
                        expected: mask,
                    });
                }
                images.push(img.with_gt_mask(mask));
            }
        }
        categories.push(Category { name: cat, images });
    }
    let manifest = DatasetManifest {
        name: file_name(root),
        root: root.to_path_buf(),
        labels: true,
        categories,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Loads either an MVTec-style directory or a manifest JSON file.
pub fn open_dataset(path: &Path) -> Result<DatasetManifest, DatasetError> {
    if path.is_file() {
        DatasetManifest::load(path)
    } else {
        scan_mvtec_layout(path)
    }
}

/// Decodes a PNG; a pixel is foreground when any channel is nonzero.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask, String> {
    let img =
        image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    mask_from_image(&img)
}

fn mask_from_image(img: &DynamicImage) -> Result<BinaryMask, String> {
    let (width, height) = (img.width(), img.height());
    let mut mask = BinaryMask::zeros(width, height).map_err(|e| e.to_string())?;
    let raw = img.as_bytes();
    let stride = raw.len() / (width as usize * height as usize);
    for (i, px) in raw.chunks_exact(stride).enumerate() {
        if px.iter().any(|&b| b != 0) {
            let i = i as u32;
            mask.set(i % width, i / width, true);
        }
    }
    Ok(mask)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, DatasetError> {
    let img = image::open(path).map_err(|e| DatasetError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    mask_from_image(&img).map_err(|reason| DatasetError::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// 8-bit single-channel PNG, foreground = 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let img = GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([if mask.get(x, y) { 255 } else { 0 }])
    });
    encode_png(img)
}

fn encode_png(img: GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img)
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// 8-bit grayscale rendering of a score map (`round(255 * v)`).
pub fn render_score_png(map: &ScoreMap) -> Vec<u8> {
    let img = GrayImage::from_fn(map.width(), map.height(), |x, y| {
        Luma([(map.get(x, y) * 255.0).round() as u8])
    });
    encode_png(img)
}

pub fn encode_score_map(map: &ScoreMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(IAPS_HEADER + 4 * map.values().len());
    out.extend_from_slice(IAPS_MAGIC);
    out.extend_from_slice(&IAPS_VERSION.to_le_bytes());
    out.extend_from_slice(&map.width().to_le_bytes());
    out.extend_from_slice(&map.height().to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_score_map(bytes: &[u8]) -> Result<ScoreMap, DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != IAPS_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    if bytes.len() < IAPS_HEADER {
        return Err(DatasetError::Truncated {
            expected: IAPS_HEADER,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != IAPS_VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let (width, height) = (u32_at(6), u32_at(10));
    let pixels = u64::from(width) * u64::from(height);
    if width == 0 || height == 0 || pixels > MAX_PIXELS {
        return Err(DatasetError::DimensionOverflow { width, height });
    }
    let expected = IAPS_HEADER + 4 * pixels as usize;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::Manifest(format!(
            "{} trailing bytes after IAPS payload",
            bytes.len() - expected
        )));
    }
    let values = bytes[IAPS_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ScoreMap::new(width, height, values)?)
}

pub fn write_score_map(map: &ScoreMap, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, &encode_score_map(map))
}

pub fn read_score_map(path: &Path) -> Result<ScoreMap, DatasetError> {
    decode_score_map(&fs::read(path).map_err(io_err(path))?)
}

/// Writes via a temporary sibling file and a rename, creating parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
