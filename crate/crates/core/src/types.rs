//! Shared domain model: images, tag sets, prompts, detections, masks and
//! score maps.
//!
//! Every type with an invariant validates on construction, including when it
//! is deserialized, so a value that exists is a value that is valid.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::TypeError;

/// Which pool an image belongs to.
///
/// `Normal` images are defect-free references (MVTec `train/good`).
/// `Anomalous` marks the test pool, which may itself contain good images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ImageRefRaw")]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub category: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
    /// Known to be defect-free: ground truth is the all-zero mask.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mask_free: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRefRaw {
    id: String,
    path: PathBuf,
    width: u32,
    height: u32,
    category: String,
    split: Split,
    #[serde(default)]
    gt_mask_path: Option<PathBuf>,
    #[serde(default)]
    mask_free: bool,
}

impl TryFrom<ImageRefRaw> for ImageRef {
    type Error = TypeError;

    fn try_from(raw: ImageRefRaw) -> Result<Self, Self::Error> {
        let mut image = ImageRef::new(
            raw.id,
            raw.path,
            raw.width,
            raw.height,
            raw.category,
            raw.split,
        )?;
        image.gt_mask_path = raw.gt_mask_path;
        image.mask_free = raw.mask_free;
        if image.mask_free && image.gt_mask_path.is_some() {
            return Err(TypeError::Invalid(format!(
                "image {}: mask_free together with gt_mask_path",
                image.id
            )));
        }
        Ok(image)
    }
}

impl ImageRef {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<PathBuf>,
        width: u32,
        height: u32,
        category: impl Into<String>,
        split: Split,
    ) -> Result<Self, TypeError> {
        let id = id.into();
        if id.is_empty() {
            return Err(TypeError::Invalid("image id is empty".into()));
        }
        if width == 0 || height == 0 {
            return Err(TypeError::Invalid(format!(
                "image {id}: zero dimension {width}x{height}"
            )));
        }
        Ok(Self {
            id,
            path: path.into(),
            width,
            height,
            category: category.into(),
            split,
            gt_mask_path: None,
            mask_free: split == Split::Normal,
        })
    }

    pub fn with_gt_mask(mut self, path: impl Into<PathBuf>) -> Self {
        self.gt_mask_path = Some(path.into());
        self.mask_free = false;
        self
    }

    pub fn with_mask_free(mut self, mask_free: bool) -> Self {
        self.mask_free = mask_free;
        if mask_free {
            self.gt_mask_path = None;
        }
        self
    }

    /// True when a ground-truth mask is known, either from a file or because
    /// the image is flagged defect-free.
    pub fn has_ground_truth(&self) -> bool {
        self.mask_free || self.gt_mask_path.is_some()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Object tags harvested from normal images.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet {
    tags: Vec<String>,
}

impl TagSet {
    pub fn new(tags: Vec<String>) -> Result<Self, TypeError> {
        let mut seen = HashSet::with_capacity(tags.len());
        for tag in &tags {
            if tag.is_empty() {
                return Err(TypeError::Invalid("empty tag".into()));
            }
            if tag.trim() != tag || tag.to_lowercase() != *tag {
                return Err(TypeError::Invalid(format!(
                    "tag {tag:?} is not trimmed lowercase"
                )));
            }
            if !seen.insert(tag.as_str()) {
                return Err(TypeError::Invalid(format!("duplicate tag {tag:?}")));
            }
        }
        Ok(Self { tags })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

impl TryFrom<Vec<String>> for TagSet {
    type Error = TypeError;

    fn try_from(tags: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(tags)
    }
}

impl From<TagSet> for Vec<String> {
    fn from(set: TagSet) -> Self {
        set.tags
    }
}

/// Placeholder replaced by the object tags in a [`PromptTemplate`].
pub const TAGS_PLACEHOLDER: &str = "{tags}";

pub const DEFAULT_IAP_TEMPLATE: &str = "The image contains: {tags}. List short noun or adjective words describing visual defects or anomalies that could appear on these objects. Answer with a comma-separated list only.";

/// Instruction text sent to the language model, with one `{tags}` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        let count = text.matches(TAGS_PLACEHOLDER).count();
        if count != 1 {
            return Err(TypeError::MalformedTemplate(count));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_IAP_TEMPLATE.to_string(),
        }
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = TypeError;

    fn try_from(text: String) -> Result<Self, Self::Error> {
        Self::new(text)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.text
    }
}

pub fn default_fixed_prompts() -> Vec<String> {
    vec!["abnormal".to_string(), "defect".to_string()]
}

/// Language-model adjectives, fixed prompts and object tags, plus the
/// deduplicated detector prompt list built from them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PromptBundleRaw")]
pub struct PromptBundle {
    object_tags: TagSet,
    adjective_tags: Vec<String>,
    fixed_tags: Vec<String>,
    #[serde(rename = "final")]
    final_prompts: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptBundleRaw {
    object_tags: TagSet,
    adjective_tags: Vec<String>,
    fixed_tags: Vec<String>,
    #[serde(rename = "final")]
    final_prompts: Vec<String>,
}

impl TryFrom<PromptBundleRaw> for PromptBundle {
    type Error = TypeError;

    fn try_from(raw: PromptBundleRaw) -> Result<Self, Self::Error> {
        let bundle = PromptBundle::new(raw.adjective_tags, raw.fixed_tags, raw.object_tags)?;
        if bundle.final_prompts != raw.final_prompts {
            return Err(TypeError::Invalid(
                "prompt bundle `final` does not match its components".into(),
            ));
        }
        Ok(bundle)
    }
}

impl PromptBundle {
    /// Builds the bundle; `final` is the first-occurrence deduplication of
    /// adjectives, then fixed prompts, then object tags.
    pub fn new(
        adjective_tags: Vec<String>,
        fixed_tags: Vec<String>,
        object_tags: TagSet,
    ) -> Result<Self, TypeError> {
        if fixed_tags.is_empty() {
            return Err(TypeError::Invalid("fixed prompts must not be empty".into()));
        }
        if fixed_tags.iter().any(|t| t.trim().is_empty()) {
            return Err(TypeError::Invalid("fixed prompt is blank".into()));
        }
        let mut seen = HashSet::new();
        let final_prompts = adjective_tags
            .iter()
            .chain(fixed_tags.iter())
            .chain(object_tags.tags().iter())
            .filter(|t| seen.insert(t.as_str()))
            .cloned()
            .collect();
        Ok(Self {
            object_tags,
            adjective_tags,
            fixed_tags,
            final_prompts,
        })
    }

    pub fn object_tags(&self) -> &TagSet {
        &self.object_tags
    }

    pub fn adjective_tags(&self) -> &[String] {
        &self.adjective_tags
    }

    pub fn fixed_tags(&self) -> &[String] {
        &self.fixed_tags
    }

    pub fn final_prompts(&self) -> &[String] {
        &self.final_prompts
    }
}

/// Axis-aligned box in normalized image coordinates (y grows down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, TypeError> {
        for (name, v) in [("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TypeError::BoxField {
                    field: name,
                    value: v,
                });
            }
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(TypeError::Invalid(format!(
                "degenerate box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Pixel rectangle `[px0, px1) x [py0, py1)` covered by this box: a pixel
    /// is inside when its center lies inside the box.
    pub fn to_pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let w = f64::from(width);
        let h = f64::from(height);
        // first pixel index whose center is at or beyond `v`
        let edge = |v: f64, n: f64| ((v * n - 0.5).ceil().max(0.0) as u32).min(n as u32);
        (
            edge(self.x0, w),
            edge(self.y0, h),
            edge(self.x1, w),
            edge(self.y1, h),
        )
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = TypeError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionRaw")]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    score: f64,
    pub phrase: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRaw {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    score: f64,
    phrase: String,
}

impl TryFrom<DetectionRaw> for Detection {
    type Error = TypeError;

    fn try_from(raw: DetectionRaw) -> Result<Self, Self::Error> {
        Detection::new(raw.bbox, raw.score, raw.phrase)
    }
}

impl Detection {
    pub fn new(
        bbox: BoundingBox,
        score: f64,
        phrase: impl Into<String>,
    ) -> Result<Self, TypeError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(TypeError::Score(score));
        }
        Ok(Self {
            bbox,
            score,
            phrase: phrase.into(),
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, detections: Vec<Detection>) -> Self {
        Self {
            image_id: image_id.into(),
            detections,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Row-major packed bit mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Result<Self, TypeError> {
        if width == 0 || height == 0 {
            return Err(TypeError::Invalid(format!(
                "mask has zero dimension {width}x{height}"
            )));
        }
        let len = width as usize * height as usize;
        Ok(Self {
            width,
            height,
            words: vec![0; len.div_ceil(64)],
        })
    }

    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Result<Self, TypeError> {
        let mut mask = Self::zeros(width, height)?;
        if bits.len() != mask.len() {
            return Err(TypeError::Invalid(format!(
                "mask of {width}x{height} given {} bits",
                bits.len()
            )));
        }
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(mask)
    }

    /// Filled rectangle covering the pixels whose centers lie inside `bbox`.
    pub fn from_box(width: u32, height: u32, bbox: &BoundingBox) -> Result<Self, TypeError> {
        let mut mask = Self::zeros(width, height)?;
        let (px0, py0, px1, py1) = bbox.to_pixel_rect(width, height);
        for y in py0..py1 {
            for x in px0..px1 {
                mask.set(x, y, true);
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.get_index(y as usize * self.width as usize + x as usize)
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get_index(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub image_id: String,
    masks: Vec<BinaryMask>,
    source_detections: Vec<Detection>,
}

impl MaskSet {
    pub fn new(
        image_id: impl Into<String>,
        masks: Vec<BinaryMask>,
        source_detections: Vec<Detection>,
    ) -> Result<Self, TypeError> {
        if masks.len() != source_detections.len() {
            return Err(TypeError::Invalid(format!(
                "mask count mismatch: {} masks for {} detections",
                masks.len(),
                source_detections.len()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            masks,
            source_detections,
        })
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            masks: Vec::new(),
            source_detections: Vec::new(),
        }
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn source_detections(&self) -> &[Detection] {
        &self.source_detections
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BinaryMask, &Detection)> {
        self.masks.iter().zip(self.source_detections.iter())
    }
}

/// Per-pixel anomaly score in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl ScoreMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, TypeError> {
        if width == 0 || height == 0 {
            return Err(TypeError::Invalid(format!(
                "score map has zero dimension {width}x{height}"
            )));
        }
        if values.len() != width as usize * height as usize {
            return Err(TypeError::Invalid(format!(
                "score map of {width}x{height} given {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TypeError::Score(f64::from(*v)));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Result<Self, TypeError> {
        Self::new(width, height, vec![0.0; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Area fraction above which detections are treated as whole-object boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SizeThreshold(f64);

impl SizeThreshold {
    /// Sentinel used when size filtering is disabled.
    pub const DISABLED: SizeThreshold = SizeThreshold(1.0);

    pub fn new(value: f64) -> Result<Self, TypeError> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(TypeError::Invalid(format!(
                "size threshold {value} out of (0,1]"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SizeThreshold {
    type Error = TypeError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SizeThreshold> for f64 {
    fn from(t: SizeThreshold) -> Self {
        t.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_out_of_range_and_degenerate() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        let err = BoundingBox::new(0.0, 0.0, 1.2, 1.0).unwrap_err();
        assert!(err.to_string().contains("x1"), "{err}");
        assert!(BoundingBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.6, 1.0, 0.2).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0.0, 0.0, 1.0, 1.5]").is_err());
    }

    #[test]
    fn tag_set_rejects_bad_tags() {
        assert!(TagSet::new(vec!["metal part".into()]).is_ok());
        assert!(TagSet::new(vec!["Metal".into()]).is_err());
        assert!(TagSet::new(vec![" metal".into()]).is_err());
        assert!(TagSet::new(vec!["".into()]).is_err());
        assert!(TagSet::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn template_needs_exactly_one_placeholder() {
        assert!(PromptTemplate::new("x {tags} y").is_ok());
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{tags} and {tags}").is_err());
        assert!(PromptTemplate::default().text().contains(TAGS_PLACEHOLDER));
    }

    #[test]
    fn bundle_roundtrip_checks_final() {
        let tags = TagSet::new(vec!["carpet".into()]).unwrap();
        let b = PromptBundle::new(vec!["rip".into()], default_fixed_prompts(), tags).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: PromptBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
        let tampered = json.replace("\"final\":[\"rip\"", "\"final\":[\"tear\"");
        assert!(serde_json::from_str::<PromptBundle>(&tampered).is_err());
    }

    #[test]
    fn mask_bits() {
        let mut m = BinaryMask::zeros(10, 7).unwrap();
        m.set(9, 6, true);
        m.set(0, 0, true);
        assert!(m.get(9, 6) && m.get(0, 0) && !m.get(1, 0));
        assert_eq!(m.count_ones(), 2);
        m.set(0, 0, false);
        assert_eq!(m.count_ones(), 1);
        assert!(BinaryMask::zeros(0, 3).is_err());
    }

    #[test]
    fn box_rasterizes_by_pixel_center() {
        let b = BoundingBox::new(0.25, 0.0, 0.75, 0.5).unwrap();
        let m = BinaryMask::from_box(8, 8, &b).unwrap();
        assert_eq!(m.count_ones(), 4 * 4);
        assert!(m.get(2, 0) && m.get(5, 3) && !m.get(6, 3) && !m.get(2, 4));
    }

    #[test]
    fn score_map_bounds() {
        assert!(ScoreMap::new(2, 1, vec![0.0, 1.0]).is_ok());
        assert!(ScoreMap::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(ScoreMap::new(2, 1, vec![0.0]).is_err());
        assert!(ScoreMap::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn image_ref_validation() {
        assert!(ImageRef::new("a", "a.png", 0, 4, "c", Split::Normal).is_err());
        let img = ImageRef::new("a", "a.png", 4, 4, "c", Split::Anomalous).unwrap();
        assert!(!img.has_ground_truth());
        assert!(img.clone().with_gt_mask("m.png").has_ground_truth());
        let json = r#"{"id":"a","path":"a.png","width":4,"height":4,"category":"c","split":"normal","colour":1}"#;
        assert!(serde_json::from_str::<ImageRef>(json).is_err());
    }

    #[test]
    fn detection_score_range() {
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert!(Detection::new(b, 1.0, "x").is_ok());
        assert!(Detection::new(b, -0.1, "x").is_err());
        assert!(Detection::new(b, f64::NAN, "x").is_err());
    }
}
