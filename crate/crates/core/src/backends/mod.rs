//! The model-inference boundary.
//!
//! [`Backend`] exposes the four model calls the pipeline needs. It builds a
//! [`WireRequest`], hands it to a [`Transport`] (live HTTP, replay store, or a
//! recorder wrapping either) and validates the raw JSON response before any
//! domain value is constructed from it.
//!
//! Requests are keyed by [`BackendRequestKey`]: the SHA-256 of a canonical
//! encoding. Fields are joined with the record separator `0x1E`; list items
//! inside a field with the unit separator `0x1F`; boxes inside the segment
//! field with the group separator `0x1D`. Images enter as the hex SHA-256 of
//! their file bytes and reals as `{:.6}`.
//!
//! ```text
//! tag      : "tag"      RS sha256(image)
//! generate : "generate" RS prompt RS max_tokens
//! detect   : "detect"   RS sha256(image) RS prompts(US) RS box_thr US text_thr
//! segment  : "segment"  RS sha256(image) RS [x0 US y0 US x1 US y1](GS)
//! ```

mod remote;
mod replay;
pub mod wire;

use std::borrow::Cow;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::{Digest, Sha256};

pub use remote::{RemoteTransport, DEFAULT_MAX_IN_FLIGHT};
pub use replay::{fixture_tree_digest, RecordingTransport, ReplayTransport};

use crate::datasets::decode_mask_png;
use crate::error::BackendError;
use crate::types::{BoundingBox, Detection, DetectionSet, ImageRef, MaskSet};
use wire::*;

/// Completion budget sent with every generate call.
pub const GENERATE_MAX_TOKENS: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Tag,
    Generate,
    Detect,
    Segment,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Tag,
        Method::Generate,
        Method::Detect,
        Method::Segment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tag => "tag",
            Method::Generate => "generate",
            Method::Detect => "detect",
            Method::Segment => "segment",
        }
    }

    pub fn path(&self) -> &'static str {
        match self {
            Method::Tag => TAG_PATH,
            Method::Generate => GENERATE_PATH,
            Method::Detect => DETECT_PATH,
            Method::Segment => SEGMENT_PATH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackendRequestKey {
    pub method: Method,
    pub digest: String,
}

impl fmt::Display for BackendRequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.method.as_str(), self.digest)
    }
}

/// Image file contents plus their hash.
#[derive(Debug, Clone)]
pub struct ImagePayload {
    pub path: PathBuf,
    bytes: Arc<Vec<u8>>,
    sha256: String,
}

impl ImagePayload {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = std::fs::read(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(path, bytes))
    }

    pub fn from_bytes(path: &Path, bytes: Vec<u8>) -> Self {
        let sha256 = hex::encode(Sha256::digest(&bytes));
        Self {
            path: path.to_path_buf(),
            bytes: Arc::new(bytes),
            sha256,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    /// PNG bytes for the wire; non-PNG files are decoded and re-encoded.
    pub fn png_bytes(&self) -> Result<Cow<'_, [u8]>, BackendError> {
        const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
        if self.bytes.starts_with(PNG_SIGNATURE) {
            return Ok(Cow::Borrowed(&self.bytes));
        }
        let decode_err = |e: image::ImageError| BackendError::ImageDecode {
            path: self.path.clone(),
            reason: e.to_string(),
        };
        let img = image::load_from_memory(&self.bytes).map_err(decode_err)?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(decode_err)?;
        Ok(Cow::Owned(out.into_inner()))
    }

    pub fn png_b64(&self) -> Result<String, BackendError> {
        Ok(B64.encode(self.png_bytes()?))
    }
}

#[derive(Debug, Clone)]
pub enum WireRequest {
    Tag {
        image: ImagePayload,
    },
    Generate {
        prompt: String,
        max_tokens: u32,
    },
    Detect {
        image: ImagePayload,
        prompts: Vec<String>,
        box_threshold: f64,
        text_threshold: f64,
    },
    Segment {
        image: ImagePayload,
        boxes: Vec<[f64; 4]>,
    },
}

const RS: char = '\u{1e}';
const US: char = '\u{1f}';
const GS: char = '\u{1d}';

fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}

impl WireRequest {
    pub fn method(&self) -> Method {
        match self {
            WireRequest::Tag { .. } => Method::Tag,
            WireRequest::Generate { .. } => Method::Generate,
            WireRequest::Detect { .. } => Method::Detect,
            WireRequest::Segment { .. } => Method::Segment,
        }
    }

    /// Canonical byte encoding hashed into the request key.
    pub fn canonical_encoding(&self) -> String {
        let mut fields: Vec<String> = vec![self.method().as_str().to_string()];
        match self {
            WireRequest::Tag { image } => fields.push(image.sha256().to_string()),
            WireRequest::Generate { prompt, max_tokens } => {
                fields.push(prompt.clone());
                fields.push(max_tokens.to_string());
            }
            WireRequest::Detect {
                image,
                prompts,
                box_threshold,
                text_threshold,
            } => {
                fields.push(image.sha256().to_string());
                fields.push(prompts.join(&US.to_string()));
                fields.push(format!(
                    "{}{US}{}",
                    fixed6(*box_threshold),
                    fixed6(*text_threshold)
                ));
            }
            WireRequest::Segment { image, boxes } => {
                fields.push(image.sha256().to_string());
                let boxes: Vec<String> = boxes
                    .iter()
                    .map(|b| {
                        b.iter()
                            .map(|&v| fixed6(v))
                            .collect::<Vec<_>>()
                            .join(&US.to_string())
                    })
                    .collect();
                fields.push(boxes.join(&GS.to_string()));
            }
        }
        fields.join(&RS.to_string())
    }

    pub fn key(&self) -> BackendRequestKey {
        BackendRequestKey {
            method: self.method(),
            digest: hex::encode(Sha256::digest(self.canonical_encoding().as_bytes())),
        }
    }

    /// JSON body for the HTTP endpoint.
    pub fn to_json(&self) -> Result<Vec<u8>, BackendError> {
        let body = match self {
            WireRequest::Tag { image } => serde_json::to_vec(&TagRequest {
                image_png_b64: image.png_b64()?,
            }),
            WireRequest::Generate { prompt, max_tokens } => serde_json::to_vec(&GenerateRequest {
                prompt: prompt.clone(),
                max_tokens: *max_tokens,
            }),
            WireRequest::Detect {
                image,
                prompts,
                box_threshold,
                text_threshold,
            } => serde_json::to_vec(&DetectRequest {
                image_png_b64: image.png_b64()?,
                prompts: prompts.clone(),
                box_threshold: *box_threshold,
                text_threshold: *text_threshold,
            }),
            WireRequest::Segment { image, boxes } => serde_json::to_vec(&SegmentRequest {
                image_png_b64: image.png_b64()?,
                boxes: boxes.clone(),
            }),
        };
        Ok(body.expect("request bodies serialize"))
    }
}

/// Carries one request to a model and returns the raw JSON response body.
pub trait Transport: Send + Sync {
    /// Stable description for run manifests (URL or fixture digest).
    fn identity(&self) -> String;

    fn call(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError>;
}

/// Typed, validated model calls over a [`Transport`].
pub struct Backend {
    transport: Box<dyn Transport>,
    calls: AtomicUsize,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend")
            .field("identity", &self.transport.identity())
            .field("calls", &self.calls())
            .finish()
    }
}

fn parse<T: serde::de::DeserializeOwned>(method: Method, body: &[u8]) -> Result<T, BackendError> {
    serde_json::from_slice(body)
        .map_err(|e| BackendError::Schema(format!("{} response: {e}", method.as_str())))
}

impl Backend {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Self::from_boxed(Box::new(transport))
    }

    pub fn from_boxed(transport: Box<dyn Transport>) -> Self {
        Self {
            transport,
            calls: AtomicUsize::new(0),
        }
    }

    /// Opens a replay store directory.
    pub fn replay(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        Ok(Self::new(ReplayTransport::open(dir)?))
    }

    pub fn remote(base_url: &str) -> Self {
        Self::new(RemoteTransport::new(base_url))
    }

    pub fn identity(&self) -> String {
        self.transport.identity()
    }

    /// Number of requests sent to the transport so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn send(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.transport.call(request)
    }

    /// Raw (pre-hygiene) tags for an image.
    pub fn tag_image(&self, image: &ImageRef) -> Result<Vec<String>, BackendError> {
        let request = WireRequest::Tag {
            image: ImagePayload::load(&image.path)?,
        };
        let resp: TagResponse = parse(Method::Tag, &self.send(&request)?)?;
        Ok(resp.tags)
    }

    pub fn generate_text(&self, prompt: &str) -> Result<String, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        let request = WireRequest::Generate {
            prompt: prompt.to_string(),
            max_tokens: GENERATE_MAX_TOKENS,
        };
        let resp: GenerateResponse = parse(Method::Generate, &self.send(&request)?)?;
        Ok(resp.text)
    }

    pub fn detect_regions(
        &self,
        image: &ImageRef,
        prompts: &[String],
        box_threshold: f64,
        text_threshold: f64,
    ) -> Result<DetectionSet, BackendError> {
        if prompts.is_empty() {
            return Err(BackendError::Precondition(
                "prompts must not be empty".into(),
            ));
        }
        for (name, t) in [
            ("box_threshold", box_threshold),
            ("text_threshold", text_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(BackendError::Precondition(format!(
                    "{name} {t} out of (0,1]"
                )));
            }
        }
        let request = WireRequest::Detect {
            image: ImagePayload::load(&image.path)?,
            prompts: prompts.to_vec(),
            box_threshold,
            text_threshold,
        };
        let resp: DetectResponse = parse(Method::Detect, &self.send(&request)?)?;
        let detections = resp
            .detections
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let bbox = BoundingBox::try_from(d.bbox)
                    .map_err(|e| BackendError::Schema(format!("detections[{i}].box: {e}")))?;
                Detection::new(bbox, d.score, d.phrase)
                    .map_err(|e| BackendError::Schema(format!("detections[{i}].score: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DetectionSet::new(image.id.clone(), detections))
    }

    /// One mask per detection box, aligned by index. An empty input returns
    /// an empty set without contacting the transport.
    pub fn segment_regions(
        &self,
        image: &ImageRef,
        detections: &[Detection],
    ) -> Result<MaskSet, BackendError> {
        if detections.is_empty() {
            return Ok(MaskSet::empty(image.id.clone()));
        }
        let request = WireRequest::Segment {
            image: ImagePayload::load(&image.path)?,
            boxes: detections.iter().map(|d| d.bbox.to_array()).collect(),
        };
        let resp: SegmentResponse = parse(Method::Segment, &self.send(&request)?)?;
        if resp.masks.len() != detections.len() {
            return Err(BackendError::Schema(format!(
                "mask count mismatch: {} masks for {} boxes",
                resp.masks.len(),
                detections.len()
            )));
        }
        let masks = resp
            .masks
            .iter()
            .enumerate()
            .map(|(i, encoded)| {
                let png = B64
                    .decode(encoded)
                    .map_err(|e| BackendError::Schema(format!("masks[{i}]: base64: {e}")))?;
                let mask = decode_mask_png(&png)
                    .map_err(|e| BackendError::Schema(format!("masks[{i}]: png: {e}")))?;
                if (mask.width(), mask.height()) != (image.width, image.height) {
                    return Err(BackendError::Schema(format!(
                        "masks[{i}]: dimensions {}x{} differ from image {}x{}",
                        mask.width(),
                        mask.height(),
                        image.width,
                        image.height
                    )));
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>, _>>()?;
        MaskSet::new(image.id.clone(), masks, detections.to_vec())
            .map_err(|e| BackendError::Schema(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(bytes: &[u8]) -> ImagePayload {
        ImagePayload::from_bytes(Path::new("x.png"), bytes.to_vec())
    }

    #[test]
    fn keys_depend_on_content_not_path() {
        let a = WireRequest::Tag {
            image: ImagePayload::from_bytes(Path::new("a.png"), b"same".to_vec()),
        };
        let b = WireRequest::Tag {
            image: ImagePayload::from_bytes(Path::new("elsewhere/b.png"), b"same".to_vec()),
        };
        assert_eq!(a.key(), b.key());
        assert_ne!(
            a.key(),
            WireRequest::Tag {
                image: payload(b"other")
            }
            .key()
        );
    }

    #[test]
    fn threshold_formatting_absorbs_float_noise() {
        let req = |t: f64| WireRequest::Detect {
            image: payload(b"img"),
            prompts: vec!["defect".into()],
            box_threshold: t,
            text_threshold: 0.2,
        };
        assert_eq!(req(0.2).key(), req(0.1 + 0.1).key());
        assert_ne!(req(0.2).key(), req(0.3).key());
    }

    #[test]
    fn prompt_boundaries_are_unambiguous() {
        let req = |p: &[&str]| WireRequest::Detect {
            image: payload(b"img"),
            prompts: p.iter().map(|s| s.to_string()).collect(),
            box_threshold: 0.2,
            text_threshold: 0.2,
        };
        assert_ne!(req(&["a b", "c"]).key(), req(&["a", "b c"]).key());
        assert_ne!(req(&["a", "b"]).key(), req(&["b", "a"]).key());
    }

    #[test]
    fn canonical_encoding_layout() {
        let req = WireRequest::Detect {
            image: payload(b""),
            prompts: vec!["rip".into(), "defect".into()],
            box_threshold: 0.2,
            text_threshold: 0.1,
        };
        let empty_sha = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
        assert_eq!(
            req.canonical_encoding(),
            format!("detect\u{1e}{empty_sha}\u{1e}rip\u{1f}defect\u{1e}0.200000\u{1f}0.100000")
        );
        let key = req.key();
        assert_eq!(key.digest.len(), 64);
        assert!(key
            .digest
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert!(key.to_string().starts_with("detect/"));
    }
}
