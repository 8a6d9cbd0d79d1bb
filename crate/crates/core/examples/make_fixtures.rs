//! Regenerates the bundled mini dataset and its replay fixtures.
//!
//!     cargo run -p iapas-core --example make_fixtures -- fixtures
//!
//! The "models" here are a small deterministic stand-in: the tagger returns
//! the carpet tag phrase, the language model returns a fixed descriptor list,
//! the detector finds off-texture pixels, and the segmenter returns those
//! pixels inside each box (or the box itself when it holds none).

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};

use iapas_core::backends::wire::{
    DetectResponse, GenerateResponse, SegmentResponse, TagResponse, WireDetection,
};
use iapas_core::backends::RecordingTransport;
use iapas_core::backends::{Backend, Method, Transport, WireRequest};
use iapas_core::datasets::{encode_mask_png, open_dataset, write_atomic};
use iapas_core::pipeline::{run_ablation, run_category};
use iapas_core::{BackendError, BinaryMask, BoundingBox, PipelineConfig};

const SIZE: u32 = 32;
const CARPET_TAG: &str = "cloth fabric gray material pattern texture";
const CARPET_IAP: &str = "discoloration, fray, rip, bubble, stain, burn";
const GENERIC_IAP: &str = "scratch, dent, discoloration, crack";

#[derive(Clone, Copy)]
enum Defect {
    None,
    Cut,
    Color,
}

fn texture(seed: u32, x: u32, y: u32) -> Rgb<u8> {
    let g = 110 + ((x * 7 + y * 13 + seed * 3) % 5) as u8 * 6;
    Rgb([g, g, g + 4])
}

fn in_defect(defect: Defect, x: u32, y: u32) -> bool {
    match defect {
        Defect::None => false,
        Defect::Cut => (6..=24).contains(&x) && y >= 10 + x % 2 && y <= 12 + x / 12,
        Defect::Color => {
            let (dx, dy) = (x as i32 - 20, y as i32 - 20);
            dx * dx + dy * dy <= 25
        }
    }
}

fn render(seed: u32, defect: Defect) -> (RgbImage, BinaryMask) {
    let mut mask = BinaryMask::zeros(SIZE, SIZE).unwrap();
    let img = RgbImage::from_fn(SIZE, SIZE, |x, y| {
        if in_defect(defect, x, y) {
            mask.set(x, y, true);
            match defect {
                Defect::Cut => Rgb([25, 25, 25]),
                _ => Rgb([200, 60, 40]),
            }
        } else {
            texture(seed, x, y)
        }
    });
    (img, mask)
}

fn png(img: RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img)
        .write_to(&mut out, ImageFormat::Png)
        .unwrap();
    out.into_inner()
}

fn write_dataset(root: &Path) {
    let cat = root.join("carpet");
    let items: [(&str, u32, Defect); 5] = [
        ("train/good/000", 0, Defect::None),
        ("train/good/001", 1, Defect::None),
        ("test/good/000", 2, Defect::None),
        ("test/color/000", 3, Defect::Color),
        ("test/cut/000", 4, Defect::Cut),
    ];
    for (rel, seed, defect) in items {
        let (img, mask) = render(seed, defect);
        write_atomic(&cat.join(format!("{rel}.png")), &png(img)).unwrap();
        if !matches!(defect, Defect::None) {
            let (_, kind, stem) = {
                let mut p = rel.split('/');
                (p.next().unwrap(), p.next().unwrap(), p.next().unwrap())
            };
            let path = cat
                .join("ground_truth")
                .join(kind)
                .join(format!("{stem}_mask.png"));
            write_atomic(&path, &encode_mask_png(&mask)).unwrap();
        }
    }
}

/// Pixels that do not look like the gray carpet texture.
fn off_texture(png_bytes: &[u8]) -> BinaryMask {
    let img = image::load_from_memory(png_bytes).unwrap().to_rgb8();
    let mut mask = BinaryMask::zeros(img.width(), img.height()).unwrap();
    for (x, y, p) in img.enumerate_pixels() {
        let [r, g, _] = p.0;
        if r.abs_diff(g) > 40 || r < 60 {
            mask.set(x, y, true);
        }
    }
    mask
}

fn is_color(png_bytes: &[u8], mask: &BinaryMask) -> bool {
    let img = image::load_from_memory(png_bytes).unwrap().to_rgb8();
    img.enumerate_pixels()
        .any(|(x, y, p)| mask.get(x, y) && p.0[0] > 150)
}

/// Pixel-aligned bounds of the set bits, grown by `pad` pixels.
fn bounds(mask: &BinaryMask, pad: u32) -> Option<[f64; 4]> {
    let (w, h) = (mask.width(), mask.height());
    let mut b: Option<[u32; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                b = Some(match b {
                    None => [x, y, x + 1, y + 1],
                    Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                });
            }
        }
    }
    b.map(|[x0, y0, x1, y1]| {
        [
            x0.saturating_sub(pad) as f64 / w as f64,
            y0.saturating_sub(pad) as f64 / h as f64,
            (x1 + pad).min(w) as f64 / w as f64,
            (y1 + pad).min(h) as f64 / h as f64,
        ]
    })
}

struct Synthetic;

impl Synthetic {
    fn detect(&self, png_bytes: &[u8], prompts: &[String], box_threshold: f64) -> DetectResponse {
        let defects = off_texture(png_bytes);
        let color = defects.count_ones() > 0 && is_color(png_bytes, &defects);
        let mut detections = Vec::new();
        for prompt in prompts {
            let hit = |bbox: Option<[f64; 4]>, score: f64| {
                bbox.map(|bbox| WireDetection {
                    bbox,
                    score,
                    phrase: prompt.clone(),
                })
            };
            let found = match prompt.as_str() {
                p if p.contains("texture") || p.contains("fabric") => {
                    hit(Some([0.025, 0.025, 0.975, 0.975]), 0.55)
                }
                "abnormal" => hit(Some([0.05, 0.05, 0.95, 0.95]), 0.3),
                "defect" => match bounds(&defects, 1) {
                    Some(b) => hit(Some(b), 0.45),
                    None => hit(Some([0.59375, 0.59375, 0.75, 0.75]), 0.52),
                },
                "discoloration" if color => hit(bounds(&defects, 0), 0.6),
                "rip" | "fray" if !color => hit(bounds(&defects, 0), 0.5),
                _ => None,
            };
            detections.extend(found.filter(|d| d.score >= box_threshold));
        }
        DetectResponse { detections }
    }

    fn segment(&self, png_bytes: &[u8], boxes: &[[f64; 4]]) -> SegmentResponse {
        let defects = off_texture(png_bytes);
        let bright = image::load_from_memory(png_bytes).unwrap().to_rgb8();
        let (w, h) = (defects.width(), defects.height());
        let masks = boxes
            .iter()
            .map(|b| {
                let bbox = BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap();
                let rect = BinaryMask::from_box(w, h, &bbox).unwrap();
                let mut inside = BinaryMask::zeros(w, h).unwrap();
                for y in 0..h {
                    for x in 0..w {
                        inside.set(x, y, rect.get(x, y) && defects.get(x, y));
                    }
                }
                let area = (b[2] - b[0]) * (b[3] - b[1]);
                // whole-object boxes pick up the brighter weave only
                let mask = if area >= 0.5 {
                    let mut m = BinaryMask::zeros(w, h).unwrap();
                    for y in 0..h {
                        for x in 0..w {
                            let weave = bright.get_pixel(x, y).0[0] >= 128;
                            m.set(x, y, rect.get(x, y) && weave && !defects.get(x, y));
                        }
                    }
                    m
                } else if inside.count_ones() > 0 {
                    inside
                } else {
                    rect
                };
                B64.encode(encode_mask_png(&mask))
            })
            .collect();
        SegmentResponse { masks }
    }
}

impl Transport for Synthetic {
    fn identity(&self) -> String {
        "synthetic".into()
    }

    fn call(&self, request: &WireRequest) -> Result<Vec<u8>, BackendError> {
        let body = match request {
            WireRequest::Tag { image } => {
                // second normal image exercises case folding and the blacklist
                let tags = if image.bytes() == png(render(1, Defect::None).0) {
                    vec![CARPET_TAG.to_uppercase(), "stain".into()]
                } else {
                    vec![CARPET_TAG.into()]
                };
                serde_json::to_vec(&TagResponse { tags })
            }
            WireRequest::Generate { prompt, .. } => {
                let text = if prompt.contains(CARPET_TAG) {
                    CARPET_IAP
                } else {
                    GENERIC_IAP
                };
                serde_json::to_vec(&GenerateResponse { text: text.into() })
            }
            WireRequest::Detect {
                image,
                prompts,
                box_threshold,
                ..
            } => serde_json::to_vec(&self.detect(&image.png_bytes()?, prompts, *box_threshold)),
            WireRequest::Segment { image, boxes } => {
                serde_json::to_vec(&self.segment(&image.png_bytes()?, boxes))
            }
        };
        Ok(body.unwrap())
    }
}

fn main() {
    let out: PathBuf = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    let dataset_root = out.join("mini-mvtec");
    for sub in Method::ALL
        .iter()
        .map(|m| m.as_str())
        .chain(["mini-mvtec", "mini-predictions"])
    {
        let _ = fs::remove_dir_all(out.join(sub));
    }
    write_dataset(&dataset_root);

    let dataset = open_dataset(&dataset_root).unwrap();
    let config = PipelineConfig::default();
    let scratch = tempfile::tempdir().unwrap();
    let recorder = Backend::new(RecordingTransport::new(Synthetic, &out));
    run_ablation(&dataset, "carpet", &config, &recorder, scratch.path()).unwrap();

    // bundled predictions for `eval`, produced through replay only
    let replay = Backend::replay(&out).unwrap();
    run_category(
        &dataset,
        "carpet",
        &config,
        &replay,
        &out.join("mini-predictions"),
    )
    .unwrap();
    println!(
        "wrote {} and {} model calls",
        dataset_root.display(),
        recorder.calls()
    );
}
