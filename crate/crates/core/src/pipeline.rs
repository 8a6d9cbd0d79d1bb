//! Two-stage orchestration.
//!
//! Stage 1 runs once per category: tag sampled normal images, derive the size
//! threshold from a sampled test subset, and ask the language model for defect
//! descriptors. Stage 2 runs per test image: detect with the final prompts,
//! suppress duplicates, drop whole-object boxes, segment the survivors and
//! aggregate the weighted masks into a score map.
//!
//! Image sampling uses xoshiro256** seeded through SplitMix64 from the config
//! seed, followed by a partial Fisher-Yates shuffle where step `i` swaps
//! position `i` with `i + next_u64() % (n - i)`. The chosen images are
//! returned in manifest order.

use std::path::{Path, PathBuf};

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::config::{validate, PipelineConfig};
use crate::datasets::{self, load_mask, render_score_png, write_atomic, Category, DatasetManifest};
use crate::error::{BackendError, DatasetError, GeometryError, PipelineError};
use crate::geometry::{aggregate_scores, box_area, filter_by_size, nms};
use crate::metrics::{evaluate_category, MetricMode, MetricReport};
use crate::prompting::{
    assemble_final_prompt, build_iap_prompt, merge_tag_sets, parse_llm_output, sanitize_tags,
};
use crate::types::{
    BinaryMask, Detection, DetectionSet, ImageRef, MaskSet, PromptBundle, ScoreMap, SizeThreshold,
    Split, TagSet,
};

/// Order of the Stage 2 operations, recorded in every run manifest.
pub const STAGE_ORDER: [&str; 5] = ["detect", "nms", "size_filter", "segment", "aggregate"];

pub fn version_string() -> String {
    format!(
        "{} ({})",
        env!("CARGO_PKG_VERSION"),
        env!("IAPAS_GIT_DESCRIBE")
    )
}

fn backend_err(stage: &'static str) -> impl Fn(BackendError) -> PipelineError {
    move |source| PipelineError::Backend { stage, source }
}

fn geometry_err(stage: &'static str) -> impl Fn(GeometryError) -> PipelineError {
    move |source| PipelineError::Geometry { stage, source }
}

fn dataset_err(stage: &'static str) -> impl Fn(DatasetError) -> PipelineError {
    move |source| PipelineError::Dataset { stage, source }
}

/// Deterministic sample without replacement of `min(count, available)`
/// images of `split`.
pub fn sample_images(
    images: &[ImageRef],
    split: Split,
    count: usize,
    seed: u64,
) -> Result<Vec<ImageRef>, PipelineError> {
    let pool: Vec<&ImageRef> = images.iter().filter(|i| i.split == split).collect();
    if pool.is_empty() {
        return Err(PipelineError::EmptySplit(split));
    }
    let n = pool.len();
    let k = count.min(n);
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pool[i].clone()).collect())
}

/// Size-filter cutoff: `size_factor` times the largest box area found when
/// detecting the object tags on `sample`. Falls back to `size_factor` when
/// there are no tags or no detections.
pub fn compute_size_threshold(
    sample: &[ImageRef],
    object_tags: &TagSet,
    config: &PipelineConfig,
    backend: &Backend,
) -> Result<SizeThreshold, PipelineError> {
    let mut largest: Option<f64> = None;
    if !object_tags.is_empty() {
        for image in sample {
            let set = backend
                .detect_regions(
                    image,
                    object_tags.tags(),
                    config.box_threshold(),
                    config.text_threshold(),
                )
                .map_err(backend_err("size threshold"))?;
            for d in &set.detections {
                let area = box_area(&d.bbox);
                largest = Some(largest.map_or(area, |m: f64| m.max(area)));
            }
        }
    }
    Ok(SizeThreshold::new(
        config.size_factor * largest.unwrap_or(1.0),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessResult {
    pub category: String,
    pub prompt_bundle: PromptBundle,
    pub size_threshold: SizeThreshold,
    pub sampled_normal_ids: Vec<String>,
    pub sampled_anomalous_ids: Vec<String>,
    pub config_snapshot: PipelineConfig,
}

/// Stage 1. Each toggle switches one step off independently.
pub fn preprocess_category(
    category: &Category,
    config: &PipelineConfig,
    backend: &Backend,
) -> Result<PreprocessResult, PipelineError> {
    let config = validate(config.clone())?;

    let (object_tags, sampled_normal_ids) = if config.enable_tagging {
        let sample = sample_images(
            &category.images,
            Split::Normal,
            config.normal_sample_count,
            config.seed,
        )?;
        let mut sets = Vec::with_capacity(sample.len());
        for image in &sample {
            let raw = backend.tag_image(image).map_err(backend_err("tagging"))?;
            sets.push(sanitize_tags(&raw, &config.blacklist));
        }
        log::info!("{}: tagged {} normal images", category.name, sample.len());
        (
            merge_tag_sets(&sets),
            sample.into_iter().map(|i| i.id).collect(),
        )
    } else {
        (TagSet::empty(), Vec::new())
    };

    let (size_threshold, sampled_anomalous_ids) =
        if config.enable_size_filter && !config.per_image_size_threshold {
            let sample = sample_images(
                &category.images,
                Split::Anomalous,
                config.anomalous_sample_count,
                config.seed,
            )?;
            let t = compute_size_threshold(&sample, &object_tags, &config, backend)?;
            (t, sample.into_iter().map(|i| i.id).collect())
        } else {
            (SizeThreshold::DISABLED, Vec::new())
        };

    let adjectives = if config.enable_llm {
        let prompt = build_iap_prompt(&config.iap_template, &object_tags);
        let text = backend
            .generate_text(&prompt)
            .map_err(backend_err("llm prompting"))?;
        parse_llm_output(&text, config.max_adjectives)
    } else {
        Vec::new()
    };

    let prompt_bundle = assemble_final_prompt(&adjectives, &config.fixed_prompts, &object_tags)?;
    log::info!(
        "{}: {} final prompts, size threshold {:.4}",
        category.name,
        prompt_bundle.final_prompts().len(),
        size_threshold.value()
    );
    Ok(PreprocessResult {
        category: category.name.clone(),
        prompt_bundle,
        size_threshold,
        sampled_normal_ids,
        sampled_anomalous_ids,
        config_snapshot: config,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub raw_detections: DetectionSet,
    pub post_nms: DetectionSet,
    pub filtered: DetectionSet,
    /// Threshold applied by the size filter; `None` when the filter is off.
    pub size_threshold: Option<SizeThreshold>,
    pub mask_set: MaskSet,
    pub score_map: ScoreMap,
}

/// Stage 2 for one image.
pub fn segment_image(
    image: &ImageRef,
    pre: &PreprocessResult,
    config: &PipelineConfig,
    backend: &Backend,
) -> Result<ImageResult, PipelineError> {
    let raw = backend
        .detect_regions(
            image,
            pre.prompt_bundle.final_prompts(),
            config.box_threshold(),
            config.text_threshold(),
        )
        .map_err(backend_err("detection"))?;
    let post_nms = DetectionSet::new(image.id.clone(), nms(&raw.detections, config.iou_threshold));

    let size_threshold = if !config.enable_size_filter {
        None
    } else if config.per_image_size_threshold {
        Some(compute_size_threshold(
            std::slice::from_ref(image),
            pre.prompt_bundle.object_tags(),
            config,
            backend,
        )?)
    } else {
        Some(pre.size_threshold)
    };
    let filtered = match size_threshold {
        Some(t) => DetectionSet::new(image.id.clone(), filter_by_size(&post_nms.detections, t)),
        None => post_nms.clone(),
    };

    let mask_set = backend
        .segment_regions(image, &filtered.detections)
        .map_err(backend_err("segmentation"))?;
    let score_map = aggregate_scores(&mask_set, image.width, image.height)
        .map_err(geometry_err("aggregation"))?;
    Ok(ImageResult {
        image_id: image.id.clone(),
        raw_detections: raw,
        post_nms,
        filtered,
        size_threshold,
        mask_set,
        score_map,
    })
}

/// Relative path of an image's outputs below `scores/`, without extension.
fn output_stem(image_id: &str) -> Result<PathBuf, PipelineError> {
    let mut path = PathBuf::new();
    for part in image_id.split('/') {
        if part.is_empty() || part == "." || part == ".." || part.contains('\\') {
            return Err(dataset_err("output")(DatasetError::Manifest(format!(
                "image id {image_id:?} is not a safe relative path"
            ))));
        }
        path.push(part);
    }
    Ok(path)
}

/// `scores/<image id>.iaps`, relative to a category output directory.
pub fn score_file(image_id: &str) -> Result<PathBuf, PipelineError> {
    Ok(Path::new("scores")
        .join(output_stem(image_id)?)
        .with_extension("iaps"))
}

fn slash_path(path: &Path) -> String {
    path.iter()
        .map(|p| p.to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the category output directory.
    pub score_file: String,
    pub preview_file: String,
    pub raw_detections: usize,
    pub post_nms_detections: usize,
    pub filtered_detections: Vec<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum MetricsStatus {
    Computed { report: MetricReport },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub dataset: String,
    pub category: String,
    pub backend: String,
    pub config_digest: String,
    pub config: PipelineConfig,
    pub stage_order: Vec<String>,
    pub prompt_bundle: PromptBundle,
    pub size_threshold: f64,
    pub sampled_normal_ids: Vec<String>,
    pub sampled_anomalous_ids: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub metrics: MetricsStatus,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub dataset: String,
    pub category: Option<String>,
    pub ap: f64,
    pub f1_max: f64,
    pub pixels: u64,
    pub positives: u64,
    pub pooling: String,
    pub aggregation: String,
    pub test_good_images: String,
    pub config_digest: String,
}

impl ReportFile {
    pub fn new(
        dataset: &str,
        category: Option<&str>,
        report: &MetricReport,
        config_digest: &str,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            category: category.map(str::to_string),
            ap: report.ap,
            f1_max: report.f1_max,
            pixels: report.pixels_evaluated,
            positives: report.positives,
            pooling: "category".into(),
            aggregation: "mean-over-categories".into(),
            test_good_images: "included-as-negatives".into(),
            config_digest: config_digest.to_string(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(dataset_err("output"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn test_images(category: &Category) -> Vec<&ImageRef> {
    category.split(Split::Anomalous).collect()
}

/// Pixel-level AP / F1-max over every test image with known ground truth.
/// Returns `Ok(Err(reason))` when evaluation is not possible.
pub fn evaluate_maps<'a>(
    labels: bool,
    scored: impl IntoIterator<Item = (&'a ImageRef, ScoreMap)>,
) -> Result<Result<MetricReport, String>, PipelineError> {
    if !labels {
        return Ok(Err("dataset has no ground truth".into()));
    }
    let mut pairs = Vec::new();
    let mut any_mask = false;
    for (image, map) in scored {
        let truth = if let Some(path) = &image.gt_mask_path {
            any_mask = true;
            load_mask(path).map_err(dataset_err("evaluation"))?
        } else if image.mask_free {
            BinaryMask::zeros(image.width, image.height)?
        } else {
            continue;
        };
        pairs.push((map, truth));
    }
    if !any_mask {
        return Ok(Err("no ground-truth masks".into()));
    }
    match evaluate_category(&pairs, MetricMode::Exact) {
        Ok(report) => Ok(Ok(report)),
        Err(crate::error::MetricsError::NoPositives) => Ok(Err("no positive pixels".into())),
        Err(source) => Err(PipelineError::Metrics {
            stage: "evaluation",
            source,
        }),
    }
}

/// Evaluates score maps previously written below `<pred_dir>/<category>/`.
pub fn evaluate_predictions(
    dataset: &DatasetManifest,
    category_name: &str,
    pred_dir: &Path,
) -> Result<Result<MetricReport, String>, PipelineError> {
    let category = dataset
        .category(category_name)
        .map_err(dataset_err("dataset"))?;
    let cat_dir = pred_dir.join(category_name);
    let images = test_images(category);
    let maps = crate::par::map_collect(&images, |image| {
        let map = datasets::read_score_map(&cat_dir.join(score_file(&image.id)?))
            .map_err(dataset_err("evaluation"))?;
        if (map.width(), map.height()) != (image.width, image.height) {
            return Err(PipelineError::Metrics {
                stage: "evaluation",
                source: crate::error::MetricsError::DimensionMismatch {
                    score: (map.width(), map.height()),
                    truth: (image.width, image.height),
                },
            });
        }
        Ok(map)
    });
    let maps = maps.into_iter().collect::<Result<Vec<_>, _>>()?;
    evaluate_maps(dataset.labels, images.into_iter().zip(maps))
}

/// Stage 2 over every test image of a category, writing score maps,
/// previews, `manifest.json` and (when ground truth exists) `report.json`
/// below `<out>/<category>/`.
pub fn segment_category(
    dataset: &DatasetManifest,
    category_name: &str,
    pre: &PreprocessResult,
    config: &PipelineConfig,
    backend: &Backend,
    output_dir: &Path,
) -> Result<RunManifest, PipelineError> {
    let config = validate(config.clone())?;
    let category = dataset
        .category(category_name)
        .map_err(dataset_err("dataset"))?;
    let images = test_images(category);
    let results =
        crate::par::map_collect(&images, |image| segment_image(image, pre, &config, backend));
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let cat_dir = output_dir.join(category_name);
    let mut records = Vec::with_capacity(results.len());
    for result in &results {
        let score_rel = score_file(&result.image_id)?;
        let png_rel = score_rel.with_extension("png");
        datasets::write_score_map(&result.score_map, &cat_dir.join(&score_rel))
            .map_err(dataset_err("output"))?;
        write_atomic(
            &cat_dir.join(&png_rel),
            &render_score_png(&result.score_map),
        )
        .map_err(dataset_err("output"))?;
        records.push(ImageRecord {
            id: result.image_id.clone(),
            score_file: slash_path(&score_rel),
            preview_file: slash_path(&png_rel),
            raw_detections: result.raw_detections.len(),
            post_nms_detections: result.post_nms.len(),
            filtered_detections: result.filtered.detections.clone(),
            size_threshold: result.size_threshold.map(|t| t.value()),
        });
    }

    let config_digest = config.digest();
    let metrics = evaluate_maps(
        dataset.labels,
        images
            .iter()
            .copied()
            .zip(results.into_iter().map(|r| r.score_map)),
    )?;
    let report_path = cat_dir.join("report.json");
    let metrics = match metrics {
        Ok(report) => {
            write_json(
                &report_path,
                &ReportFile::new(&dataset.name, Some(category_name), &report, &config_digest),
            )?;
            MetricsStatus::Computed { report }
        }
        Err(reason) => {
            log::warn!("{category_name}: metrics skipped: {reason}");
            MetricsStatus::Skipped { reason }
        }
    };

    let manifest = RunManifest {
        version: version_string(),
        dataset: dataset.name.clone(),
        category: category_name.to_string(),
        backend: backend.identity(),
        config_digest,
        config,
        stage_order: STAGE_ORDER.iter().map(|s| s.to_string()).collect(),
        prompt_bundle: pre.prompt_bundle.clone(),
        size_threshold: pre.size_threshold.value(),
        sampled_normal_ids: pre.sampled_normal_ids.clone(),
        sampled_anomalous_ids: pre.sampled_anomalous_ids.clone(),
        images: records,
        metrics,
    };
    write_json(&cat_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Stage 1 then Stage 2 for one category.
pub fn run_category(
    dataset: &DatasetManifest,
    category_name: &str,
    config: &PipelineConfig,
    backend: &Backend,
    output_dir: &Path,
) -> Result<RunManifest, PipelineError> {
    let category = dataset
        .category(category_name)
        .map_err(dataset_err("dataset"))?;
    let pre = preprocess_category(category, config, backend)?;
    segment_category(dataset, category_name, &pre, config, backend, output_dir)
}

/// One row of the component ablation: which Stage 1/2 steps are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub tagging: bool,
    pub llm: bool,
    pub size_filter: bool,
}

impl AblationVariant {
    /// `O` for enabled, `X` for disabled, in tagging / llm / filter order.
    pub fn label(&self) -> String {
        [self.tagging, self.llm, self.size_filter]
            .iter()
            .map(|&on| if on { 'O' } else { 'X' })
            .collect()
    }

    pub fn apply(&self, config: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            enable_tagging: self.tagging,
            enable_llm: self.llm,
            enable_size_filter: self.size_filter,
            ..config.clone()
        }
    }
}

/// The six component combinations, baseline first and full pipeline last.
pub fn ablation_variants() -> [AblationVariant; 6] {
    let v = |tagging, llm, size_filter| AblationVariant {
        tagging,
        llm,
        size_filter,
    };
    [
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, true, true),
        v(true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub metrics: MetricsStatus,
    pub config_digest: String,
}

/// Runs every ablation variant into `<out>/ablation/<label>/`.
pub fn run_ablation(
    dataset: &DatasetManifest,
    category_name: &str,
    config: &PipelineConfig,
    backend: &Backend,
    output_dir: &Path,
) -> Result<Vec<AblationRow>, PipelineError> {
    ablation_variants()
        .into_iter()
        .map(|variant| {
            let label = variant.label();
            let dir = output_dir.join("ablation").join(&label);
            let manifest = run_category(
                dataset,
                category_name,
                &variant.apply(config),
                backend,
                &dir,
            )?;
            Ok(AblationRow {
                variant,
                label,
                metrics: manifest.metrics,
                config_digest: manifest.config_digest,
            })
        })
        .collect()
}
