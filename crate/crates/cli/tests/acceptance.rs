//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde_json::Value;

use iapas_core::config::default_blacklist;
use iapas_core::datasets::{decode_score_map, encode_score_map};
use iapas_core::geometry::{aggregate_scores, filter_by_size, iou, nms};
use iapas_core::metrics::{average_precision, f1_max, PixelPool};
use iapas_core::{BinaryMask, BoundingBox, Detection, MaskSet, ScoreMap, SizeThreshold};

type Outcome = Result<String, String>;
type Transform = (&'static str, fn(f64) -> f64);
type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn iapas(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_iapas"))
        .args(args)
        .current_dir(repo())
        .env_remove("IAPAS_BACKEND")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "iapas {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// ---- references ----

fn ref_metrics(scores: &[f32], labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut best, mut prev_r) = (0.0, 0.0f64, 0.0);
    for t in thresholds {
        let (mut tp, mut fp) = (0u64, 0u64);
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                if *l {
                    tp += 1
                } else {
                    fp += 1
                }
            }
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / pos;
        ap += (r - prev_r) * p;
        prev_r = r;
        if tp > 0 {
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    (ap, best)
}

fn corners(b: &BoundingBox) -> [f64; 4] {
    [b.x0(), b.y0(), b.x1(), b.y1()]
}

fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn ref_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| ref_iou(corners(&dets[k].bbox), corners(&dets[i].bbox)) < thr)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

// ---- generators ----

fn random_pool(rng: &mut StdRng, n: usize, grid_bits: Option<u32>) -> (Vec<f32>, Vec<bool>) {
    let rate: f64 = rng.random_range(0.001..0.999);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();
    if !labels.iter().any(|&l| l) {
        labels[0] = true;
    }
    let levels: u32 = match grid_bits {
        Some(bits) => 1 << bits,
        None => *[4u32, 64, 4096, 1 << 24]
            .get(rng.random_range(0..4))
            .unwrap(),
    };
    let scores = labels
        .iter()
        .map(|&l| {
            // positives drift upward so curves are non-trivial
            let k = rng.random_range(0..=levels);
            let bump = if l {
                rng.random_range(0..=levels / 4)
            } else {
                0
            };
            (k.saturating_add(bump).min(levels) as f64 / levels as f64) as f32
        })
        .collect();
    (scores, labels)
}

fn random_box(rng: &mut StdRng) -> BoundingBox {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (c, d): (f64, f64) = (rng.random(), rng.random());
        if let Ok(bx) = BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

fn random_detections(rng: &mut StdRng, n: usize) -> Vec<Detection> {
    let clustered = rng.random_bool(0.5);
    let anchor = random_box(rng);
    (0..n)
        .map(|_| {
            let bbox = if clustered && rng.random_bool(0.6) {
                // jitter around one box so suppression actually happens
                let mut j = |v: f64| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                let [x0, y0, x1, y1] = corners(&anchor);
                BoundingBox::new(
                    j(x0).min(x1 - 1e-3),
                    j(y0).min(y1 - 1e-3),
                    j(x1).max(x0 + 1e-3),
                    j(y1).max(y0 + 1e-3),
                )
                .unwrap_or(anchor)
            } else {
                random_box(rng)
            };
            let score = if rng.random_bool(0.2) {
                rng.random_range(0..4) as f64 / 4.0
            } else {
                rng.random()
            };
            Detection::new(bbox, score, "p").unwrap()
        })
        .collect()
}

// ---- criteria ----

fn metrics_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = rng.random_range(1..=4096);
        let (scores, labels) = random_pool(&mut rng, n, None);
        let pool = PixelPool::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let (ap, f1) = ref_metrics(&scores, &labels);
        let got = (
            average_precision(&pool).map_err(|e| e.to_string())?,
            f1_max(&pool).map_err(|e| e.to_string())?,
        );
        let err = (got.0 - ap).abs().max((got.1 - f1).abs());
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("pool {i} (n={n}): got {got:?}, reference ({ap}, {f1})")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("200 pools, max error {worst:.1e}, {elapsed:.2?}"))
}

fn rank_invariance() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    for i in 0..50 {
        let n = rng.random_range(1..=4096);
        let (scores, labels) = random_pool(&mut rng, n, Some(10));
        let base = PixelPool::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let (ap, f1) = (average_precision(&base).unwrap(), f1_max(&base).unwrap());
        let transforms: [Transform; 2] = [("x^3", |x| x * x * x), ("0.5+x/2", |x| 0.5 + x / 2.0)];
        for (name, t) in transforms {
            let moved: Vec<f32> = scores.iter().map(|&s| t(s as f64) as f32).collect();
            let pool = PixelPool::new(moved, labels.clone()).map_err(|e| e.to_string())?;
            let (ap2, f12) = (average_precision(&pool).unwrap(), f1_max(&pool).unwrap());
            ensure(
                (ap - ap2).abs() <= 1e-12 && (f1 - f12).abs() <= 1e-12,
                || format!("pool {i} under {name}: ({ap}, {f1}) vs ({ap2}, {f12})"),
            )?;
        }
    }
    Ok("50 pools x 2 transforms".into())
}

fn size_filter() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    for i in 0..1000 {
        let n = rng.random_range(0..=60);
        let dets = random_detections(&mut rng, n);
        let t: f64 = if rng.random_bool(0.2) && !dets.is_empty() {
            // exactly at some box's area: that box must be dropped
            let d = &dets[rng.random_range(0..dets.len())];
            let [x0, y0, x1, y1] = corners(&d.bbox);
            (x1 - x0) * (y1 - y0)
        } else {
            rng.random_range(1e-6..=1.0)
        };
        let Ok(thr) = SizeThreshold::new(t) else {
            continue;
        };
        let out = filter_by_size(&dets, thr);
        let expect: Vec<Detection> = dets
            .iter()
            .filter(|d| {
                let [x0, y0, x1, y1] = corners(&d.bbox);
                (x1 - x0) * (y1 - y0) < t
            })
            .cloned()
            .collect();
        ensure(out == expect && out.len() <= dets.len(), || {
            format!("case {i}: {} kept, expected {}", out.len(), expect.len())
        })?;
    }
    Ok("1000 fuzzed cases".into())
}

fn nms_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut suppressed = 0;
    for i in 0..500 {
        let n = rng.random_range(0..=50);
        let dets = random_detections(&mut rng, n);
        let thr = rng.random_range(0.05..0.95);
        let kept = nms(&dets, thr);
        ensure(kept == ref_nms(&dets, thr), || {
            format!("instance {i}: kept set differs")
        })?;
        for (a, x) in kept.iter().enumerate() {
            for y in &kept[a + 1..] {
                ensure(iou(&x.bbox, &y.bbox) < thr, || {
                    format!("instance {i}: kept pair overlaps")
                })?;
            }
        }
        suppressed += dets.len() - kept.len();
    }
    Ok(format!(
        "500 instances, {suppressed} boxes suppressed in total"
    ))
}

fn aggregation_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    for i in 0..200 {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
        let k = rng.random_range(0..=8);
        let mut masks = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..k {
            let bbox = random_box(&mut rng);
            let mask = if rng.random_bool(0.5) {
                BinaryMask::from_box(w, h, &bbox).unwrap()
            } else {
                let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.4)).collect();
                BinaryMask::from_bools(w, h, &bits).unwrap()
            };
            // dyadic scores so every partial sum is exact
            let score = rng.random_range(0..=256) as f64 / 256.0;
            masks.push(mask);
            dets.push(Detection::new(bbox, score, "p").unwrap());
        }
        let set = MaskSet::new("x", masks.clone(), dets.clone()).unwrap();
        let map = aggregate_scores(&set, w, h).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f64;
                for (m, d) in masks.iter().zip(&dets) {
                    if m.get(x, y) {
                        sum += d.score();
                    }
                }
                let want = sum.min(1.0) as f32;
                ensure(map.get(x, y).to_bits() == want.to_bits(), || {
                    format!("instance {i} pixel ({x},{y}): {} vs {want}", map.get(x, y))
                })?;
            }
        }
        let mut order: Vec<usize> = (0..k).collect();
        for j in (1..k).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        let shuffled = MaskSet::new(
            "x",
            order.iter().map(|&j| masks[j].clone()).collect(),
            order.iter().map(|&j| dets[j].clone()).collect(),
        )
        .unwrap();
        ensure(aggregate_scores(&shuffled, w, h).unwrap() == map, || {
            format!("instance {i}: permutation changed the map")
        })?;
    }
    Ok("200 instances, exact and permutation-invariant".into())
}

fn prompt_golden(out: &Path) -> Outcome {
    let out = out.join("pre");
    iapas(&[
        "preprocess",
        "--dataset",
        "fixtures/mini-mvtec",
        "--category",
        "carpet",
        "--backend",
        "replay:fixtures",
        "--seed",
        "111",
        "--out",
        out.to_str().unwrap(),
    ])?;
    let pre: Value = serde_json::from_slice(
        &fs::read(out.join("carpet/preprocess.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let strings = |v: &Value| -> Vec<String> {
        v.as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|s| s.as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    };
    let fin = strings(&pre["prompt_bundle"]["final"]);
    let objects = strings(&pre["prompt_bundle"]["object_tags"]);
    let phrase = "cloth fabric gray material pattern texture";
    for want in ["discoloration", "abnormal", "defect", phrase] {
        ensure(fin.iter().any(|p| p == want), || {
            format!("final prompt lacks {want:?}: {fin:?}")
        })?;
    }
    ensure(
        fin.iter().collect::<HashSet<_>>().len() == fin.len(),
        || format!("duplicates in {fin:?}"),
    )?;
    let blacklist = default_blacklist();
    let leaked: Vec<&str> = objects
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| blacklist.iter().any(|b| b == w))
        .collect();
    ensure(leaked.is_empty(), || {
        format!("blacklisted object tags {leaked:?}")
    })?;
    Ok(format!("{} final prompts", fin.len()))
}

fn collect(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn end_to_end(out: &Path) -> Outcome {
    let mut trees = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in ["run1", "run2"] {
        let dir = out.join(run);
        let start = Instant::now();
        iapas(&[
            "run",
            "--dataset",
            "fixtures/mini-mvtec",
            "--category",
            "carpet",
            "--backend",
            "replay:fixtures",
            "--seed",
            "111",
            "--out",
            dir.to_str().unwrap(),
        ])?;
        slowest = slowest.max(start.elapsed());
        trees.push(collect(&dir));
    }
    let compared: Vec<&String> = trees[0]
        .keys()
        .filter(|k| {
            k.ends_with("manifest.json") || k.ends_with("report.json") || k.ends_with(".iaps")
        })
        .collect();
    ensure(compared.len() == 5, || {
        format!("expected manifest, report and 3 score maps, got {compared:?}")
    })?;
    ensure(trees[0] == trees[1], || {
        "outputs differ between runs".into()
    })?;
    ensure(slowest < Duration::from_secs(10), || {
        format!("run took {slowest:?}")
    })?;
    Ok(format!(
        "{} files identical, slowest run {slowest:.2?}",
        trees[0].len()
    ))
}

fn ablation(out: &Path) -> Outcome {
    let dir = out.join("ablate");
    let stdout = iapas(&[
        "ablate",
        "--dataset",
        "fixtures/mini-mvtec",
        "--category",
        "carpet",
        "--backend",
        "replay:fixtures",
        "--out",
        dir.to_str().unwrap(),
    ])?;
    let lines: Vec<&str> = stdout.lines().collect();
    ensure(
        lines.first() == Some(&"Step1-1\tStep1-3\tStep2-2\tAP\tF1-max"),
        || format!("header {:?}", lines.first()),
    )?;
    let rows = &lines[1..];
    ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;
    let expected = ["XXX", "OXX", "OOX", "XOX", "XOO", "OOO"];
    for (row, want) in rows.iter().zip(expected) {
        let cells: Vec<&str> = row.split('\t').collect();
        ensure(cells.len() == 5 && cells[..3].concat() == want, || {
            format!("row {row:?}, wanted {want}")
        })?;
        for v in &cells[3..] {
            let x: f64 = v
                .parse()
                .map_err(|_| format!("row {want}: {v:?} is not a number"))?;
            ensure(
                (0.0..=100.0).contains(&x) && v.split('.').nth(1).map(str::len) == Some(2),
                || format!("row {want}: bad percentage {v:?}"),
            )?;
        }
    }
    Ok(rows
        .iter()
        .map(|r| r.replace('\t', " "))
        .collect::<Vec<_>>()
        .join(" | "))
}

fn codec() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    for i in 0..1000 {
        let (w, h) = (rng.random_range(1..=48u32), rng.random_range(1..=48u32));
        let values: Vec<f32> = (0..w * h)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                2 => f32::from_bits(rng.random_range(0..=0x3f80_0000)),
                _ => rng.random::<f32>(),
            })
            .collect();
        let map = ScoreMap::new(w, h, values).map_err(|e| e.to_string())?;
        let back =
            decode_score_map(&encode_score_map(&map)).map_err(|e| format!("map {i}: {e}"))?;
        let same = back.width() == w
            && back.height() == h
            && back
                .values()
                .iter()
                .zip(map.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("map {i} changed in round trip"))?;
    }
    let map = ScoreMap::new(4, 4, vec![0.5; 16]).unwrap();
    let good = encode_score_map(&map);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let e = decode_score_map(&bad_magic)
        .err()
        .map(|e| e.to_string())
        .unwrap_or_default();
    ensure(e.contains("not an IAPS file"), || format!("magic: {e:?}"))?;

    let truncated = &good[..good.len() - 4];
    let e = decode_score_map(truncated)
        .err()
        .map(|e| e.to_string())
        .unwrap_or_default();
    ensure(e.contains("truncated payload"), || {
        format!("truncation: {e:?}")
    })?;

    let mut huge = good.clone();
    huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
    let e = decode_score_map(&huge)
        .err()
        .map(|e| e.to_string())
        .unwrap_or_default();
    ensure(e.contains("dimension overflow"), || {
        format!("dimension: {e:?}")
    })?;
    Ok("1000 round trips, 3 corruption errors".into())
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let scratch = tempfile::tempdir().expect("temp dir");
    let out = scratch.path();
    let criteria: Vec<Check<'_>> = vec![
        ("metrics oracle equivalence", Box::new(metrics_oracle)),
        ("metric rank invariance", Box::new(rank_invariance)),
        ("size filter property", Box::new(size_filter)),
        ("nms oracle equivalence", Box::new(nms_oracle)),
        ("score aggregation oracle", Box::new(aggregation_oracle)),
        ("prompt pipeline golden", Box::new(|| prompt_golden(out))),
        ("end-to-end determinism", Box::new(|| end_to_end(out))),
        ("ablation structure", Box::new(|| ablation(out))),
        ("score-map codec", Box::new(codec)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
