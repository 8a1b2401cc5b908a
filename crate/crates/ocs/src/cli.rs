//! Batch entry points for the `ocs` binary.
//!
//! Every command is fully determined by its flags, an optional `key=value`
//! config file (flags win), and `--seed`. Progress goes to stderr;
//! machine-readable results go to files only. Exit codes: 0 success, 1
//! operational error, 2 usage error.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{
    self, load_classifier, predict_test_time, save_classifier, topk_accuracy, ClassifierModel,
    SamplerMode, TrainConfig,
};
use crate::dataset::{load_manifest, resolve_image_path, save_manifest, DatasetManifest};
use crate::detector::{
    detect_max, fit_box_regressor, generate_proposals, load_cascade, load_detections,
    load_regressor, refine_detection, regression_features, save_cascade, save_detections,
    save_regressor, train_cascade, BoxRegressor, CascadeModel, Detection, DetectorTrainConfig,
    ProposalConfig, RegressionContext, RegressionPair,
};
use crate::eval::{benchmark_table, EvalSummary, FULL_SCALE_REFERENCE};
use crate::geometry::{ImageBuffer, Rect};
use crate::pixmap::{read_pixmap, write_pixmap};
use crate::sampling::{build_crop_distribution, SamplerConfig};
use crate::synth::{derive_seed, generate_synthetic_scene, SceneSpec};
use crate::{OcsError, Result};

const USAGE: &str = "\
usage: ocs <command> [--flag value]...

commands:
  synth-gen    generate a synthetic train/test dataset
  det-train    train the cascade detector (and box regressor)
  det-run      write per-image max-response detections
  cls-train    train the crop classifier (--sampler uniform|multinomial)
  cls-eval     evaluate a classifier with the multi-crop ensemble
  sample-map   write the crop-sampling probability map as a pixmap
  benchmark    uniform-vs-multinomial comparison with per-seed repeats

common flags: --seed N, --workers N, --config FILE (key=value lines,
overridden by flags). Every command writes results to files and logs to
stderr. Run a command with --help for its flags.
";

/// Route an argument vector to a subcommand. Returns the process exit code.
pub fn dispatch<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let argv: Vec<String> = args.into_iter().collect();
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    if command == "--help" || command == "help" {
        eprint!("{USAGE}");
        return 0;
    }
    let opts = match Options::parse(&argv[1..]) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("ocs: {msg}");
            eprint!("{USAGE}");
            return 2;
        }
    };
    if let Some(n) = opts.values.get("workers") {
        if let Ok(n) = n.parse::<usize>() {
            // First initialization wins; later dispatches in the same
            // process keep the existing pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let run = match command.as_str() {
        "synth-gen" => cmd_synth_gen(&opts),
        "det-train" => cmd_det_train(&opts),
        "det-run" => cmd_det_run(&opts),
        "cls-train" => cmd_cls_train(&opts),
        "cls-eval" => cmd_cls_eval(&opts),
        "sample-map" => cmd_sample_map(&opts),
        "benchmark" => cmd_benchmark(&opts),
        other => {
            eprintln!("ocs: unknown command {other:?}");
            eprint!("{USAGE}");
            return 2;
        }
    };
    match run {
        Ok(()) => 0,
        Err(CmdError::Usage(msg)) => {
            eprintln!("ocs {command}: {msg}");
            2
        }
        Err(CmdError::Op(e)) => {
            eprintln!("ocs {command}: {e}");
            1
        }
    }
}

enum CmdError {
    Usage(String),
    Op(OcsError),
}

impl From<OcsError> for CmdError {
    fn from(e: OcsError) -> Self {
        CmdError::Op(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

/// Long-only flags merged over an optional key=value config file.
struct Options {
    values: BTreeMap<String, String>,
}

impl Options {
    fn parse(args: &[String]) -> std::result::Result<Options, String> {
        let mut flags = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("expected --flag, got {arg:?}"))?;
            if key.is_empty() {
                return Err("empty flag name".into());
            }
            if key == "help" {
                return Err("see usage".into());
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| format!("flag --{key} needs a value"))?;
            flags.insert(key.to_string(), value.clone());
            i += 2;
        }

        let mut values = BTreeMap::new();
        if let Some(path) = flags.get("config") {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {path:?}: {e}"))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("{path}:{} expected key=value", lineno + 1))?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        values.extend(flags);
        Ok(Options { values })
    }

    fn required(&self, key: &str) -> std::result::Result<&str, CmdError> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CmdError::Usage(format!("missing required flag --{key}")))
    }

    fn path(&self, key: &str) -> std::result::Result<PathBuf, CmdError> {
        Ok(PathBuf::from(self.required(key)?))
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }

    fn parse_with<T: std::str::FromStr>(
        &self,
        key: &str,
        default: T,
    ) -> std::result::Result<T, CmdError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| CmdError::Usage(format!("bad value {raw:?} for --{key}"))),
        }
    }

    fn bool_flag(&self, key: &str, default: bool) -> std::result::Result<bool, CmdError> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("on" | "true" | "1") => Ok(true),
            Some("off" | "false" | "0") => Ok(false),
            Some(other) => Err(CmdError::Usage(format!(
                "bad value {other:?} for --{key}, want on/off"
            ))),
        }
    }
}

fn scene_spec_from(opts: &Options) -> std::result::Result<SceneSpec, CmdError> {
    let d = SceneSpec::default();
    Ok(SceneSpec {
        min_image_side: opts.parse_with("image-min", d.min_image_side)?,
        max_image_side: opts.parse_with("image-max", d.max_image_side)?,
        num_classes: opts.parse_with("classes", d.num_classes)?,
        salient_area: (
            opts.parse_with("salient-min", d.salient_area.0)?,
            opts.parse_with("salient-max", d.salient_area.1)?,
        ),
        distractor_count: (
            opts.parse_with("distractors-min", d.distractor_count.0)?,
            opts.parse_with("distractors-max", d.distractor_count.1)?,
        ),
        distractor_area: (
            opts.parse_with("distractor-area-min", d.distractor_area.0)?,
            opts.parse_with("distractor-area-max", d.distractor_area.1)?,
        ),
        occlusion_probability: opts.parse_with("occlusion-prob", d.occlusion_probability)?,
        clutter_density: opts.parse_with("clutter-density", d.clutter_density)?,
        rng_seed: opts.parse_with("seed", 0u64)?,
    })
}

fn sampler_config_from(opts: &Options) -> std::result::Result<SamplerConfig, CmdError> {
    let d = SamplerConfig::default();
    Ok(SamplerConfig {
        crop_size: opts.parse_with("crop-size", d.crop_size)?,
        tau: opts.parse_with("tau", d.tau)?,
        flip_probability: opts.parse_with("flip-prob", d.flip_probability)?,
        rng_seed: opts.parse_with("seed", 0u64)?,
    })
}

fn load_images(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<ImageBuffer>> {
    manifest
        .records
        .par_iter()
        .map(|rec| read_pixmap(&resolve_image_path(manifest_path, &rec.image_path)))
        .collect()
}

/// synth-gen --out DIR --train N --test N [--classes N --seed N ...]
fn cmd_synth_gen(opts: &Options) -> CmdResult {
    let out_dir = opts.path("out")?;
    let train_count: usize = opts.parse_with("train", 2000)?;
    let test_count: usize = opts.parse_with("test", 500)?;
    let spec = scene_spec_from(opts)?;
    spec.validate()?;

    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)
        .map_err(|e| OcsError::io(image_dir.display().to_string(), e))?;

    for (split, count, stream_base) in
        [("train", train_count, 0u64), ("test", test_count, 1u64 << 32)]
    {
        eprintln!("synth-gen: generating {count} {split} scenes");
        let scenes: Result<Vec<_>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, stream_base + i as u64));
                let class = i % spec.num_classes;
                generate_synthetic_scene(&spec, class, &mut rng)
            })
            .collect();
        let mut manifest = DatasetManifest::new(split, spec.num_classes);
        for (i, (img, mut rec)) in scenes?.into_iter().enumerate() {
            let name = format!("images/{split}_{i:05}.ppm");
            write_pixmap(&img, &out_dir.join(&name))?;
            rec.image_path = name;
            manifest.records.push(rec);
        }
        save_manifest(&manifest, &out_dir.join(format!("{split}.manifest")))?;
    }
    eprintln!("synth-gen: wrote {}", out_dir.display());
    Ok(())
}

/// Ground-truth boxes for detector work: records without a salient object
/// are rejected because the detector contract needs one box per image.
fn salient_boxes(manifest: &DatasetManifest) -> Result<Vec<Rect>> {
    manifest
        .records
        .iter()
        .map(|rec| {
            rec.salient_box().ok_or_else(|| {
                OcsError::Config(format!("record {} has no salient ground truth", rec.image_path))
            })
        })
        .collect()
}

/// det-train --manifest M --model-out F [--regressor-out F ...]
fn cmd_det_train(opts: &Options) -> CmdResult {
    let manifest_path = opts.path("manifest")?;
    let model_out = opts.path("model-out")?;
    let d = DetectorTrainConfig::default();
    let cfg = DetectorTrainConfig {
        stages: opts.parse_with("stages", d.stages)?,
        weak_per_stage: opts.parse_with("weak-per-stage", d.weak_per_stage)?,
        candidates_per_round: opts.parse_with("candidates", d.candidates_per_round)?,
        max_regionlets: opts.parse_with("max-regionlets", d.max_regionlets)?,
        negatives_per_image: opts.parse_with("negatives-per-image", d.negatives_per_image)?,
        max_negatives: opts.parse_with("max-negatives", d.max_negatives)?,
        mining_pool_per_image: opts.parse_with("mining-pool-per-image", d.mining_pool_per_image)?,
        search_subsample: opts.parse_with("search-subsample", d.search_subsample)?,
        threshold_margin: opts.parse_with("threshold-margin", d.threshold_margin)?,
        rng_seed: opts.parse_with("seed", 0u64)?,
        proposals: ProposalConfig::default(),
    };
    let max_images: usize = opts.parse_with("max-images", 800)?;

    let manifest = load_manifest(&manifest_path)?;
    let gts = salient_boxes(&manifest)?;
    let take = manifest.len().min(max_images.max(1));
    eprintln!(
        "det-train: loading {take} of {} images from {}",
        manifest.len(),
        manifest_path.display()
    );
    let images: Result<Vec<ImageBuffer>> = manifest.records[..take]
        .par_iter()
        .map(|rec| read_pixmap(&resolve_image_path(&manifest_path, &rec.image_path)))
        .collect();
    let pairs: Vec<(ImageBuffer, Rect)> = images?.into_iter().zip(gts[..take].to_vec()).collect();

    eprintln!(
        "det-train: boosting {} stages x {} rounds over {} candidates/round",
        cfg.stages, cfg.weak_per_stage, cfg.candidates_per_round
    );
    let (model, diag) = train_cascade(&pairs, &cfg)?;
    if let Some(last) = diag.rounds.last() {
        eprintln!(
            "det-train: {} positives, {} initial negatives, final stage train error {:.4}",
            diag.positives, diag.initial_negatives, last.train_error
        );
    }
    save_cascade(&model, &model_out)?;
    eprintln!("det-train: wrote {}", model_out.display());

    if let Some(reg_out) = opts.opt_path("regressor-out") {
        let lambda: f64 = opts.parse_with("ridge-lambda", 1e-3)?;
        let pairs = collect_regression_pairs(&pairs, &cfg.proposals, cfg.rng_seed);
        eprintln!("det-train: fitting box regressor on {} pairs", pairs.len());
        let reg = fit_box_regressor(&pairs, lambda)?;
        save_regressor(&reg, &reg_out)?;
        eprintln!("det-train: wrote {}", reg_out.display());
    }
    Ok(())
}

/// Regression pairs: proposals with IoU >= 0.4 against their ground truth,
/// plus a few jittered copies of the ground truth itself so the fine
/// refinement regime (applying the regressor to an almost-right box) is
/// represented. Featurized on the original image.
fn collect_regression_pairs(
    images: &[(ImageBuffer, Rect)],
    proposals: &ProposalConfig,
    seed: u64,
) -> Vec<RegressionPair> {
    images
        .par_iter()
        .enumerate()
        .map(|(idx, (img, gt))| {
            let ctx = RegressionContext::new(img);
            let (w, h) = (img.width() as i32, img.height() as i32);
            let mut pairs: Vec<RegressionPair> = generate_proposals(img, proposals)
                .into_iter()
                .filter(|r| r.iou(gt) >= 0.4)
                .map(|r| RegressionPair {
                    features: regression_features(&ctx, &r),
                    detected: r,
                    target: *gt,
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9000 + idx as u64));
            for _ in 0..8 {
                let jx = (gt.width() as f64 * rng.random_range(-0.1..0.1)).round() as i32;
                let jy = (gt.height() as f64 * rng.random_range(-0.1..0.1)).round() as i32;
                let gw = (gt.width() as f64 * rng.random_range(0.85..1.18)).round() as i32;
                let gh = (gt.height() as f64 * rng.random_range(0.85..1.18)).round() as i32;
                let (cx, cy) = gt.center();
                let x0 = (cx as i32 + jx - gw / 2).clamp(0, w - 2);
                let y0 = (cy as i32 + jy - gh / 2).clamp(0, h - 2);
                let rect = Rect::new(x0, y0, (x0 + gw.max(2)).min(w), (y0 + gh.max(2)).min(h))
                    .expect("clamped");
                pairs.push(RegressionPair {
                    features: regression_features(&ctx, &rect),
                    detected: rect,
                    target: *gt,
                });
            }
            pairs
        })
        .flatten()
        .collect()
}

fn run_detector(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    model: &CascadeModel,
    regressor: Option<&BoxRegressor>,
    cascaded: bool,
    regress_iters: usize,
) -> Result<Vec<(String, Detection)>> {
    let proposals_cfg = ProposalConfig::default();
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let img = read_pixmap(&resolve_image_path(manifest_path, &rec.image_path))?;
            let rctx = RegressionContext::new(&img);
            let proposals = generate_proposals(&img, &proposals_cfg);
            let mut det = detect_max(model, &rctx.features, &proposals, cascaded)?;
            if let Some(reg) = regressor {
                det.rect = refine_detection(
                    reg,
                    &rctx,
                    &det,
                    regress_iters,
                    img.width() as i32,
                    img.height() as i32,
                );
            }
            Ok((rec.image_path.clone(), det))
        })
        .collect()
}

/// det-run --manifest M --model F --out F [--regressor F --cascade-fast-path on]
fn cmd_det_run(opts: &Options) -> CmdResult {
    let manifest_path = opts.path("manifest")?;
    let model_path = opts.path("model")?;
    let out_path = opts.path("out")?;
    let cascaded = opts.bool_flag("cascade-fast-path", false)?;
    let regress_iters: usize = opts.parse_with("regress-iters", 3)?;
    let model = load_cascade(&model_path)?;
    let regressor = match opts.opt_path("regressor") {
        Some(p) => Some(load_regressor(&p)?),
        None => None,
    };
    let manifest = load_manifest(&manifest_path)?;
    eprintln!(
        "det-run: {} images, {} weak classifiers{}",
        manifest.len(),
        model.total_weak_count(),
        if regressor.is_some() { ", with re-localization" } else { "" }
    );
    let detections = run_detector(
        &manifest,
        &manifest_path,
        &model,
        regressor.as_ref(),
        cascaded,
        regress_iters,
    )?;
    save_detections(&detections, &out_path)?;
    eprintln!("det-run: wrote {}", out_path.display());
    Ok(())
}

/// Detections aligned with manifest records: from a detection file, from
/// ground-truth boxes, or absent.
fn detections_for(
    manifest: &DatasetManifest,
    det_file: Option<&Path>,
    use_gt: bool,
) -> Result<Vec<Option<Rect>>> {
    if use_gt {
        return Ok(manifest.records.iter().map(|r| r.salient_box()).collect());
    }
    let Some(path) = det_file else {
        return Ok(vec![None; manifest.len()]);
    };
    let by_path: HashMap<String, Detection> = load_detections(path)?.into_iter().collect();
    Ok(manifest
        .records
        .iter()
        .map(|rec| by_path.get(&rec.image_path).map(|d| d.rect))
        .collect())
}

/// cls-train --manifest M --model-out F --sampler uniform|multinomial
/// [--detections F | --use-gt-boxes on] [--epochs N --lr X ...]
fn cmd_cls_train(opts: &Options) -> CmdResult {
    let manifest_path = opts.path("manifest")?;
    let model_out = opts.path("model-out")?;
    let mode: SamplerMode = opts.required("sampler")?.parse()?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        mode,
        crops_per_image: opts.parse_with("crops-per-image", d.crops_per_image)?,
        epochs: opts.parse_with("epochs", d.epochs)?,
        learning_rate: opts.parse_with("lr", d.learning_rate)?,
        l2_penalty: opts.parse_with("l2", d.l2_penalty)?,
        rng_seed: opts.parse_with("seed", 0u64)?,
        resize_target: opts.parse_with("resize-target", d.resize_target)?,
    };
    let sampler = sampler_config_from(opts)?;
    let manifest = load_manifest(&manifest_path)?;
    let use_gt = opts.bool_flag("use-gt-boxes", false)?;
    let detections = detections_for(&manifest, opts.opt_path("detections").as_deref(), use_gt)?;
    eprintln!("cls-train: loading {} images", manifest.len());
    let images = load_images(&manifest, &manifest_path)?;
    let labels: Vec<usize> = manifest.records.iter().map(|r| r.label).collect();
    eprintln!(
        "cls-train: {:?} sampler, {} epochs x {} crops/image",
        cfg.mode, cfg.epochs, cfg.crops_per_image
    );
    let (model, losses) = classifier::train_classifier(
        &images,
        &labels,
        &detections,
        manifest.num_classes,
        &cfg,
        &sampler,
    )?;
    for (e, loss) in losses.iter().enumerate() {
        eprintln!("cls-train: epoch {e} loss {loss:.5}");
    }
    save_classifier(&model, &model_out)?;
    eprintln!("cls-train: wrote {}", model_out.display());
    Ok(())
}

fn evaluate_classifier(
    model: &ClassifierModel,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    detections: &[Option<Rect>],
    crop_size: usize,
    resize_target: usize,
) -> Result<EvalSummary> {
    let predictions: Result<Vec<Vec<f64>>> = manifest
        .records
        .par_iter()
        .zip(detections)
        .map(|(rec, det)| {
            let img = read_pixmap(&resolve_image_path(manifest_path, &rec.image_path))?;
            predict_test_time(model, &img, *det, crop_size, resize_target)
        })
        .collect();
    let predictions = predictions?;
    let labels: Vec<usize> = manifest.records.iter().map(|r| r.label).collect();
    let top1 = topk_accuracy(&predictions, &labels, 1)?;
    let top5 = topk_accuracy(&predictions, &labels, 5.min(manifest.num_classes))?;
    Ok(EvalSummary {
        test_tag: format!("{}:{}", manifest.split, manifest.len()),
        samples: manifest.len(),
        top1,
        top5,
    })
}

/// cls-eval --manifest M --model F --out F [--detections F | --use-gt-boxes on]
fn cmd_cls_eval(opts: &Options) -> CmdResult {
    let manifest_path = opts.path("manifest")?;
    let model_path = opts.path("model")?;
    let out_path = opts.path("out")?;
    let model = load_classifier(&model_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let use_gt = opts.bool_flag("use-gt-boxes", false)?;
    let detections = detections_for(&manifest, opts.opt_path("detections").as_deref(), use_gt)?;
    let crop_size: usize = opts.parse_with("crop-size", 224)?;
    let resize_target: usize = opts.parse_with("resize-target", 256)?;
    eprintln!("cls-eval: {} images", manifest.len());
    let summary = evaluate_classifier(
        &model,
        &manifest,
        &manifest_path,
        &detections,
        crop_size,
        resize_target,
    )?;
    let report = format!(
        "test_tag={}\nsamples={}\ntop1={}\ntop5={}\n",
        summary.test_tag, summary.samples, summary.top1, summary.top5
    );
    fs::write(&out_path, report).map_err(|e| OcsError::io(out_path.display().to_string(), e))?;
    eprintln!(
        "cls-eval: top1 {:.4} top5 {:.4} -> {}",
        summary.top1,
        summary.top5,
        out_path.display()
    );
    Ok(())
}

/// sample-map --image F --out F [--box x0,y0,x1,y1 --resize-shorter N]
fn cmd_sample_map(opts: &Options) -> CmdResult {
    let image_path = opts.path("image")?;
    let out_path = opts.path("out")?;
    let sampler = sampler_config_from(opts)?;
    let resize_shorter: usize = opts.parse_with("resize-shorter", 256)?;

    let mut img = read_pixmap(&image_path)?;
    let mut detection = match opts.values.get("box") {
        None => None,
        Some(raw) => {
            let nums: Vec<i32> = raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| CmdError::Usage(format!("bad --box value {raw:?}")))
                })
                .collect::<std::result::Result<_, _>>()?;
            if nums.len() != 4 {
                return Err(CmdError::Usage("--box wants x0,y0,x1,y1".into()));
            }
            Some(Rect::new(nums[0], nums[1], nums[2], nums[3])?)
        }
    };
    if resize_shorter > 0 {
        let resized = img.resize_shorter_side(resize_shorter);
        detection = detection.map(|d| {
            d.scale_between(
                (img.width() as i32, img.height() as i32),
                (resized.width() as i32, resized.height() as i32),
            )
        });
        img = resized;
    }
    let dist = build_crop_distribution(img.width(), img.height(), detection, &sampler)?;
    let map = dist.probability_map();
    write_pixmap(&map.to_gray_image(), &out_path)?;
    eprintln!(
        "sample-map: {}x{} position grid ({}) -> {}",
        map.cols,
        map.rows,
        if dist.fallback_uniform() { "uniform fallback" } else { "overlap-weighted" },
        out_path.display()
    );
    Ok(())
}

/// benchmark --train M --test M --out F [--use-gt-boxes on |
/// --detections-train F --detections-test F] [--repeats N --seed N ...]
fn cmd_benchmark(opts: &Options) -> CmdResult {
    let train_path = opts.path("train")?;
    let test_path = opts.path("test")?;
    let out_path = opts.path("out")?;
    let repeats: usize = opts.parse_with("repeats", 5)?;
    let base_seed: u64 = opts.parse_with("seed", 0u64)?;
    let use_gt = opts.bool_flag("use-gt-boxes", false)?;

    let train_manifest = load_manifest(&train_path)?;
    let test_manifest = load_manifest(&test_path)?;

    let det_train = opts.opt_path("detections-train");
    let det_test = opts.opt_path("detections-test");
    if !use_gt && (det_train.is_none() || det_test.is_none()) {
        return Err(CmdError::Usage(
            "multinomial arm needs --use-gt-boxes on or both --detections-train and --detections-test"
                .into(),
        ));
    }
    let train_dets = detections_for(&train_manifest, det_train.as_deref(), use_gt)?;
    let test_dets = detections_for(&test_manifest, det_test.as_deref(), use_gt)?;

    let d = TrainConfig::default();
    let base_cfg = TrainConfig {
        mode: SamplerMode::Uniform,
        crops_per_image: opts.parse_with("crops-per-image", d.crops_per_image)?,
        epochs: opts.parse_with("epochs", d.epochs)?,
        learning_rate: opts.parse_with("lr", d.learning_rate)?,
        l2_penalty: opts.parse_with("l2", d.l2_penalty)?,
        rng_seed: 0,
        resize_target: opts.parse_with("resize-target", d.resize_target)?,
    };
    let sampler = sampler_config_from(opts)?;

    eprintln!("benchmark: loading {} train images", train_manifest.len());
    let train_images = load_images(&train_manifest, &train_path)?;
    let train_labels: Vec<usize> = train_manifest.records.iter().map(|r| r.label).collect();
    let no_dets: Vec<Option<Rect>> = vec![None; test_manifest.len()];

    let mut report = String::new();
    report.push_str(&format!(
        "# ocs benchmark repeats={repeats} seed={base_seed} train={} test={}\n",
        train_manifest.len(),
        test_manifest.len()
    ));
    report.push_str(&format!(
        "# full-scale reference: uniform {}/{} multinomial {}/{}\n",
        FULL_SCALE_REFERENCE[0].0,
        FULL_SCALE_REFERENCE[0].1,
        FULL_SCALE_REFERENCE[1].0,
        FULL_SCALE_REFERENCE[1].1
    ));

    let mut uniform_runs: Vec<EvalSummary> = Vec::with_capacity(repeats);
    let mut multinomial_runs: Vec<EvalSummary> = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let seed = derive_seed(base_seed, rep as u64);
        for (mode, runs) in [
            (SamplerMode::Uniform, &mut uniform_runs),
            (SamplerMode::Multinomial, &mut multinomial_runs),
        ] {
            let cfg = TrainConfig {
                mode,
                rng_seed: seed,
                ..base_cfg.clone()
            };
            eprintln!("benchmark: repeat {rep} training {mode:?} (seed {seed})");
            let (model, _) = classifier::train_classifier(
                &train_images,
                &train_labels,
                &train_dets,
                train_manifest.num_classes,
                &cfg,
                &sampler,
            )?;
            // The uniform pipeline stays detection-free at test time; the
            // multinomial pipeline uses the detection-guided 20-crop
            // ensemble.
            let eval_dets = if mode == SamplerMode::Uniform { &no_dets } else { &test_dets };
            let summary = evaluate_classifier(
                &model,
                &test_manifest,
                &test_path,
                eval_dets,
                sampler.crop_size,
                base_cfg.resize_target,
            )?;
            eprintln!(
                "benchmark: repeat {rep} {mode:?} top1 {:.4} top5 {:.4}",
                summary.top1, summary.top5
            );
            runs.push(summary);
        }
        report.push_str(&format!("# repeat {rep}\n"));
        report.push_str(&benchmark_table(&uniform_runs[rep], &multinomial_runs[rep])?);
    }

    let stats = |runs: &[EvalSummary]| -> (f64, f64, f64, f64) {
        let n = runs.len() as f64;
        let m1 = runs.iter().map(|r| r.top1).sum::<f64>() / n;
        let m5 = runs.iter().map(|r| r.top5).sum::<f64>() / n;
        let sd = |mean: f64, get: &dyn Fn(&EvalSummary) -> f64| -> f64 {
            if runs.len() < 2 {
                0.0
            } else {
                (runs.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        };
        (m1, sd(m1, &|r| r.top1), m5, sd(m5, &|r| r.top5))
    };
    let (u1, u1sd, u5, u5sd) = stats(&uniform_runs);
    let (m1, m1sd, m5, m5sd) = stats(&multinomial_runs);
    report.push_str("# summary over repeats (mean sd)\n");
    report.push_str("sampler\ttop1_mean\ttop1_sd\ttop5_mean\ttop5_sd\n");
    report.push_str(&format!("uniform\t{u1}\t{u1sd}\t{u5}\t{u5sd}\n"));
    report.push_str(&format!("multinomial\t{m1}\t{m1sd}\t{m5}\t{m5sd}\n"));
    report.push_str(&format!("delta\t{}\t\t{}\t\n", m1 - u1, m5 - u5));

    fs::write(&out_path, report).map_err(|e| OcsError::io(out_path.display().to_string(), e))?;
    eprintln!(
        "benchmark: uniform {u1:.4} vs multinomial {m1:.4} top-1 (delta {:+.4}) -> {}",
        m1 - u1,
        out_path.display()
    );
    Ok(())
}
