//! Cascade training: stagewise discrete AdaBoost over randomly drawn
//! regionlet candidates, with hard negative mining between stages.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    generate_proposals, partition_training_samples, CascadeModel, CascadeStage, FeatureContext,
    FeatureKind, ProposalConfig, RegionletSpec, WeakClassifier,
};
use crate::geometry::{ImageBuffer, Rect};
use crate::{OcsError, Result};

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub stages: usize,
    pub weak_per_stage: usize,
    /// Fresh random regionlet candidates drawn each boosting round.
    pub candidates_per_round: usize,
    /// Regionlets per candidate, 1 to this cap.
    pub max_regionlets: usize,
    /// Negatives sampled per image for the first stage.
    pub negatives_per_image: usize,
    /// Cap on the mined negative set between stages.
    pub max_negatives: usize,
    /// Windows kept per image in the hard-negative mining pool.
    pub mining_pool_per_image: usize,
    /// When positive, the per-round stump search scores candidates on a
    /// weight-proportional subsample of this size; the chosen stump's error
    /// and weights still use the full set. 0 searches exhaustively.
    pub search_subsample: usize,
    /// Stage rejection threshold = margin * min positive running score.
    pub threshold_margin: f64,
    pub rng_seed: u64,
    pub proposals: ProposalConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            stages: 4,
            weak_per_stage: 50,
            candidates_per_round: 500,
            max_regionlets: 3,
            negatives_per_image: 8,
            max_negatives: 20_000,
            mining_pool_per_image: 150,
            search_subsample: 0,
            threshold_margin: 0.99,
            rng_seed: 0,
            proposals: ProposalConfig::default(),
        }
    }
}

/// Per-round training telemetry.
#[derive(Debug, Clone)]
pub struct RoundDiagnostics {
    pub stage: usize,
    pub round: usize,
    /// Weighted error of the selected stump.
    pub weighted_error: f64,
    /// Running product of 2*sqrt(eps*(1-eps)); upper-bounds the stage
    /// training error and never increases.
    pub error_bound: f64,
    /// 0/1 error of the stage-so-far strong classifier on the stage set.
    pub train_error: f64,
    /// Boosting weight total after renormalization.
    pub weight_sum: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainDiagnostics {
    pub rounds: Vec<RoundDiagnostics>,
    pub positives: usize,
    pub initial_negatives: usize,
}

/// A training window: image index plus rect.
#[derive(Debug, Clone, Copy)]
struct TrainWindow {
    image: u32,
    rect: Rect,
}

/// Train a cascade on `(image, ground-truth box)` pairs.
///
/// Proposals are partitioned against each image's ground truth (IoU above
/// 0.7 positive, below 0.3 negative). Each stage runs discrete AdaBoost with
/// two-output stumps over fresh random candidates per round; its rejection
/// threshold is set just under the weakest positive's running score. Between
/// stages the negative set is rebuilt from windows the current cascade still
/// accepts.
pub fn train_cascade(
    images: &[(ImageBuffer, Rect)],
    cfg: &DetectorTrainConfig,
) -> Result<(CascadeModel, TrainDiagnostics)> {
    if images.is_empty() {
        return Err(OcsError::Config("no training images".into()));
    }
    if cfg.stages == 0 || cfg.weak_per_stage == 0 || cfg.candidates_per_round == 0 {
        return Err(OcsError::Config("stages, weak_per_stage, candidates_per_round must be positive".into()));
    }
    let contexts: Vec<FeatureContext> = images
        .par_iter()
        .map(|(img, _)| FeatureContext::new(img))
        .collect();

    let mut positives: Vec<TrainWindow> = Vec::new();
    let mut negative_pool: Vec<TrainWindow> = Vec::new();
    let mut per_image_negatives: Vec<Vec<usize>> = Vec::with_capacity(images.len());
    for (i, (img, gt)) in images.iter().enumerate() {
        let proposals = generate_proposals(img, &cfg.proposals);
        let part = partition_training_samples(&proposals, gt);
        for r in part.positives {
            positives.push(TrainWindow {
                image: i as u32,
                rect: r,
            });
        }
        let mut mine = Vec::new();
        let keep_every = (part.negatives.len() / cfg.mining_pool_per_image.max(1)).max(1);
        for (j, r) in part.negatives.into_iter().enumerate() {
            if j % keep_every != 0 {
                continue;
            }
            mine.push(negative_pool.len());
            negative_pool.push(TrainWindow {
                image: i as u32,
                rect: r,
            });
        }
        per_image_negatives.push(mine);
    }
    if positives.is_empty() {
        return Err(OcsError::Config(
            "no positive windows: no proposal reaches 0.7 IoU with any ground truth".into(),
        ));
    }
    if negative_pool.is_empty() {
        return Err(OcsError::Config("no negative windows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // First-stage negatives: a per-image sample of the pool.
    let mut active_negatives: Vec<TrainWindow> = Vec::new();
    for mine in &per_image_negatives {
        let take = cfg.negatives_per_image.min(mine.len());
        let mut picked = std::collections::HashSet::new();
        while picked.len() < take {
            picked.insert(mine[rng.random_range(0..mine.len())]);
        }
        let mut picked: Vec<usize> = picked.into_iter().collect();
        picked.sort_unstable();
        active_negatives.extend(picked.into_iter().map(|i| negative_pool[i]));
    }

    let mut diagnostics = TrainDiagnostics {
        positives: positives.len(),
        initial_negatives: active_negatives.len(),
        ..TrainDiagnostics::default()
    };

    let mut model = CascadeModel {
        stages: Vec::new(),
        pool: FeatureKind::pool_description().to_string(),
        metadata: format!("images {} seed {}", images.len(), cfg.rng_seed),
    };
    // Cumulative scores of positives across stages, for stage thresholds.
    let mut positive_running: Vec<f64> = vec![0.0; positives.len()];

    for stage_idx in 0..cfg.stages {
        if active_negatives.is_empty() {
            return Err(OcsError::Config(format!(
                "stage {stage_idx}: negative set is empty"
            )));
        }
        let stage_weak = boost_stage(
            &contexts,
            &positives,
            &active_negatives,
            cfg,
            stage_idx,
            &mut rng,
            &mut diagnostics,
        );

        // Threshold from the weakest positive after this stage.
        for (running, win) in positive_running.iter_mut().zip(&positives) {
            for w in &stage_weak {
                *running += w.output(&contexts[win.image as usize], &win.rect);
            }
        }
        let min_positive = positive_running
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        model.stages.push(CascadeStage {
            weak: stage_weak,
            reject_threshold: cfg.threshold_margin * min_positive,
        });

        // Hard negative mining for the next stage: windows the cascade
        // still accepts, highest scores first.
        if stage_idx + 1 < cfg.stages {
            let mut scored: Vec<(usize, f64, bool)> = negative_pool
                .par_iter()
                .enumerate()
                .map(|(i, win)| {
                    let (score, rejected) =
                        model.score_window(&contexts[win.image as usize], &win.rect);
                    (i, score, rejected.is_none())
                })
                .collect();
            scored.sort_by(|a, b| {
                b.2.cmp(&a.2)
                    .then(b.1.partial_cmp(&a.1).expect("finite scores"))
                    .then(a.0.cmp(&b.0))
            });
            let survivors = scored.iter().filter(|s| s.2).count();
            // When the cascade rejects everything, keep the closest calls so
            // the stage count can still match the configuration.
            let keep = survivors.clamp(active_negatives.len().min(64), cfg.max_negatives);
            active_negatives = scored
                .into_iter()
                .take(keep)
                .map(|(i, _, _)| negative_pool[i])
                .collect();
        }
    }

    Ok((model, diagnostics))
}

/// One stage of discrete AdaBoost. Returns the stage's weak classifiers and
/// appends per-round diagnostics.
fn boost_stage(
    contexts: &[FeatureContext],
    positives: &[TrainWindow],
    negatives: &[TrainWindow],
    cfg: &DetectorTrainConfig,
    stage_idx: usize,
    rng: &mut ChaCha8Rng,
    diagnostics: &mut TrainDiagnostics,
) -> Vec<WeakClassifier> {
    let n = positives.len() + negatives.len();
    let windows: Vec<TrainWindow> = positives.iter().chain(negatives).copied().collect();
    let labels: Vec<f64> = (0..n)
        .map(|i| if i < positives.len() { 1.0 } else { -1.0 })
        .collect();
    let mut weights = vec![1.0 / n as f64; n];
    let mut running = vec![0.0f64; n];
    let mut bound = 1.0f64;
    let mut stage = Vec::with_capacity(cfg.weak_per_stage);

    // Precompute window log-areas: a quarter of all regionlets read only
    // the window scale, and that value never changes within a stage.
    let ln_areas: Vec<f64> = windows.iter().map(|w| (w.rect.area() as f64).ln()).collect();
    let eval_candidate = |regs: &[RegionletSpec], subset: &[u32], values: &mut Vec<f64>| {
        values.clear();
        values.extend(subset.iter().map(|&i| {
            let w = &windows[i as usize];
            let mut best = f64::NEG_INFINITY;
            for spec in regs {
                let v = if spec.feature == FeatureKind::LogArea {
                    ln_areas[i as usize]
                } else {
                    contexts[w.image as usize].extract(&w.rect, spec)
                };
                if v > best {
                    best = v;
                }
            }
            best
        }));
    };
    let identity: Vec<u32> = (0..n as u32).collect();

    for round in 0..cfg.weak_per_stage {
        let candidates: Vec<Vec<RegionletSpec>> = (0..cfg.candidates_per_round)
            .map(|_| random_regionlet_set(cfg.max_regionlets, rng))
            .collect();

        // Candidate search runs either exhaustively or on a fresh
        // weight-proportional subsample; the winner's error and the weight
        // update always use the full set.
        let (search_set, search_labels, search_weights): (Vec<u32>, Vec<f64>, Vec<f64>) =
            if cfg.search_subsample > 0 && n > cfg.search_subsample {
                let m = cfg.search_subsample;
                let mut cdf = Vec::with_capacity(n);
                let mut acc = 0.0;
                for &w in &weights {
                    acc += w;
                    cdf.push(acc);
                }
                let idx: Vec<u32> = (0..m)
                    .map(|_| {
                        let u: f64 = rng.random_range(0.0..acc);
                        (cdf.partition_point(|&c| c <= u).min(n - 1)) as u32
                    })
                    .collect();
                let lab = idx.iter().map(|&i| labels[i as usize]).collect();
                (idx, lab, vec![1.0 / m as f64; m])
            } else {
                (identity.clone(), labels.clone(), weights.clone())
            };

        // Best stump per candidate in parallel; argmin of weighted error
        // with ties to the lowest candidate index keeps this deterministic.
        let best = candidates
            .par_iter()
            .enumerate()
            .map_init(
                || Vec::with_capacity(search_set.len()),
                |values, (ci, regs)| {
                    eval_candidate(regs, &search_set, values);
                    let (eps, threshold, polarity) =
                        best_stump(values, &search_labels, &search_weights);
                    (ci, eps, threshold, polarity)
                },
            )
            .reduce(
                || (usize::MAX, f64::INFINITY, 0.0, 1.0),
                |a, b| {
                    if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) {
                        b
                    } else {
                        a
                    }
                },
            );
        let (ci, _, threshold, mut polarity) = best;

        // True weighted error of the chosen stump on the full set.
        let mut winner_values = Vec::with_capacity(n);
        eval_candidate(&candidates[ci], &identity, &mut winner_values);
        let mut err = 0.0;
        for i in 0..n {
            let pred = if winner_values[i] > threshold { polarity } else { -polarity };
            if pred != labels[i] {
                err += weights[i];
            }
        }
        if err > 0.5 {
            polarity = -polarity;
            err = 1.0 - err;
        }
        let eps = err.clamp(1e-12, 0.5 - 1e-12);
        let alpha = 0.5 * ((1.0 - eps) / eps).ln();
        let weak = WeakClassifier {
            regionlets: candidates[ci].clone(),
            threshold,
            alpha_plus: alpha * polarity,
            alpha_minus: -alpha * polarity,
        };

        // Weight update, renormalization, and running scores.
        let mut sum = 0.0;
        for i in 0..n {
            let out = if winner_values[i] > weak.threshold {
                weak.alpha_plus
            } else {
                weak.alpha_minus
            };
            running[i] += out;
            weights[i] *= (-labels[i] * out).exp();
            sum += weights[i];
        }
        for w in &mut weights {
            *w /= sum;
        }

        bound *= 2.0 * (eps * (1.0 - eps)).sqrt();
        let train_error = running
            .iter()
            .zip(&labels)
            .filter(|(s, &y)| (if **s > 0.0 { 1.0 } else { -1.0 }) != y)
            .count() as f64
            / n as f64;
        diagnostics.rounds.push(RoundDiagnostics {
            stage: stage_idx,
            round,
            weighted_error: eps,
            error_bound: bound,
            train_error,
            weight_sum: weights.iter().sum(),
        });
        stage.push(weak);
    }
    stage
}

/// Draw a random regionlet set: 1..=cap regionlets, each with a relative
/// rect no smaller than 1/8 per side and a random feature id.
fn random_regionlet_set(cap: usize, rng: &mut ChaCha8Rng) -> Vec<RegionletSpec> {
    let count = rng.random_range(1..=cap.max(1));
    (0..count)
        .map(|_| {
            let w: f64 = rng.random_range(0.125..=1.0);
            let h: f64 = rng.random_range(0.125..=1.0);
            let x0: f64 = rng.random_range(0.0..=1.0 - w);
            let y0: f64 = rng.random_range(0.0..=1.0 - h);
            let feature = FeatureKind::from_id(rng.random_range(0..FeatureKind::COUNT))
                .expect("id in range");
            RegionletSpec::new(x0, y0, x0 + w, y0 + h, feature).expect("valid by construction")
        })
        .collect()
}

/// Exhaustive weighted stump search over one feature column.
///
/// Returns `(weighted_error, threshold, polarity)` where polarity +1 means
/// "predict positive above the threshold". Candidate thresholds sit below
/// the minimum, between distinct values, and above the maximum; the scan
/// keeps the first optimum for determinism.
pub(crate) fn best_stump(values: &[f64], labels: &[f64], weights: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    // Order-preserving key: flip the sign bit for positives, all bits for
    // negatives. Sorting packed (key, index) u128s beats a comparator on
    // f64s and keeps equal values grouped.
    let mut packed: Vec<u128> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bits = v.to_bits();
            let key = if bits >> 63 == 0 { bits ^ (1 << 63) } else { !bits };
            ((key as u128) << 64) | i as u128
        })
        .collect();
    packed.sort_unstable();
    let order: Vec<usize> = packed.iter().map(|&p| p as u64 as usize).collect();

    // err(theta) for polarity +1 with theta below everything: all predicted
    // positive, so every negative is wrong.
    let mut err: f64 = labels
        .iter()
        .zip(weights)
        .filter(|(&y, _)| y < 0.0)
        .map(|(_, &w)| w)
        .sum();
    let mut best_err = err;
    let mut best_thr = values[order[0]] - 1.0;
    let mut worst_err = err;
    let mut worst_thr = best_thr;

    let mut i = 0;
    while i < n {
        // Move theta past the whole group of equal values at once.
        let v = values[order[i]];
        while i < n && values[order[i]] == v {
            let idx = order[i];
            // idx flips from predicted +1 to predicted -1
            if labels[idx] > 0.0 {
                err += weights[idx];
            } else {
                err -= weights[idx];
            }
            i += 1;
        }
        let thr = if i < n {
            (v + values[order[i]]) / 2.0
        } else {
            v + 1.0
        };
        if err < best_err {
            best_err = err;
            best_thr = thr;
        }
        if err > worst_err {
            worst_err = err;
            worst_thr = thr;
        }
    }

    // Flipping polarity turns error e into total_weight - e.
    let total: f64 = weights.iter().sum();
    if total - worst_err < best_err {
        (total - worst_err, worst_thr, -1.0)
    } else {
        (best_err, best_thr, 1.0)
    }
}
