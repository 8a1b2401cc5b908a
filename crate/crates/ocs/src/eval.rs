//! Detection and classification metrics: average precision at a strict
//! overlap threshold, score-versus-size curves, and the sampling-strategy
//! comparison table.

use crate::detector::Detection;
use crate::geometry::Rect;
use crate::{OcsError, Result};

/// Accuracy reference recorded from the full-scale experiment this
/// benchmark format mirrors: (top-1, top-5) for uniform then multinomial
/// sampling. Documentation only, never computed here.
pub const FULL_SCALE_REFERENCE: [(f64, f64); 2] = [(0.816, 0.928), (0.893, 0.966)];

/// Precision-recall integration variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApInterpolation {
    /// Mean of the interpolated max precision at recalls 0, 0.1, ..., 1.0.
    ElevenPoint,
    /// Area under the interpolated precision envelope at every recall step.
    EveryPoint,
}

/// Average precision over per-image detections against one ground truth per
/// image.
///
/// Detections pool across images and sort by descending score (ties by
/// image index, then by within-image order). A detection is a true positive
/// when its IoU with its own image's ground truth reaches `iou_threshold`
/// and that ground truth is not already matched.
pub fn average_precision(
    detections: &[Vec<Detection>],
    gts: &[Rect],
    iou_threshold: f64,
    interp: ApInterpolation,
) -> Result<f64> {
    if gts.is_empty() {
        return Err(OcsError::Config("no ground truths".into()));
    }
    if detections.len() != gts.len() {
        return Err(OcsError::Config(format!(
            "detections for {} images but {} ground truths",
            detections.len(),
            gts.len()
        )));
    }

    let mut pooled: Vec<(usize, usize, f64)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            pooled.push((img, j, d.score));
        }
    }
    pooled.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut gt_matched = vec![false; gts.len()];
    let total_gts = gts.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    // (recall, precision) after each pooled detection.
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pooled.len());
    for (img, j, _) in pooled {
        let det = &detections[img][j];
        if !gt_matched[img] && det.rect.iou(&gts[img]) >= iou_threshold {
            gt_matched[img] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / total_gts, tp as f64 / (tp + fp) as f64));
    }

    let max_precision_at = |recall: f64| -> f64 {
        curve
            .iter()
            .filter(|(r, _)| *r >= recall)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    };

    let ap = match interp {
        ApInterpolation::ElevenPoint => {
            (0..=10).map(|i| max_precision_at(i as f64 / 10.0)).sum::<f64>() / 11.0
        }
        ApInterpolation::EveryPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for &(r, _) in &curve {
                if r > prev_recall {
                    ap += (r - prev_recall) * max_precision_at(r);
                    prev_recall = r;
                }
            }
            ap
        }
    };
    Ok(ap)
}

/// One quantile bin of the score-versus-size analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeBin {
    pub count: usize,
    pub mean_score: f64,
    pub min_area: i64,
    pub max_area: i64,
}

/// Mean detection score per ground-truth-area quantile bin.
///
/// Ground truths sort by pixel area (ties by image index) and split into
/// `bins` equal-count chunks (sizes within one of each other). Images
/// without a detection are skipped; when fewer scored images than bins
/// exist, only that many bins come back — absent, never zero-filled.
pub fn score_vs_size_curve(
    gts: &[Rect],
    detections: &[Option<Detection>],
    bins: usize,
) -> Result<Vec<SizeBin>> {
    if bins == 0 {
        return Err(OcsError::Config("bins must be positive".into()));
    }
    if gts.len() != detections.len() {
        return Err(OcsError::Config("gts and detections must align".into()));
    }
    let mut scored: Vec<(i64, f64)> = gts
        .iter()
        .zip(detections)
        .filter_map(|(gt, det)| det.as_ref().map(|d| (gt.area(), d.score)))
        .collect();
    if scored.is_empty() {
        return Ok(Vec::new());
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0));

    let n = scored.len();
    let bins = bins.min(n);
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0usize;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        let chunk = &scored[start..start + size];
        out.push(SizeBin {
            count: chunk.len(),
            mean_score: chunk.iter().map(|(_, s)| s).sum::<f64>() / chunk.len() as f64,
            min_area: chunk.first().expect("non-empty").0,
            max_area: chunk.last().expect("non-empty").0,
        });
        start += size;
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Accuracy summary of one classifier run over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Identity of the test set the run was scored on.
    pub test_tag: String,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Render the uniform-versus-multinomial comparison as a tab-separated
/// table with a trailing delta row. Values print in shortest round-trip
/// form, so parsing the table recovers them exactly.
pub fn benchmark_table(uniform: &EvalSummary, multinomial: &EvalSummary) -> Result<String> {
    if uniform.test_tag != multinomial.test_tag || uniform.samples != multinomial.samples {
        return Err(OcsError::Config(format!(
            "results computed on different test sets: {} ({}) vs {} ({})",
            uniform.test_tag, uniform.samples, multinomial.test_tag, multinomial.samples
        )));
    }
    let mut out = String::new();
    out.push_str("sampler\ttop1\ttop5\n");
    out.push_str(&format!("uniform\t{}\t{}\n", uniform.top1, uniform.top5));
    out.push_str(&format!(
        "multinomial\t{}\t{}\n",
        multinomial.top1, multinomial.top5
    ));
    out.push_str(&format!(
        "delta\t{}\t{}\n",
        multinomial.top1 - uniform.top1,
        multinomial.top5 - uniform.top5
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rect(x0: i32, y0: i32, x1: i32, y1: i32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    fn det(r: Rect, score: f64) -> Detection {
        Detection { rect: r, score }
    }

    /// Five images, one gt each; scores descending give TP FP TP TP FP.
    fn hand_toy() -> (Vec<Vec<Detection>>, Vec<Rect>) {
        let gt = rect(0, 0, 100, 100);
        let gts = vec![gt; 5];
        let hit = rect(0, 0, 100, 95); // iou 0.95
        let miss = rect(0, 0, 30, 30); // iou 0.09
        let detections = vec![
            vec![det(hit, 0.9)],
            vec![det(miss, 0.8)],
            vec![det(hit, 0.7)],
            vec![det(hit, 0.6)],
            vec![det(miss, 0.5)],
        ];
        (detections, gts)
    }

    #[test]
    fn hand_computed_eleven_point_ap() {
        let (detections, gts) = hand_toy();
        let ap = average_precision(&detections, &gts, 0.8, ApInterpolation::ElevenPoint).unwrap();
        // Recall points 0, 0.1, 0.2 see precision 1.0; 0.3 through 0.6 see
        // 0.75; nothing reaches 0.7: (3*1 + 4*0.75) / 11.
        assert!((ap - 6.0 / 11.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn perfect_and_all_miss_ap() {
        let gt = rect(0, 0, 50, 50);
        let gts = vec![gt; 4];
        let perfect: Vec<Vec<Detection>> =
            (0..4).map(|i| vec![det(gt, 1.0 - i as f64 * 0.1)]).collect();
        for interp in [ApInterpolation::ElevenPoint, ApInterpolation::EveryPoint] {
            assert_eq!(average_precision(&perfect, &gts, 0.8, interp).unwrap(), 1.0);
        }
        let all_miss: Vec<Vec<Detection>> = (0..4)
            .map(|i| vec![det(rect(200, 200, 210, 210), 0.9 - i as f64 * 0.1)])
            .collect();
        for interp in [ApInterpolation::ElevenPoint, ApInterpolation::EveryPoint] {
            assert_eq!(average_precision(&all_miss, &gts, 0.8, interp).unwrap(), 0.0);
        }
        assert!(average_precision(&[], &[], 0.8, ApInterpolation::ElevenPoint).is_err());
    }

    fn random_eval_set(
        rng: &mut StdRng,
        n: usize,
    ) -> (Vec<Vec<Detection>>, Vec<Rect>) {
        let gts: Vec<Rect> = (0..n)
            .map(|_| {
                let x0 = rng.random_range(0..50);
                let y0 = rng.random_range(0..50);
                rect(x0, y0, x0 + rng.random_range(20..60), y0 + rng.random_range(20..60))
            })
            .collect();
        let detections: Vec<Vec<Detection>> = gts
            .iter()
            .map(|gt| {
                let jitter = rng.random_range(0..20);
                let r = rect(
                    gt.x0() + jitter,
                    gt.y0(),
                    gt.x1() + jitter,
                    gt.y1(),
                );
                vec![det(r, rng.random_range(0.0..1.0))]
            })
            .collect();
        (detections, gts)
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let mut rng = StdRng::seed_from_u64(5);
        let (mut detections, gts) = random_eval_set(&mut rng, 60);
        let before =
            average_precision(&detections, &gts, 0.7, ApInterpolation::ElevenPoint).unwrap();
        for d in detections.iter_mut().flatten() {
            d.score = (d.score * 3.0).exp() + 7.0;
        }
        let after =
            average_precision(&detections, &gts, 0.7, ApInterpolation::ElevenPoint).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn looser_threshold_never_lowers_ap() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..20 {
            let (detections, gts) = random_eval_set(&mut rng, 40);
            let mut prev = f64::INFINITY;
            for thr in [0.5, 0.6, 0.7, 0.8, 0.9] {
                let ap =
                    average_precision(&detections, &gts, thr, ApInterpolation::ElevenPoint)
                        .unwrap();
                assert!(ap <= prev + 1e-12, "ap rose from {prev} to {ap} at {thr}");
                prev = ap;
            }
        }
    }

    #[test]
    fn size_bins_partition_with_equal_counts() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 103;
        let gts: Vec<Rect> = (0..n)
            .map(|_| {
                let s = rng.random_range(5..80);
                rect(0, 0, s, s)
            })
            .collect();
        let detections: Vec<Option<Detection>> = gts
            .iter()
            .map(|_| Some(det(rect(0, 0, 10, 10), rng.random_range(0.0..1.0))))
            .collect();
        let bins = score_vs_size_curve(&gts, &detections, 5).unwrap();
        assert_eq!(bins.len(), 5);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
        let min = bins.iter().map(|b| b.count).min().unwrap();
        let max = bins.iter().map(|b| b.count).max().unwrap();
        assert!(max - min <= 1, "quantile bins within one: {bins:?}");
        for w in bins.windows(2) {
            assert!(w[0].max_area <= w[1].min_area, "bins ordered by area");
        }
    }

    #[test]
    fn single_bin_means_all_scores() {
        let gts = vec![rect(0, 0, 10, 10); 4];
        let detections: Vec<Option<Detection>> = (0..4)
            .map(|i| Some(det(rect(0, 0, 5, 5), i as f64)))
            .collect();
        let bins = score_vs_size_curve(&gts, &detections, 1).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 4);
        assert!((bins[0].mean_score - 1.5).abs() < 1e-12);

        // Missing detections are skipped, not zero-filled.
        let sparse: Vec<Option<Detection>> = vec![Some(det(rect(0, 0, 5, 5), 2.0)), None, None, None];
        let bins = score_vs_size_curve(&gts, &sparse, 3).unwrap();
        assert_eq!(bins.len(), 1);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]);
        assert!((rho - 0.9).abs() < 1e-12);
    }

    #[test]
    fn benchmark_table_round_trip_and_delta() {
        let uniform = EvalSummary {
            test_tag: "test:500".into(),
            samples: 500,
            top1: 0.742,
            top5: 0.931,
        };
        let multinomial = EvalSummary {
            test_tag: "test:500".into(),
            samples: 500,
            top1: 0.858,
            top5: 0.97,
        };
        let table = benchmark_table(&uniform, &multinomial).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "sampler\ttop1\ttop5");
        let parse = |line: &str| -> (f64, f64) {
            let f: Vec<&str> = line.split('\t').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        };
        assert_eq!(parse(lines[1]), (0.742, 0.931));
        assert_eq!(parse(lines[2]), (0.858, 0.97));
        let (d1, d5) = parse(lines[3]);
        assert_eq!(d1, 0.858 - 0.742);
        assert_eq!(d5, 0.97 - 0.931);

        let same = benchmark_table(&uniform, &uniform).unwrap();
        let (d1, d5) = parse(same.lines().last().unwrap());
        assert_eq!((d1, d5), (0.0, 0.0));

        let other = EvalSummary {
            test_tag: "other:10".into(),
            samples: 10,
            top1: 0.5,
            top5: 0.9,
        };
        assert!(benchmark_table(&uniform, &other).is_err());
    }
}
