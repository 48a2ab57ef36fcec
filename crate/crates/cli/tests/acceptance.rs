//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use iodkit::dataset::{Annotation, CategoryInfo, Dataset, Image};
use iodkit::distillation::{build_distilled, PseudoConfig, PseudoStrategy};
use iodkit::exemplar::{greedy_select, kl_divergence, marginal, phase_budget, random_select, MarginalUnit};
use iodkit::geometry::BoundingBox;
use iodkit::labels::{one_hot, pad_to_n, Category, ClassDistribution, LabeledSet, Origin, Target};
use iodkit::losses::{detr_loss, dkd_loss, LossConfig};
use iodkit::matching::{build_cost, hungarian, CostMatrix};
use iodkit::metrics::{ap_at, evaluate, Detection, EvalParams};
use iodkit::prediction::Predictions;
use iodkit::protocol::{multi_phase_plan, split, ProtocolMode};
use iodkit::synth::SynthBenchmark;
use iodkit::trainer::{run_benchmark, Mode, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Matching.

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    for case in 0..1000 {
        let n = rng.random_range(1..=7);
        // Half the matrices are small integers, so ties and exact sums are common.
        let integer = case % 2 == 0;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        let total = |sigma: &[usize]| -> f64 { (0..n).map(|i| rows[i][sigma[i]]).sum() };
        let best = perms[n].iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        let cost = CostMatrix::from_rows(rows.clone()).map_err(|e| e.to_string())?;
        let sigma = hungarian(&cost).map_err(|e| e.to_string())?.sigma;
        check(total(&sigma) == best, || format!("case {case}: {} vs {best}", total(&sigma)))?;
    }
    Ok("1000 matrices, N <= 7".into())
}

// 2. Gradients.

fn random_preds(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Predictions {
    let logits = (0..n).map(|_| (0..=c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let boxes = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-2.0..0.0),
                rng.random_range(-2.0..0.0),
            ]
        })
        .collect();
    Predictions::new(logits, boxes).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> BoundingBox {
    BoundingBox::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(lo..hi), rng.random_range(lo..hi))
        .unwrap()
}

fn soft(rng: &mut ChaCha8Rng, c: usize) -> ClassDistribution {
    let mut p: Vec<f64> = (0..=c).map(|_| rng.random_range(0.0..1.0)).collect();
    p[rng.random_range(0..c)] += 1.5;
    let s: f64 = p.iter().sum();
    ClassDistribution::new(p.iter().map(|x| x / s).collect()).unwrap()
}

fn perturbed(preds: &Predictions, j: usize, k: usize, is_box: bool, h: f64) -> Predictions {
    let mut logits = preds.logits().to_vec();
    let mut boxes = preds.box_raw().to_vec();
    if is_box {
        boxes[j][k] += h;
    } else {
        logits[j][k] += h;
    }
    Predictions::new(logits, boxes).unwrap()
}

/// Worst relative error of analytic against central differences.
fn worst_error(
    preds: &Predictions,
    grad_logits: &[Vec<f64>],
    grad_box: &[[f64; 4]],
    f: &dyn Fn(&Predictions) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut cmp = |g: f64, p: &Predictions, m: &Predictions| {
        let fd = (f(p) - f(m)) / (2.0 * h);
        let scale = g.abs().max(fd.abs());
        // Both below 1e-8 counts as agreement: relative error is undefined at zero.
        if scale > 1e-8 {
            worst = worst.max((fd - g).abs() / scale);
        }
    };
    for j in 0..preds.len() {
        for (k, &g) in grad_logits[j].iter().enumerate() {
            cmp(g, &perturbed(preds, j, k, false, h), &perturbed(preds, j, k, false, -h));
        }
        for (k, &g) in grad_box[j].iter().enumerate() {
            cmp(g, &perturbed(preds, j, k, true, h), &perturbed(preds, j, k, true, -h));
        }
    }
    worst
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(1..=6);
        let c = rng.random_range(1..=5);
        let preds = random_preds(&mut rng, n, c);
        // Ground truth for the DETR loss; ground truth plus soft pseudo labels for DKD.
        let k = rng.random_range(0..=n);
        let mut items: Vec<Target> = Vec::new();
        for i in 0..k {
            let b = random_box(&mut rng, 0.1, 0.5);
            items.push(if i % 2 == 0 {
                one_hot(Category::Object(rng.random_range(0..c)), b, c).unwrap()
            } else {
                Target {
                    dist: soft(&mut rng, c),
                    bbox: b,
                    origin: Origin::Pseudo,
                }
            });
        }
        let gt: Vec<Target> = items.iter().filter(|t| t.origin == Origin::GroundTruth).cloned().collect();
        let gt = pad_to_n(gt, n, c).unwrap();
        let distilled = pad_to_n(items, n, c).unwrap();

        let sigma = hungarian(&build_cost(&gt, &preds.to_labeled(), cfg.gamma_iou, cfg.gamma_l1).unwrap()).unwrap();
        let r = detr_loss(&preds, &gt, &sigma, &cfg).unwrap();
        let e1 = worst_error(&preds, &r.grad_logits, &r.grad_box_raw, &|p| {
            detr_loss(p, &gt, &sigma, &cfg).unwrap().total
        });
        // The matching is piecewise constant, so differences are taken at the fixed assignment.
        let (sigma_d, rd) = dkd_loss(&preds, &distilled, &cfg).unwrap();
        let e2 = worst_error(&preds, &rd.grad_logits, &rd.grad_box_raw, &|p| {
            detr_loss(p, &distilled, &sigma_d, &cfg).unwrap().total
        });
        check(e1 < 1e-4 && e2 < 1e-4, || format!("case {case}: detr {e1:.2e}, dkd {e2:.2e}"))?;
        worst = worst.max(e1).max(e2);
    }
    Ok(format!("50 instances, worst relative error {worst:.2e}"))
}

// 3. Distillation.

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx, cy, w, h).unwrap()
}

fn pred(probs: Vec<f64>, bbox: BoundingBox) -> Target {
    Target {
        dist: ClassDistribution::new(probs).unwrap(),
        bbox,
        origin: Origin::Prediction,
    }
}

fn corner_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let ih = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let union = a.w * a.h + b.w * b.h - iw * ih;
    if union > 0.0 {
        iw * ih / union
    } else {
        0.0
    }
}

fn distill_fixture() -> Result<(), String> {
    let gt1 = one_hot(Category::Object(0), bx(0.5, 0.5, 0.5, 0.5), 3).unwrap();
    let gt2 = one_hot(Category::Object(2), bx(0.8, 0.2, 0.2, 0.2), 3).unwrap();
    let gt = pad_to_n(vec![gt1.clone(), gt2.clone()], 6, 3).unwrap();
    let a = pred(vec![0.05, 0.9, 0.0, 0.05], bx(0.2, 0.2, 0.1, 0.1));
    let b = pred(vec![0.8, 0.1, 0.0, 0.1], bx(0.5, 0.5, 0.5, 0.375));
    let c = pred(vec![0.0, 0.1, 0.6, 0.3], bx(0.2, 0.8, 0.2, 0.2));
    let bg = pred(vec![0.1, 0.1, 0.1, 0.7], bx(0.5, 0.5, 0.2, 0.2));
    let old = LabeledSet::new(vec![bg.clone(), b, bg.clone(), a.clone(), c, bg]).unwrap();
    let cfg = PseudoConfig {
        strategy: PseudoStrategy::TopK(2),
        lambda: 0.7,
    };
    let d = build_distilled(&gt, &old, &cfg, 0.0).map_err(|e| e.to_string())?;
    let items = d.targets.items();
    let ok = d.pseudo_queries == [3]
        && items[0] == gt1
        && items[1] == gt2
        && items[2].dist == a.dist
        && items[2].bbox == a.bbox
        && items[3..].iter().all(|t| *t == Target::background(3));
    check(ok, || format!("fixture: got queries {:?}", d.pseudo_queries))
}

fn distillation() -> Outcome {
    distill_fixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.random_range(lo..=hi) as f64 / 16.0;
    let cases = 10_000;
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let c = rng.random_range(1..=5);
        let mut gt_items: Vec<Target> = Vec::new();
        for _ in 0..rng.random_range(0..=n) {
            let b = bx(grid(&mut rng, 4, 12), grid(&mut rng, 4, 12), grid(&mut rng, 1, 8), grid(&mut rng, 1, 8));
            let t = one_hot(Category::Object(rng.random_range(0..c)), b, c).unwrap();
            if !gt_items.contains(&t) {
                gt_items.push(t);
            }
        }
        let gt = pad_to_n(gt_items, n, c).unwrap();
        let old_items: Vec<Target> = (0..n)
            .map(|_| {
                let mut p: Vec<f64> = (0..=c).map(|_| rng.random::<f64>().powi(2)).collect();
                if rng.random_bool(0.4) {
                    p[rng.random_range(0..c)] += 2.0;
                }
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                let r = 1.0 - p.iter().sum::<f64>();
                p[c] += r;
                let b = bx(grid(&mut rng, 4, 12), grid(&mut rng, 4, 12), grid(&mut rng, 1, 8), grid(&mut rng, 1, 8));
                pred(p, b)
            })
            .collect();
        let old = LabeledSet::new(old_items).unwrap();
        let k = rng.random_range(0..=n);
        let strategy = if rng.random_bool(0.5) {
            PseudoStrategy::TopK(k)
        } else {
            PseudoStrategy::Threshold(rng.random_range(0..=10) as f64 / 10.0)
        };
        let lambda = [0.0, 0.3, 0.5, 0.7, 1.0][rng.random_range(0..5)];
        let cfg = PseudoConfig { strategy, lambda };
        let d = build_distilled(&gt, &old, &cfg, 0.0).map_err(|e| e.to_string())?;

        let fg = |t: &Target| {
            let p = t.dist.probs();
            p[..c].iter().cloned().fold(f64::MIN, f64::max) > p[c]
        };
        let f: Vec<usize> = (0..n).filter(|&j| fg(old.get(j))).collect();
        let gt_fg: Vec<&Target> = gt.foreground().collect();
        let items = d.targets.items();
        let fail = |what: &str| format!("case {case}: {what}");
        check(items.len() == n, || fail("length"))?;
        check(d.pseudo_queries.iter().all(|j| f.contains(j)), || fail("Q within F"))?;
        if let PseudoStrategy::TopK(k) = strategy {
            check(d.pseudo_queries.len() <= k, || fail("|Q| <= K"))?;
        }
        check(gt_fg.iter().enumerate().all(|(i, t)| items[i] == **t), || fail("gt first"))?;
        for (t, &j) in items[gt_fg.len()..].iter().zip(&d.pseudo_queries) {
            check(t.origin == Origin::Pseudo && t.bbox == old.get(j).bbox, || fail("pseudo order"))?;
            check(gt_fg.iter().all(|g| corner_iou(&t.bbox, &g.bbox) <= lambda + 1e-12), || fail("IoU <= lambda"))?;
        }
        check(build_distilled(&gt, &old, &cfg, 0.0).ok().as_ref() == Some(&d), || fail("determinism"))?;
    }
    Ok(format!("fixture plus {cases} random instances"))
}

// 4. Exemplars.

fn image(id: u64, cats: &[usize]) -> Image {
    Image {
        id,
        width: 100,
        height: 100,
        annotations: cats
            .iter()
            .enumerate()
            .map(|(k, &c)| Annotation {
                id: id * 100 + k as u64,
                category: c,
                bbox: bx(0.5, 0.5, 0.2, 0.2),
                area: 400.0,
            })
            .collect(),
    }
}

fn rescan(pool: &[Image], r: usize, cats: &[usize], eps: f64) -> Vec<u64> {
    let counts = |imgs: &[&Image]| -> Vec<f64> {
        cats.iter()
            .map(|c| imgs.iter().flat_map(|i| &i.annotations).filter(|a| a.category == *c).count() as f64)
            .collect()
    };
    let all: Vec<&Image> = pool.iter().collect();
    let n = counts(&all);
    let t: f64 = n.iter().map(|x| x + eps).sum();
    let target: Vec<f64> = n.iter().map(|x| (x + eps) / t).collect();
    let mut by_id = all.clone();
    by_id.sort_by_key(|i| i.id);
    let mut chosen: Vec<&Image> = Vec::new();
    for _ in 0..r {
        let mut best: Option<(&Image, f64)> = None;
        for cand in by_id.iter().filter(|c| !chosen.iter().any(|x| x.id == c.id)) {
            let mut with = chosen.clone();
            with.push(cand);
            let s: Vec<f64> = counts(&with).iter().map(|x| x + eps).collect();
            let total: f64 = s.iter().sum();
            let score: f64 = target.iter().zip(&s).map(|(p, x)| p * (x / total).ln()).sum();
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((cand, score));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen.iter().map(|i| i.id).collect()
}

fn exemplars() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cats = [0, 1, 2, 3];
    let eps = 1e-8;
    for case in 0..300 {
        let pool: Vec<Image> = (0..rng.random_range(1..30u64))
            .map(|k| {
                let cs: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..4)).collect();
                image((k * 7919) % 1009, &cs)
            })
            .collect();
        let r = phase_budget(rng.random_range(0.0..=1.0), pool.len());
        let got = greedy_select(&pool, r, &cats, eps, MarginalUnit::Annotations).map_err(|e| e.to_string())?;
        check(got == rescan(&pool, r, &cats, eps), || format!("case {case}: greedy differs from rescan"))?;
    }

    let pool: Vec<Image> = (0..20u64).map(|id| image(id, if id % 10 == 4 { &[1] } else { &[0] })).collect();
    let cats = [0, 1];
    let target = marginal(&pool, &cats, eps, MarginalUnit::Annotations).map_err(|e| e.to_string())?;
    let kl_of = |ids: &[u64]| {
        let chosen: Vec<&Image> = pool.iter().filter(|i| ids.contains(&i.id)).collect();
        kl_divergence(&target, &marginal(chosen, &cats, eps, MarginalUnit::Annotations).unwrap())
    };
    let r = phase_budget(0.5, pool.len());
    let greedy = kl_of(&greedy_select(&pool, r, &cats, eps, MarginalUnit::Annotations).map_err(|e| e.to_string())?);
    let mut random: Vec<f64> = (0..20).map(|s| kl_of(&random_select(&pool, r, s).unwrap())).collect();
    random.sort_by(f64::total_cmp);
    let median = (random[9] + random[10]) / 2.0;
    check(greedy <= median, || format!("greedy KL {greedy:.3e} > median random {median:.3e}"))?;
    Ok(format!("300 rescans; 90/10 KL greedy {greedy:.2e} vs random median {median:.2e}"))
}

// 5. Protocol.

fn protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 8;
    for case in 0..200 {
        let images: Vec<Image> = (0..rng.random_range(1..60u64))
            .map(|id| {
                let cs: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..c)).collect();
                image(id, &cs)
            })
            .collect();
        let d = Dataset {
            categories: (0..c)
                .map(|k| CategoryInfo {
                    source_id: k as u64 + 1,
                    name: format!("c{k}"),
                })
                .collect(),
            images,
        };
        let setup = ["6+2", "4+4", "2+2x3", "5+1+2"][case % 4];
        let seed = rng.random();
        let strict = split(&d, &multi_phase_plan(setup, c, seed, ProtocolMode::Strict).unwrap()).unwrap();
        let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
        for p in &strict {
            for id in p.image_ids() {
                *seen.entry(id).or_default() += 1;
            }
        }
        check(seen.len() == d.images.len() && seen.values().all(|&k| k == 1), || {
            format!("case {case}: strict split not a partition")
        })?;
        let plan = multi_phase_plan(setup, c, seed, ProtocolMode::Traditional).unwrap();
        for p in split(&d, &plan).unwrap() {
            let expect: Vec<u64> = d
                .images
                .iter()
                .filter(|i| i.annotations.iter().any(|a| p.categories.contains(&a.category)))
                .map(|i| i.id)
                .collect();
            check(p.image_ids() == expect, || format!("case {case}: traditional phase {}", p.index))?;
        }
    }
    let f = multi_phase_plan("70+10", 80, 0, ProtocolMode::Strict).unwrap().sample_fractions;
    check(f == [7.0 / 8.0, 1.0 / 8.0], || format!("70+10 fractions {f:?}"))?;
    Ok("200 datasets; 70+10 gives 7/8 and 1/8".into())
}

// 6. Forgetting trend.

fn forgetting() -> Outcome {
    let bench = SynthBenchmark::default();
    let mut full = 0;
    let mut lines = Vec::new();
    let mut strict_fail = Vec::new();
    for seed in 0..3u64 {
        let (train, features, test, test_features) = bench.generate(seed).map_err(|e| e.to_string())?;
        let plan = multi_phase_plan("6+2", 8, seed, ProtocolMode::Strict)
            .and_then(|p| p.with_sample_fractions(vec![0.5, 0.5]))
            .map_err(|e| e.to_string())?;
        let phases = split(&train, &plan).map_err(|e| e.to_string())?;
        let mut ap = BTreeMap::new();
        let mut fpp = BTreeMap::new();
        for mode in Mode::ALL {
            let cfg = TrainConfig {
                mode,
                seed,
                ..TrainConfig::default()
            };
            let r = run_benchmark(&cfg, &phases, &features, &test, &test_features).map_err(|e| e.to_string())?;
            let m = r.final_metrics();
            ap.insert(mode, m.ap_old.unwrap_or(0.0));
            fpp.insert(mode, m.fpp.unwrap_or(0.0));
        }
        use Mode::*;
        let strict = ap[&Finetune] < ap[&ClassicalKd]
            && ap[&ClassicalKd] < ap[&DkdErCalibrated]
            && fpp[&Finetune] > fpp[&ClassicalKd]
            && fpp[&ClassicalKd] > fpp[&DkdErCalibrated];
        let chain = [Finetune, ClassicalKd, DkdNoEr, DkdEr, DkdErCalibrated];
        let weak = chain.windows(2).all(|w| ap[&w[0]] <= ap[&w[1]] && fpp[&w[0]] >= fpp[&w[1]]);
        if !strict {
            strict_fail.push(seed);
        }
        full += usize::from(strict && weak);
        let fmt = |m: &BTreeMap<Mode, f64>| chain.iter().map(|k| format!("{:.3}", m[k])).collect::<Vec<_>>().join("/");
        lines.push(format!("seed {seed}: ap_old {} fpp {}", fmt(&ap), fmt(&fpp)));
    }
    let detail = format!("{}; full chain in {full}/3", lines.join("; "));
    check(strict_fail.is_empty() && full >= 2, || {
        format!("{detail}; strict chain failed for seeds {strict_fail:?}")
    })?;
    Ok(detail)
}

// 7. AP metric.

fn single(gt: &[BoundingBox], dets: &[(f64, BoundingBox)]) -> Option<f64> {
    let images = vec![Image {
        id: 1,
        width: 100,
        height: 100,
        annotations: gt
            .iter()
            .enumerate()
            .map(|(k, b)| Annotation {
                id: k as u64,
                category: 0,
                bbox: *b,
                area: b.area() * 1e4,
            })
            .collect(),
    }];
    let dets: Vec<Detection> = dets
        .iter()
        .map(|&(score, bbox)| Detection {
            image_id: 1,
            category: 0,
            score,
            bbox,
        })
        .collect();
    ap_at(&dets, &images, &[0], 0.5, &EvalParams::default()).unwrap()
}

fn metric() -> Outcome {
    let a = bx(0.25, 0.25, 0.2, 0.2);
    let b = bx(0.75, 0.75, 0.2, 0.2);
    let far = bx(0.25, 0.75, 0.2, 0.2);
    check(single(&[a, b], &[(0.9, a), (0.8, b)]) == Some(1.0), || "perfect fixture".into())?;
    check(single(&[a, b], &[]) == Some(0.0), || "empty fixture".into())?;
    check(single(&[a], &[(0.9, a), (0.3, far)]) == Some(1.0), || "TP then FP fixture".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = EvalParams::default();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let w = rng.random_range(0.05..0.4);
        let h = rng.random_range(0.05..0.4);
        bx(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
    };
    let mut tp_checked = 0;
    for case in 0..300 {
        let mut images = Vec::new();
        let mut dets = Vec::new();
        for id in 0..rng.random_range(1..4u64) {
            let anns: Vec<Annotation> = (0..rng.random_range(0..4u64))
                .map(|k| {
                    let b = rand_box(&mut rng);
                    Annotation {
                        id: id * 10 + k,
                        category: rng.random_range(0..2),
                        bbox: b,
                        area: b.area() * 4e4,
                    }
                })
                .collect();
            for a in &anns {
                if rng.random_bool(0.6) {
                    let s = rng.random_range(-0.3..0.3);
                    let bbox = bx(
                        (a.bbox.cx + a.bbox.w * s).clamp(0.0, 1.0),
                        a.bbox.cy,
                        a.bbox.w * (1.0 + s.abs()),
                        a.bbox.h,
                    );
                    dets.push(Detection { image_id: id, category: a.category, score: rng.random_range(0.01..1.0), bbox });
                }
            }
            for _ in 0..rng.random_range(0..3) {
                let bbox = rand_box(&mut rng);
                dets.push(Detection { image_id: id, category: rng.random_range(0..2), score: rng.random_range(0.01..1.0), bbox });
            }
            images.push(Image { id, width: 200, height: 200, annotations: anns });
        }
        let cats = [0, 1];
        let base = evaluate(&dets, &images, &cats, &params).unwrap();
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { score: 0.05 + 0.9 * d.score.powi(3), ..*d }).collect();
        check(evaluate(&squashed, &images, &cats, &params).unwrap() == base, || format!("case {case}: rank invariance"))?;
        let curve: Vec<f64> = base.per_threshold.iter().flatten().copied().collect();
        check(curve.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("case {case}: threshold monotonicity"))?;
        // A detection placed exactly on a gt no other detection or gt of its category overlaps.
        let free = images.iter().flat_map(|i| i.annotations.iter().map(move |a| (i.id, i, a))).find(|(id, img, a)| {
            let hit = |b: &BoundingBox| corner_iou(b, &a.bbox) >= 0.5;
            !dets.iter().any(|d| d.image_id == *id && d.category == a.category && hit(&d.bbox))
                && img.annotations.iter().all(|o| o.id == a.id || o.category != a.category || !hit(&o.bbox))
        });
        if let Some((id, _, a)) = free {
            let mut more = dets.clone();
            more.push(Detection { image_id: id, category: a.category, score: rng.random_range(0.001..1.0), bbox: a.bbox });
            let after = evaluate(&more, &images, &cats, &params).unwrap();
            let ok = base.per_threshold.iter().zip(&after.per_threshold).all(|(b, a)| match (b, a) {
                (Some(b), Some(a)) => *a >= b - 1e-12,
                _ => true,
            });
            check(ok, || format!("case {case}: TP monotonicity"))?;
            tp_checked += 1;
        }
    }
    Ok(format!("3 fixtures; 300 random cases ({tp_checked} with an added TP)"))
}

// 8. CLI round trip.

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_iodkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("IODKIT_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("`iodkit {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn round_trip(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini_coco.json");
    let work = dir.join("work");
    std::fs::create_dir_all(&work).map_err(|e| e.to_string())?;
    std::fs::copy(&fixture, work.join("mini_coco.json")).map_err(|e| e.to_string())?;
    let config = r#"{
  "data": {"coco": {"train": "mini_coco.json"}},
  "protocol": {"setup": "3+1", "seed": 0, "manifest": "split/manifest.json"},
  "train": {"mode": "finetune", "seed": 0, "epochs": 5, "n_queries": 8}
}
"#;
    std::fs::write(work.join("run.json"), config).map_err(|e| e.to_string())?;
    run_cli(&work, &["split", "--data", "mini_coco.json", "--setup", "3+1", "--seed", "0", "--out", "split"])?;
    run_cli(&work, &["train", "--config", "run.json", "--out", "run"])?;
    run_cli(
        &work,
        &["eval", "--checkpoint", "run/phase_2/checkpoint.json", "--config", "run.json", "--dump", "dets.json", "--out", "eval.json"],
    )?;
    run_cli(&work, &["eval", "--detections", "dets.json", "--gt", "mini_coco.json", "--out", "eval_dump.json"])?;
    run_cli(&work, &["plot", "--in", "run/metrics.csv", "--out", "report.svg"])?;
    Ok(files(&work))
}

fn cli() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = round_trip(&tmp.path().join("a"))?;
    let b = round_trip(&tmp.path().join("b"))?;
    check(a.keys().eq(b.keys()), || "runs wrote different file sets".into())?;
    let differ: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differ.is_empty(), || format!("outputs differ: {differ:?}"))?;
    for want in ["split/manifest.json", "run/metrics.csv", "eval.json", "report.svg"] {
        check(a.contains_key(Path::new(want)), || format!("missing {want}"))?;
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("matching optimality", matching, Duration::from_secs(5)),
        ("gradient correctness", gradients, Duration::from_secs(30)),
        ("distillation invariants", distillation, Duration::from_secs(60)),
        ("exemplar selection", exemplars, Duration::from_secs(10)),
        ("protocol", protocol, Duration::from_secs(5)),
        ("forgetting trend", forgetting, Duration::from_secs(600)),
        ("AP metric", metric, Duration::from_secs(30)),
        ("CLI round trip", cli, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if took <= *limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {}s limit", limit.as_secs())),
            Err(e) => ("FAIL", e),
        };
        failed += usize::from(status == "FAIL");
        println!("criterion {}: {status} {name} ({detail}) [{:.2}s]", k + 1, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
