//! Acceptance run: prints one PASS/FAIL line per criterion. Failures are
//! reported but only fail the process when `ROTDG_STRICT=1` is set, so the
//! full suite can run under `cargo test` while still showing each verdict.
//! Tolerances are pinned below.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, LogNormal, Normal};

use rotdg::autodiff::{grad_check_coords, Graph, ParamStore, Tensor, Var};
use rotdg::detector::backbone::Branch;
use rotdg::detector::heads::{classification_loss, heads_forward, init_heads, learner_forward, learner_loss, regression_loss};
use rotdg::detector::pooling::{PooledRois, RoiStage};
use rotdg::detector::{Detector, DetectorConfig};
use rotdg::eval::{evaluate, median, Detection, EvalReport, GroundTruth};
use rotdg::geometry::{rotated_iou, HorizontalBox, OrientedBox};
use rotdg::losses::{
    category_distribution, consistency_value, info_nce_gated, init_consistency_heads, jsd_consistency, paired_gates,
    project_embeddings, CategoryHead, ProjectionHead, SecMetric,
};
use rotdg::runner::commands::{ablation_rows, evaluate_samples, run_cell, AblationData};
use rotdg::runner::{cmd_eval, cmd_gen, cmd_train, load_checkpoint, train, RunConfig};
use rotdg::style::{adain, adain_transfer, channel_stats, ChannelStats, FeatureMap, StyleBank};
use rotdg::synth::{generate_split, DomainStyle};

// criterion 1
const IOU_PAIRS: usize = 1000;
const MC_SAMPLES: usize = 200_000;
const IOU_TOL: f64 = 0.01;
const IOU_SECONDS: f64 = 60.0;
// criterion 2
const GRAD_H: f64 = 1e-5;
const GRAD_REL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_COORDS: usize = 24;
// criterion 3
const ADAIN_PAIRS: usize = 100;
const ADAIN_TOL: f64 = 1e-3;
// criterion 4
const JSD_PAIRS: usize = 10_000;
const JSD_UPPER_SLACK: f64 = 1e-9;
const JSD_SYMMETRY: f64 = 1e-12;
// criterion 5
const EVAL_SCENES: usize = 50;
const EVAL_TOL: f64 = 1e-9;
// criterion 6
const OVERFIT_IMAGES: usize = 10;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_MAP: f64 = 0.9;
const OVERFIT_RMSD: f64 = 0.1;
const OVERFIT_SECONDS: f64 = 300.0;
// criteria 7 and 8
const SOURCE_MARGIN: f64 = 0.02;
const GENERALIZATION_SECONDS: f64 = 1800.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: usize, name: &str, f: &dyn Fn() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    println!(
        "criterion {id} [{name}]: {} {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t0.elapsed().as_secs_f64()
    );
    o.pass
}

// ---------------------------------------------------------------- 1

fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox {
    let w = rng.gen_range(2.0..30.0);
    let h = rng.gen_range(1.0..w);
    OrientedBox::new(rng.gen_range(20.0..44.0), rng.gen_range(20.0..44.0), w, h, rng.gen_range(-FRAC_PI_2..FRAC_PI_2)).unwrap()
}

fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    (dx * c + dy * s).abs() <= b.w / 2.0 && (-dx * s + dy * c).abs() <= b.h / 2.0
}

fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, rng: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<(f64, f64)> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.0), h.max(p.0)));
    let (y0, y1) = corners.iter().fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..MC_SAMPLES {
        let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    inter as f64 / union.max(1) as f64
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..IOU_PAIRS {
        let a = random_box(&mut rng);
        let b = match k % 10 {
            0 => a,
            1 => random_box(&mut rng),
            _ => {
                let w = (a.w * rng.gen_range(0.6..1.4)).max(1.5);
                OrientedBox::new(
                    a.cx + rng.gen_range(-0.4..0.4) * a.w,
                    a.cy + rng.gen_range(-0.4..0.4) * a.w,
                    w,
                    (a.h * rng.gen_range(0.6..1.4)).clamp(1.0, w),
                    a.theta + rng.gen_range(-0.8..0.8),
                )
                .unwrap()
            }
        };
        worst = worst.max((rotated_iou(&a, &b) - monte_carlo_iou(&a, &b, &mut rng)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < IOU_TOL && secs < IOU_SECONDS,
        format!("max |clip - MC| = {worst:.4} over {IOU_PAIRS} pairs (< {IOU_TOL}), {secs:.1}s (< {IOU_SECONDS}s)"),
    )
}

// ---------------------------------------------------------------- 2

fn jittered_heads(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    init_heads(&mut store, cfg, rng).unwrap();
    init_consistency_heads(&mut store, cfg.pooled_len(), cfg.head_hidden, cfg.embed_dim, cfg.num_classes, rng).unwrap();
    // zero-initialized layers would hide their inputs' gradients
    let noise = Normal::new(0.0, 0.05).unwrap();
    store.for_each_mut(|_, w, _| w.iter_mut().for_each(|v| *v += noise.sample(rng)));
    store
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pooled(stage: RoiStage, branch: Branch, features: Var) -> PooledRois {
    PooledRois { stage, branch, features }
}

fn random_gates(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut g: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    g[0] = true;
    g
}

fn random_hbox(rng: &mut ChaCha8Rng) -> HorizontalBox {
    HorizontalBox::new(rng.gen_range(4.0..40.0), rng.gen_range(4.0..40.0), rng.gen_range(6.0..20.0), rng.gen_range(4.0..14.0)).unwrap()
}

fn worst_coords(f: impl Fn(&mut Graph, Var) -> rotdg::Result<Var>, x: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let coords: Vec<usize> = (0..x.len()).collect::<Vec<_>>().choose_multiple(rng, GRAD_COORDS.min(x.len())).copied().collect();
    grad_check_coords(f, x, GRAD_H, &coords).unwrap()
}

fn contrastive_instance(stage: RoiStage, heads: [ProjectionHead; 2], rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DetectorConfig::default();
    let store = jittered_heads(&cfg, rng);
    let n = 6;
    let gates = random_gates(n, rng);
    let x = random_tensor(&[2 * n, cfg.pooled_len()], rng);
    let f = |g: &mut Graph, x: Var| {
        let a = g.narrow(x, 0, 0, n)?;
        let b = g.narrow(x, 0, n, n)?;
        let za = project_embeddings(g, &store, heads[0], &pooled(stage, Branch::Original, a))?;
        let zb = project_embeddings(g, &store, heads[1], &pooled(stage, Branch::Hallucinated, b))?;
        let z = g.concat(&[za, zb], 0)?;
        info_nce_gated(g, z, &paired_gates(&gates), cfg.tau)
    };
    worst_coords(f, &x, rng)
}

fn sec_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DetectorConfig::default();
    let store = jittered_heads(&cfg, rng);
    let n = 5;
    let x = random_tensor(&[2 * n, cfg.pooled_len()], rng);
    let f = |g: &mut Graph, x: Var| {
        let a = g.narrow(x, 0, 0, n)?;
        let b = g.narrow(x, 0, n, n)?;
        let p = category_distribution(g, &store, CategoryHead::G1, &pooled(RoiStage::Rotated, Branch::Original, a))?;
        let q = category_distribution(g, &store, CategoryHead::G2, &pooled(RoiStage::Rotated, Branch::Hallucinated, b))?;
        jsd_consistency(g, p, q)
    };
    worst_coords(f, &x, rng)
}

fn cls_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DetectorConfig::default();
    let store = jittered_heads(&cfg, rng);
    let n = 8;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=cfg.num_classes)).collect();
    let rows: Vec<usize> = (0..n).collect();
    let x = random_tensor(&[n, cfg.pooled_len()], rng);
    let f = |g: &mut Graph, x: Var| {
        let (logits, _) = heads_forward(g, &store, &pooled(RoiStage::Rotated, Branch::Original, x))?;
        classification_loss(g, logits, &rows, &labels)
    };
    worst_coords(f, &x, rng)
}

fn reg_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DetectorConfig::default();
    let store = jittered_heads(&cfg, rng);
    let n = 6;
    let learner_rows: Vec<(usize, HorizontalBox, OrientedBox)> = (0..n)
        .map(|j| {
            let h = random_hbox(rng);
            let gt = OrientedBox::new(h.x + h.w / 2.0 + rng.gen_range(-1.0..1.0), h.y + h.h / 2.0, h.w, h.h * 0.6, rng.gen_range(-1.2..1.2)).unwrap();
            (j, h, gt.canonical())
        })
        .collect();
    let head_rows: Vec<(usize, [f64; 5])> = (0..n)
        .map(|j| (j, [(); 5].map(|_| rng.gen_range(-2.0..2.0))))
        .collect();
    let x = random_tensor(&[n, cfg.pooled_len()], rng);
    let f = |g: &mut Graph, x: Var| {
        let raw = learner_forward(g, &store, &pooled(RoiStage::Horizontal, Branch::Original, x))?;
        let l1 = learner_loss(g, raw, &learner_rows)?;
        let (_, deltas) = heads_forward(g, &store, &pooled(RoiStage::Rotated, Branch::Original, x))?;
        let l2 = regression_loss(g, deltas, &head_rows)?;
        g.add(l1, l2)
    };
    worst_coords(f, &x, rng)
}

fn adain_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (6, 5, 5);
    let x = random_tensor(&[c, h, w], rng);
    let lognormal = LogNormal::new(0.0, 0.5).unwrap();
    let style = ChannelStats::new(
        (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..c).map(|_| lognormal.sample(rng)).collect(),
    )
    .unwrap();
    let weights = random_tensor(&[c, h, w], rng);
    let f = |g: &mut Graph, x: Var| {
        let y = adain(g, x, &style)?;
        let wv = g.constant(weights.clone())?;
        let p = g.mul(y, wv)?;
        g.sum(p)
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, &x, GRAD_H, &coords).unwrap()
}

fn end_to_end_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig::default();
    let det = Detector::new(cfg.clone(), &mut rng).unwrap();
    let bank = StyleBank::synthetic(cfg.widths, 8, &mut rng).unwrap();
    let data = generate_split(&Default::default(), &DomainStyle::a(), seed, 2, "g").unwrap();
    let batch: Vec<_> = data.iter().map(|s| s.annotated()).collect();
    let mut g = Graph::new();
    let step = det.training_step(&mut g, &batch, Some(&bank), None, &mut rng).unwrap();
    let mut analytic = det.clone();
    analytic.params_mut().zero_grad();
    g.backward_into(step.loss, analytic.params_mut()).unwrap();
    let loss_at = |d: &Detector| {
        let mut g = Graph::new();
        let s = d
            .training_step(&mut g, &batch, Some(&bank), Some(&step.plan), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        g.item(s.loss)
    };
    let names: Vec<String> = det.params().names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in names.choose_multiple(&mut rng, names.len()) {
        if checked == 3 {
            break;
        }
        let grad = analytic.params().grad(name).unwrap().data().to_vec();
        let k = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap();
        if grad[k].abs() < 1e-6 {
            continue;
        }
        let mut plus = det.clone();
        plus.params_mut().value_mut(name).unwrap().data_mut()[k] += GRAD_H;
        let mut minus = det.clone();
        minus.params_mut().value_mut(name).unwrap().data_mut()[k] -= GRAD_H;
        let central = (loss_at(&plus) - loss_at(&minus)) / (2.0 * GRAD_H);
        worst = worst.max((grad[k] - central).abs() / (grad[k].abs() + central.abs()).max(1e-8));
        checked += 1;
    }
    worst
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut rows: Vec<(&str, f64)> = Vec::new();
    let mut suite = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..GRAD_INSTANCES).map(|_| f(&mut rng)).fold(0.0, f64::max);
        rows.push((name, worst));
    };
    suite("L_HCL", &mut |r| contrastive_instance(RoiStage::Horizontal, [ProjectionHead::F1, ProjectionHead::F2], r));
    suite("L_RAC", &mut |r| contrastive_instance(RoiStage::Rotated, [ProjectionHead::F3, ProjectionHead::F4], r));
    suite("L_SEC", &mut sec_instance);
    suite("L_cls", &mut cls_instance);
    suite("L_reg", &mut reg_instance);
    suite("adain", &mut adain_instance);
    let mut seed = 0;
    suite("total", &mut |_| {
        seed += 1;
        end_to_end_instance(seed)
    });
    let pass = rows.iter().all(|r| r.1 < GRAD_REL);
    let detail = rows.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("worst relative error over {GRAD_INSTANCES} instances each (< {GRAD_REL:.0e}): {detail}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let lognormal = LogNormal::new(0.0, 0.5).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..ADAIN_PAIRS {
        let c = rng.gen_range(1..16);
        let side = rng.gen_range(2..12);
        // content and style statistics come from the same family
        let scale = lognormal.sample(&mut rng);
        let shift = rng.gen_range(-3.0..3.0);
        let data = (0..c * side * side).map(|_| shift + scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let x = FeatureMap::new(1, Tensor::new(&[c, side, side], data).unwrap()).unwrap();
        let s = ChannelStats::new(
            (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            (0..c).map(|_| lognormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let got = channel_stats(&adain_transfer(&x, &s).unwrap());
        for k in 0..c {
            worst = worst.max((got.mu[k] - s.mu[k]).abs()).max((got.sigma[k] - s.sigma[k]).abs());
        }
    }
    outcome(worst < ADAIN_TOL, format!("max per-channel stat error {worst:.2e} over {ADAIN_PAIRS} pairs (< {ADAIN_TOL})"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut lo, mut hi, mut asym): (f64, f64, f64) = (f64::MAX, f64::MIN, 0.0);
    let mut self_exact = true;
    for k in 0..JSD_PAIRS {
        let d = rng.gen_range(2..9);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if k % 20 == 0 {
                let mut v = vec![0.0; d];
                v[rng.gen_range(0..d)] = 1.0;
                v
            } else {
                Dirichlet::new_with_size(rng.gen_range(0.1..3.0), d).unwrap().sample(rng)
            }
        };
        let p = Tensor::new(&[1, d], draw(&mut rng)).unwrap();
        let q = Tensor::new(&[1, d], draw(&mut rng)).unwrap();
        let pq = consistency_value(&p, &q, SecMetric::Jsd).unwrap();
        let qp = consistency_value(&q, &p, SecMetric::Jsd).unwrap();
        lo = lo.min(pq);
        hi = hi.max(pq);
        asym = asym.max((pq - qp).abs());
        self_exact &= consistency_value(&p, &p, SecMetric::Jsd).unwrap() == 0.0;
    }
    let pass = lo >= 0.0 && hi <= LN_2 + JSD_UPPER_SLACK && asym <= JSD_SYMMETRY && self_exact;
    outcome(
        pass,
        format!("range [{lo:.3e}, {hi:.6}] within [0, ln2 + {JSD_UPPER_SLACK:.0e}], max asymmetry {asym:.1e} (<= {JSD_SYMMETRY:.0e}), L(p,p) = 0 exactly: {self_exact}"),
    )
}

// ---------------------------------------------------------------- 5

fn tiny_scene(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let rb = |rng: &mut ChaCha8Rng| {
        OrientedBox::new(rng.gen_range(5.0..59.0), rng.gen_range(5.0..59.0), rng.gen_range(6.0..16.0), rng.gen_range(3.0..6.0), rng.gen_range(-1.5..1.5)).unwrap()
    };
    for image in 0..3 {
        for _ in 0..rng.gen_range(0..4) {
            let b = rb(rng);
            let class = rng.gen_range(0..3);
            gts.push(GroundTruth { image, rbox: b, class });
            for _ in 0..rng.gen_range(0..3) {
                let j = OrientedBox::new(
                    b.cx + rng.gen_range(-2.0..2.0),
                    b.cy + rng.gen_range(-2.0..2.0),
                    b.w * rng.gen_range(0.8..1.2),
                    b.h * rng.gen_range(0.8..1.2),
                    b.theta + rng.gen_range(-0.3..0.3),
                )
                .unwrap();
                let c = if rng.gen_bool(0.8) { class } else { rng.gen_range(0..3) };
                dets.push(Detection { image, rbox: j, class: c, score: rng.gen_range(0..10) as f64 / 10.0 });
            }
        }
        for _ in 0..rng.gen_range(0..3) {
            let b = rb(rng);
            dets.push(Detection { image, rbox: b, class: rng.gen_range(0..3), score: rng.gen_range(0..10) as f64 / 10.0 });
        }
    }
    (dets, gts)
}

/// Naive reference: selection-sort order, direct greedy matching, and AP
/// as the sum over true positives of the best precision at or after them.
fn reference_ap(dets: &[Detection], gts: &[GroundTruth], classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let mut left: Vec<usize> = (0..dets.len()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (&dets[left[k]], &dets[left[best]]);
            if a.score > b.score || (a.score == b.score && (a.image < b.image || (a.image == b.image && left[k] < left[best]))) {
                best = k;
            }
        }
        order.push(left.remove(best));
    }
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &i in &order {
        let mut pick: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if used[k] || g.image != dets[i].image || g.class != dets[i].class {
                continue;
            }
            let iou = rotated_iou(&dets[i].rbox, &g.rbox);
            if iou >= 0.5 && pick.map_or(true, |p| iou > p.1) {
                pick = Some((k, iou));
            }
        }
        if let Some((k, _)) = pick {
            used[k] = true;
            tp[i] = true;
        }
    }
    let aps: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let n = gts.iter().filter(|g| g.class == c).count();
            (n > 0).then(|| {
                let flags: Vec<bool> = order.iter().filter(|&&i| dets[i].class == c).map(|&i| tp[i]).collect();
                let prec: Vec<f64> = (0..flags.len())
                    .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
                    .collect();
                (0..flags.len()).filter(|&k| flags[k]).map(|k| prec[k..].iter().cloned().fold(0.0, f64::max)).sum::<f64>() / n as f64
            })
        })
        .collect();
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (aps, map)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    let mut presence_ok = true;
    let diff = |a: Option<f64>, b: Option<f64>, ok: &mut bool| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => {
            *ok = false;
            0.0
        }
    };
    for _ in 0..EVAL_SCENES {
        let (dets, gts) = tiny_scene(&mut rng);
        let r = evaluate(&dets, &gts, 3, 0.5).unwrap();
        let (aps, map) = reference_ap(&dets, &gts, 3);
        for c in 0..3 {
            worst = worst.max(diff(r.per_class[c].ap, aps[c], &mut presence_ok));
        }
        worst = worst.max(diff(r.map, map, &mut presence_ok));
    }
    outcome(
        worst <= EVAL_TOL && presence_ok,
        format!("max |AP - reference| = {worst:.1e} over {EVAL_SCENES} scenes (<= {EVAL_TOL:.0e}), absent classes agree: {presence_ok}"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = RunConfig::default();
    let images = generate_split(&cfg.data.scene, &DomainStyle::a(), cfg.data.seed, OVERFIT_IMAGES, "overfit-").unwrap();
    let per_epoch = OVERFIT_IMAGES.div_ceil(cfg.batch_size);
    cfg.epochs = OVERFIT_STEPS.div_ceil(per_epoch);
    cfg.max_steps = Some(OVERFIT_STEPS);
    // a fixed small set: no step decay
    cfg.optimizer.decay_epoch = cfg.epochs;
    let out = train(&cfg, &images, |_| {}).unwrap();
    let r = evaluate_samples(&out.checkpoint.detector, &images, 0.5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let map = r.map.unwrap_or(0.0);
    let rmsd = r.rmsd.unwrap_or(f64::INFINITY);
    outcome(
        map > OVERFIT_MAP && rmsd < OVERFIT_RMSD && secs < OVERFIT_SECONDS && out.checkpoint.step <= OVERFIT_STEPS,
        format!(
            "{} steps on {OVERFIT_IMAGES} images: mAP {map:.4} (> {OVERFIT_MAP}), RMSD {rmsd:.4} rad (< {OVERFIT_RMSD}), {secs:.1}s (< {OVERFIT_SECONDS}s)",
            out.checkpoint.step
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

struct Matrix {
    /// (row, seed, reports per domain, seconds)
    cells: Vec<(&'static str, u64, Vec<(String, EvalReport)>, f64)>,
    gen_seconds: f64,
}

impl Matrix {
    fn values(&self, row: &str, pick: impl Fn(&[(String, EvalReport)]) -> Option<f64>) -> Vec<f64> {
        self.cells.iter().filter(|c| c.0 == row).filter_map(|c| pick(&c.2)).collect()
    }

    fn seconds(&self, rows: &[&str]) -> f64 {
        self.cells.iter().filter(|c| rows.contains(&c.0)).map(|c| c.3).sum::<f64>() + self.gen_seconds
    }
}

fn target_mean(reports: &[(String, EvalReport)], f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = reports[1..].iter().map(|(_, r)| f(r)).collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn component_matrix() -> Matrix {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    cmd_gen(&cfg, dir.path()).unwrap();
    let data = AblationData::load(&cfg, dir.path()).unwrap();
    let gen_seconds = t0.elapsed().as_secs_f64();
    let mut cells = Vec::new();
    for row in ablation_rows(&cfg.detector).into_iter().filter(|r| r.matrix == "component") {
        for &seed in &cfg.ablation.seeds {
            let t = Instant::now();
            let reports = run_cell(&cfg, &row.detector, seed, &data, 0.5).unwrap();
            let secs = t.elapsed().as_secs_f64();
            let tm = target_mean(&reports, |r| r.map);
            println!("    {:<14} seed {seed}: source mAP {:.4}, target mAP {:.4} ({secs:.0}s)", row.row, reports[0].1.map.unwrap_or(f64::NAN), tm.unwrap_or(f64::NAN));
            cells.push((row.row, seed, reports, secs));
        }
    }
    Matrix { cells, gen_seconds }
}

fn med(v: &[f64]) -> f64 {
    median(v).unwrap_or(f64::NAN)
}

fn criterion_7(m: &Matrix) -> Outcome {
    let tmap = |row| med(&m.values(row, |r| target_mean(r, |e| e.map)));
    let trmsd = |row| med(&m.values(row, |r| target_mean(r, |e| e.rmsd)));
    let smap = |row| med(&m.values(row, |r| r[0].1.map));
    let (g_t, b_t) = (tmap("full"), tmap("baseline"));
    let (g_r, b_r) = (trmsd("full"), trmsd("baseline"));
    let (g_s, b_s) = (smap("full"), smap("baseline"));
    let secs = m.seconds(&["full", "baseline"]);
    outcome(
        g_t >= b_t && g_r <= b_r && g_s >= b_s - SOURCE_MARGIN && secs < GENERALIZATION_SECONDS,
        format!(
            "median target mAP full {g_t:.4} vs baseline {b_t:.4}; target RMSD {g_r:.4} vs {b_r:.4}; source mAP {g_s:.4} vs {b_s:.4} (margin {SOURCE_MARGIN}); {secs:.0}s (< {GENERALIZATION_SECONDS}s)"
        ),
    )
}

fn criterion_8(m: &Matrix) -> Outcome {
    let tmap = |row| med(&m.values(row, |r| target_mean(r, |e| e.map)));
    let rows = ["baseline", "style", "style+hcl", "style+hcl+rac", "full"];
    let all: Vec<String> = rows.iter().map(|r| format!("{r} {:.4}", tmap(r))).collect();
    let (f, s, b) = (tmap("full"), tmap("style"), tmap("baseline"));
    outcome(f >= s && s >= b, format!("median target mAP: {}; need full >= style >= baseline", all.join(", ")))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.train_count = 12;
    cfg.data.test_count = 6;
    cfg.max_steps = Some(6);
    let read_all = |dir: &std::path::Path| {
        let mut files: Vec<_> = walk(dir);
        files.sort();
        files.into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_gen(&cfg, d1.path()).unwrap();
    cmd_gen(&cfg, d2.path()).unwrap();
    let gen_same = read_all(d1.path()) == read_all(d2.path());
    let (r1, r2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&cfg, d1.path(), r1.path()).unwrap();
    cmd_train(&cfg, d1.path(), r2.path()).unwrap();
    let train_same = read_all(r1.path()) == read_all(r2.path());
    let e1 = cmd_eval(r1.path(), &d1.path().join("B"), 0.5, None).unwrap();
    let e2 = cmd_eval(r2.path(), &d1.path().join("B"), 0.5, None).unwrap();
    let eval_same = serde_json::to_string(&e1).unwrap() == serde_json::to_string(&e2).unwrap();
    let data = AblationData::load(&cfg, d1.path()).unwrap();
    let row = &ablation_rows(&cfg.detector)[4].detector;
    let ablate_same = run_cell(&cfg, row, 3, &data, 0.5).unwrap() == run_cell(&cfg, row, 3, &data, 0.5).unwrap();
    let trained = train(&cfg, &data.source_train, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rotdg::runner::save_checkpoint(dir.path(), &trained.checkpoint).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let round_trip = data.tests.iter().flat_map(|t| &t.1).all(|s| {
        trained.checkpoint.detector.detect(&s.image).unwrap() == loaded.detector.detect(&s.image).unwrap()
    });
    outcome(
        gen_same && train_same && eval_same && ablate_same && round_trip,
        format!("gen {gen_same}, train {train_same}, eval {eval_same}, ablation cell {ablate_same}, checkpoint round-trip detections {round_trip}"),
    )
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// `ROTDG_CRITERIA=1,5,9` restricts the run to the listed criteria.
fn selected(id: usize) -> bool {
    std::env::var("ROTDG_CRITERIA")
        .map(|v| v.split(',').any(|k| k.trim() == id.to_string()))
        .unwrap_or(true)
}

fn main() {
    let mut results = Vec::new();
    let mut check = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if selected(id) {
            results.push(run(id, name, f));
        }
    };
    check(1, "geometry oracle", &criterion_1);
    check(2, "gradient suite", &criterion_2);
    check(3, "AdaIN post-condition", &criterion_3);
    check(4, "JSD properties", &criterion_4);
    check(5, "evaluator equivalence", &criterion_5);
    check(6, "overfit sanity", &criterion_6);
    if selected(7) || selected(8) {
        println!("  component matrix (5 rows x 5 seeds):");
        let t0 = Instant::now();
        let m = component_matrix();
        println!("  matrix finished in {:.0}s", t0.elapsed().as_secs_f64());
        check(7, "generalization", &|| criterion_7(&m));
        check(8, "ablation ordering", &|| criterion_8(&m));
    }
    check(9, "determinism", &criterion_9);
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() && std::env::var("ROTDG_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
