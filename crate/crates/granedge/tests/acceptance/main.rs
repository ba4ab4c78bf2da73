//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). A free argument filters
//! criteria by substring; flags are ignored.

mod oracle;

use std::path::Path;
use std::time::{Duration, Instant};

use granedge::core::backbone::{masks_to_guidance, FeatureBundle, FeatureProvider, ProviderConfig, ToyBackbone};
use granedge::core::eval::{image_counts, nms_thin, correspond, evaluate, EvalConfig};
use granedge::core::granularity::{blend, build_ladder, candidate_sweep, sample_consensus, AnnotationSet, LabelLadder};
use granedge::core::losses::{
    balanced_bce, differ_loss, guide_loss, objective, side_loss, total_loss, Ablation, LossWeights,
};
use granedge::core::autograd::Tape;
use granedge::core::data::Sample;
use granedge::core::stn::{BundleVars, EdgeMapSet, Stn, StnConfig};
use granedge::core::synthetic::shapes_sample;
use granedge::core::train::{InferRequest, TrainConfig, Trainer};
use granedge::core::{Image, Map, Mask, Tensor};
use granedge::features::CachedProvider;
use granedge::report::par_best_match;
use granedge::{checkpoint, run};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, || format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn map(h: usize, w: usize, v: &[f64]) -> Map {
    Map::from_vec(h, w, v.to_vec()).unwrap()
}

fn mask(h: usize, w: usize, v: &[u8]) -> Mask {
    Mask::from_vec(h, w, v.iter().map(|&b| b == 1).collect()).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Map {
    Map::from_fn(h, w, |_, _| rng.random_range(lo..hi))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn maps_set(c: Map, m: Map, f: Map, u: Map) -> EdgeMapSet {
    EdgeMapSet { coarse: c, medium: m, fine: f, fused: u }
}

fn ladder_of(c: Mask, m: Mask, f: Mask, u: Mask, soft: Map) -> LabelLadder {
    let (h, w) = c.size();
    LabelLadder {
        coarse: c,
        medium: m,
        fine: f,
        consensus: u,
        soft_consensus: soft,
        mean: Map::new(h, w),
        std: Map::new(h, w),
        zeta: 0.2,
    }
}

// ---------------------------------------------------------------- losses

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let bce = balanced_bce(&map(2, 2, &[0.8, 0.2, 0.2, 0.2]), &mask(2, 2, &[1, 0, 0, 0])).map_err(|e| e.to_string())?;
    let bce_exact = -1.5 * 0.8f64.ln();
    ensure((bce.value - bce_exact).abs() <= 1e-6, || format!("balanced_bce {} vs {bce_exact}", bce.value))?;
    ensure((bce.value - 0.3347).abs() < 5e-5, || format!("balanced_bce {} does not round to 0.3347", bce.value))?;

    let maps = maps_set(map(1, 2, &[0.1, 0.2]), map(1, 2, &[0.1, 0.9]), map(1, 2, &[0.8, 0.9]), Map::new(1, 2));
    let l = ladder_of(mask(1, 2, &[0, 0]), mask(1, 2, &[0, 1]), mask(1, 2, &[1, 1]), Mask::new(1, 2), Map::new(1, 2));
    let (d, _) = differ_loss(&maps, &l).map_err(|e| e.to_string())?;
    ensure((d + 2.8).abs() <= 1e-6, || format!("differ_loss {d}"))?;

    let t = total_loss(2.0, -2.8, 1.0, LossWeights::default()).total;
    ensure((t - 2.22).abs() <= 1e-6, || format!("total_loss {t}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("bce {:.6} differ {d:.6} total {t:.6}", bce.value))
}

// ------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Worst(f64, String);

impl Worst {
    fn see(&mut self, a: f64, n: f64, what: impl FnOnce() -> String) {
        let r = rel_err(a, n);
        if r > self.0 || r.is_nan() {
            self.0 = if r.is_nan() { f64::INFINITY } else { r };
            self.1 = format!("{} (analytic {a:e}, numeric {n:e})", what());
        }
    }
}

/// Central difference of `f` with respect to `m[j]`.
fn fd_map(m: &Map, j: usize, f: &dyn Fn(&Map) -> f64) -> f64 {
    let mut p = m.clone();
    p.data_mut()[j] += FD_STEP;
    let up = f(&p);
    p.data_mut()[j] -= 2.0 * FD_STEP;
    let down = f(&p);
    (up - down) / (2.0 * FD_STEP)
}

/// Maps in (0.05, 0.95) whose pairwise differences stay away from zero.
fn spread_maps(rng: &mut ChaCha8Rng, h: usize, w: usize) -> [Map; 4] {
    loop {
        let m: [Map; 4] = core::array::from_fn(|_| random_map(rng, h, w, 0.05, 0.95));
        let ok = (0..3).all(|i| {
            (i + 1..3).all(|k| m[i].data().iter().zip(m[k].data()).all(|(a, b)| (a - b).abs() > 1e-3))
        });
        if ok {
            return m;
        }
    }
}

fn random_ladder(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelLadder {
    let ann = AnnotationSet::new((0..3).map(|_| random_mask(rng, h, w, 0.3)).collect()).unwrap();
    LabelLadder::build(&ann, 0.2, rng).unwrap()
}

fn random_guidance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> granedge::core::backbone::MaskGuidance {
    let masks: Vec<Mask> = (0..3).map(|_| random_mask(rng, h, w, 0.5)).collect();
    masks_to_guidance(&masks, (h, w)).unwrap()
}

fn loss_gradients(seed: u64, worst: &mut Worst) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (4, 4);
    let [c, m, f, u] = spread_maps(&mut rng, h, w);
    let ladder = random_ladder(&mut rng, h, w);
    let guidance = random_guidance(&mut rng, h, w);
    let set = |c: &Map, m: &Map, f: &Map, u: &Map| maps_set(c.clone(), m.clone(), f.clone(), u.clone());

    let y = &ladder.fine;
    let g = balanced_bce(&c, y).unwrap();
    for j in 0..c.len() {
        let n = fd_map(&c, j, &|p| balanced_bce(p, y).unwrap().value);
        worst.see(g.grad.data()[j], n, || format!("seed {seed} balanced_bce[{j}]"));
    }

    let base = set(&c, &m, &f, &u);
    let (_, sg) = side_loss(&base, &ladder).unwrap();
    let (_, dg) = differ_loss(&base, &ladder).unwrap();
    let gg = guide_loss(&u, &ladder.consensus, &ladder.soft_consensus, &guidance).unwrap();
    let (_, og) = objective(&base, &ladder, &guidance, LossWeights::default(), Ablation::default()).unwrap();
    let maps = [&c, &m, &f, &u];
    for i in 0..4 {
        let with = |p: &Map| {
            let mut v = [c.clone(), m.clone(), f.clone(), u.clone()];
            v[i] = p.clone();
            let [a, b, cc, d] = v;
            maps_set(a, b, cc, d)
        };
        for j in 0..maps[i].len() {
            if i < 3 {
                let n = fd_map(maps[i], j, &|p| side_loss(&with(p), &ladder).unwrap().0);
                worst.see(sg[i].data()[j], n, || format!("seed {seed} side map {i}[{j}]"));
                let n = fd_map(maps[i], j, &|p| differ_loss(&with(p), &ladder).unwrap().0);
                worst.see(dg[i].data()[j], n, || format!("seed {seed} differ map {i}[{j}]"));
            } else {
                let n = fd_map(&u, j, &|p| {
                    guide_loss(p, &ladder.consensus, &ladder.soft_consensus, &guidance).unwrap().value
                });
                worst.see(gg.grad.data()[j], n, || format!("seed {seed} guide[{j}]"));
            }
            let n = fd_map(maps[i], j, &|p| {
                objective(&with(p), &ladder, &guidance, LossWeights::default(), Ablation::default()).unwrap().0.total
            });
            worst.see(og[i].data()[j], n, || format!("seed {seed} total map {i}[{j}]"));
        }
    }
}

fn toy_setup(seed: u64) -> (Stn, FeatureBundle, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy = ToyBackbone::new(seed, 2, 4).unwrap();
    let gray = random_map(&mut rng, 16, 16, 0.0, 1.0);
    let image = Image::from_gray(&gray).unwrap();
    let bundle = toy.extract(&image).unwrap();
    let mut cfg = StnConfig::for_toy(&toy, 2);
    cfg.seed = seed;
    let mut stn = Stn::new(cfg).unwrap();
    // Move every weight off its initial value so zero biases and unit
    // gates do not hide mistakes.
    let ids: Vec<_> = stn.params().ids().collect();
    for id in ids {
        for v in stn.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    (stn, bundle, image)
}

fn outputs_functional(stn: &Stn, bundle: &FeatureBundle, r: &[Map; 4]) -> f64 {
    let m = stn.predict(bundle).unwrap();
    [&m.coarse, &m.medium, &m.fine, &m.fused]
        .iter()
        .zip(r)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}

fn stn_gradients(seed: u64, worst: &mut Worst) {
    let (mut stn, mut bundle, _) = toy_setup(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = bundle.source_size;
    // Unit-norm weights keep the functional O(1), so difference quotients
    // are not swamped by rounding.
    let mut r: [Map; 4] = core::array::from_fn(|_| random_map(&mut rng, h, w, -1.0, 1.0));
    let norm = r.iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>().sqrt();
    r.iter_mut().for_each(|m| m.data_mut().iter_mut().for_each(|v| *v /= norm));

    let mut tape = Tape::new();
    let bv = BundleVars::bind(&mut tape, &bundle, true);
    let vars = stn.forward(&mut tape, &bv, bundle.frame_side, bundle.source_size).unwrap();
    let seeds: Vec<_> =
        vars.outputs.iter().zip(&r).map(|(&v, m)| (v, Tensor::from_vec(&[1, h, w], m.data().to_vec()).unwrap())).collect();
    let grads = tape.backward(&seeds).unwrap();

    let ids: Vec<_> = stn.params().ids().collect();
    for _ in 0..24 {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..stn.params().get(id).len());
        let a = grads.param(id).map_or(0.0, |t| t.data()[k]);
        let orig = stn.params().get(id).data()[k];
        stn.params_mut().get_mut(id).data_mut()[k] = orig + FD_STEP;
        let up = outputs_functional(&stn, &bundle, &r);
        stn.params_mut().get_mut(id).data_mut()[k] = orig - FD_STEP;
        let down = outputs_functional(&stn, &bundle, &r);
        stn.params_mut().get_mut(id).data_mut()[k] = orig;
        let name = stn.params().name(id).to_string();
        worst.see(a, (up - down) / (2.0 * FD_STEP), || format!("seed {seed} param {name}[{k}]"));
    }
    for which in 0..3 {
        for _ in 0..4 {
            let var = [bv.shallow, bv.image, bv.masks][which];
            let t = match which {
                0 => &mut bundle.shallow_features,
                1 => &mut bundle.image_embedding,
                _ => &mut bundle.mask_embeddings,
            };
            let k = rng.random_range(0..t.len());
            let orig = t.data()[k];
            let a = grads.get(var).map_or(0.0, |g| g.data()[k]);
            let mut eval_at = |v: f64| {
                let t = match which {
                    0 => &mut bundle.shallow_features,
                    1 => &mut bundle.image_embedding,
                    _ => &mut bundle.mask_embeddings,
                };
                t.data_mut()[k] = v;
                outputs_functional(&stn, &bundle, &r)
            };
            let n = (eval_at(orig + FD_STEP) - eval_at(orig - FD_STEP)) / (2.0 * FD_STEP);
            eval_at(orig);
            worst.see(a, n, || format!("seed {seed} input {which}[{k}]"));
        }
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = Worst(0.0, String::new());
    for seed in 0..20 {
        loss_gradients(seed, &mut worst);
        stn_gradients(seed, &mut worst);
    }
    within(Duration::from_secs(120), start)?;
    ensure(worst.0 <= GRAD_TOL, || format!("max relative error {:e} at {}", worst.0, worst.1))?;
    Ok(format!("20 seeds, max relative error {:.2e} at {}", worst.0, worst.1))
}

// --------------------------------------------------------------- blending

fn blending_suite() -> Outcome {
    let tol = 8.0 * f64::EPSILON;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let maps = maps_set(
            random_map(&mut rng, h, w, 0.0, 1.0),
            random_map(&mut rng, h, w, 0.0, 1.0),
            random_map(&mut rng, h, w, 0.0, 1.0),
            random_map(&mut rng, h, w, 0.0, 1.0),
        );
        let b = |a: f64| blend(&maps, a).unwrap();
        ensure(b(0.0) == maps.coarse && b(0.5) == maps.medium && b(1.0) == maps.fine, || {
            format!("case {case}: endpoint identity")
        })?;
        let diff = |x: &Map, y: &Map| x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (lo, hi) in [(0.0, 0.5), (0.5, 1.0)] {
            for _ in 0..5 {
                let a1: f64 = rng.random_range(lo..=hi);
                let a2: f64 = rng.random_range(lo..=hi);
                let mid = b((a1 + a2) / 2.0);
                let avg = b(a1).zip_map(&b(a2), |x, y| (x + y) / 2.0).unwrap();
                let d = diff(&mid, &avg);
                worst = worst.max(d);
                ensure(d <= tol, || format!("case {case}: linearity off by {d:e} at {a1}, {a2}"))?;
                // Envelope between the endpoints of the half-interval.
                let a: f64 = rng.random_range(lo..=hi);
                let (e0, e1) = if lo == 0.0 { (&maps.coarse, &maps.medium) } else { (&maps.medium, &maps.fine) };
                let v = b(a);
                for j in 0..v.len() {
                    let (p, q) = (e0.data()[j], e1.data()[j]);
                    ensure(v.data()[j] >= p.min(q) && v.data()[j] <= p.max(q), || {
                        format!("case {case}: α = {a} leaves the envelope at pixel {j}")
                    })?;
                }
            }
        }
        for eps in [1e-6, 1e-9, 1e-12] {
            let below = diff(&b(0.5 - eps), &maps.medium);
            let above = diff(&b(0.5 + eps), &maps.medium);
            ensure(below <= 2.0 * eps + tol && above <= 2.0 * eps + tol, || {
                format!("case {case}: jump at 0.5 ({below:e}, {above:e})")
            })?;
        }
    }
    Ok(format!("100 map sets, max linearity error {worst:.1e}"))
}

// ----------------------------------------------------------------- ladder

fn ladder_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(1..=9);
        let (h, w) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let labels: Vec<Mask> = (0..n)
            .map(|_| {
                let p = rng.random_range(0.0..0.6);
                random_mask(&mut rng, h, w, p)
            })
            .collect();
        let ann = AnnotationSet::new(labels.clone()).unwrap();
        let l = build_ladder(&ann);
        ensure(l.coarse.is_subset_of(&l.medium) && l.medium.is_subset_of(&l.fine), || format!("case {case}: not nested"))?;
        ensure(l.coarse.count() <= l.medium.count() && l.medium.count() <= l.fine.count(), || {
            format!("case {case}: counts not monotone")
        })?;
        if n == 1 {
            ensure(l.coarse == labels[0] && l.medium == labels[0] && l.fine == labels[0], || {
                format!("case {case}: single annotator ladder differs from the label")
            })?;
        }
        // Reference: rank by edge count, ties by annotator order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (labels[i].count(), i));
        let or = |a: &Mask, b: &Mask| Mask::from_fn(h, w, |y, x| a.at(y, x) || b.at(y, x));
        let c = labels[order[0]].clone();
        let m = or(&c, &labels[order[n.div_ceil(2) - 1]]);
        let f = or(&m, &labels[order[n - 1]]);
        ensure(l.coarse == c && l.medium == m && l.fine == f, || format!("case {case}: ladder differs from reference"))?;
    }
    Ok(String::from("1000 annotation sets"))
}

// --------------------------------------------------------------- dataflow

fn dataflow_isolation() -> Outcome {
    let mut checked = 0;
    for seed in 0..5 {
        let (stn, bundle, _) = toy_setup(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = bundle.source_size;
        let mut tape = Tape::new();
        let bv = BundleVars::bind(&mut tape, &bundle, true);
        let vars = stn.forward(&mut tape, &bv, bundle.frame_side, bundle.source_size).unwrap();
        let inputs = [("E_s", bv.shallow), ("E_i", bv.image), ("E_m", bv.masks)];
        // Which inputs each output may depend on.
        let expect = [[false, true, false], [true, true, false], [true, true, true], [true, true, true]];
        for (o, deps) in expect.iter().enumerate() {
            let seedt = Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let g = tape.backward(&[(vars.outputs[o], seedt)]).unwrap();
            for (i, (name, v)) in inputs.iter().enumerate() {
                let nonzero = g.get(*v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
                ensure(nonzero == deps[i], || {
                    let out = ["coarse", "medium", "fine", "final"][o];
                    format!("seed {seed}: {out} output {} gradient from {name}", if nonzero { "has" } else { "lacks" })
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} output/input pairs over 5 networks"))
}

// ------------------------------------------------------------- evaluation

fn eval_fixture(rng: &mut ChaCha8Rng) -> (Vec<Map>, Vec<AnnotationSet>, EvalConfig) {
    let images = rng.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let n = rng.random_range(1..=3);
        // Keep the union at 12 pixels or fewer.
        let mut budget: Vec<(usize, usize)> = (0..h * w).map(|j| (j / w, j % w)).collect();
        for i in (1..budget.len()).rev() {
            budget.swap(i, rng.random_range(0..=i));
        }
        budget.truncate(rng.random_range(0..=12.min(h * w)));
        let labels = (0..n)
            .map(|_| {
                let mut m = Mask::new(h, w);
                for &(y, x) in &budget {
                    if rng.random_bool(0.6) {
                        m.set(y, x, true);
                    }
                }
                m
            })
            .collect();
        gts.push(AnnotationSet::new(labels).unwrap());
        let density = rng.random_range(0.0..1.0);
        preds.push(Map::from_fn(h, w, |_, _| if rng.random_bool(density) { rng.random_range(0.0..1.0) } else { 0.0 }));
    }
    let cfg = EvalConfig {
        tolerance: rng.random_range(0.01..0.099),
        thresholds: rng.random_range(1..=6),
        apply_nms: rng.random_bool(0.5),
    };
    (preds, gts, cfg)
}

fn eval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let (preds, gts, cfg) = eval_fixture(&mut rng);
        let thinned: Vec<Map> = preds.iter().map(|p| if cfg.apply_nms { nms_thin(p) } else { p.clone() }).collect();
        let masks: Vec<Vec<Mask>> = gts.iter().map(|g| g.labels().to_vec()).collect();
        let reference = oracle::reference_eval(&thinned, &masks, cfg.thresholds, |h, w| cfg.max_distance(h, w));
        for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
            let got = image_counts(p, g, &cfg).map_err(|e| e.to_string())?;
            for (k, c) in got.iter().enumerate() {
                let r = reference.counts[i][k];
                ensure([c.tp, c.fp, c.recalled, c.fn_] == r, || {
                    format!("case {case} image {i} threshold {k}: counts {c:?} vs reference {r:?}")
                })?;
            }
        }
        // Raw matching with wider radii than the benchmark tolerances.
        let d = rng.random_range(0.0..3.0);
        let t = rng.random_range(0.0..1.0);
        let pm = preds[0].threshold(t);
        let c = correspond(&pm, gts[0].labels(), d).map_err(|e| e.to_string())?;
        let r = oracle::brute_counts(&pm, gts[0].labels(), d);
        ensure([c.tp, c.fp, c.recalled, c.fn_] == r, || format!("case {case}: radius {d} counts {c:?} vs {r:?}"))?;

        let rep = evaluate(&preds, &gts, &cfg).map_err(|e| e.to_string())?;
        for (name, a, b) in [("ODS", rep.ods_f, reference.ods), ("OIS", rep.ois_f, reference.ois), ("AP", rep.ap, reference.ap)] {
            worst = worst.max((a - b).abs());
            ensure((a - b).abs() <= 1e-9, || format!("case {case}: {name} {a} vs reference {b}"))?;
        }
    }
    // Perfect predictions: binarised ground truth at confidence 1.
    for case in 0..100 {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let rows: Vec<usize> = (0..h).step_by(3).filter(|_| rng.random_bool(0.7)).collect();
        let rows = if rows.is_empty() { vec![0] } else { rows };
        let n = rng.random_range(1..=3);
        let labels: Vec<Mask> = (0..n)
            .map(|k| Mask::from_fn(h, w, |y, _| rows.contains(&y) && (k == 0 || rows[0] == y)))
            .collect();
        let ann = AnnotationSet::new(labels).unwrap();
        let pred = ann.union().to_map();
        let cfg = EvalConfig { thresholds: 9, ..Default::default() };
        let rep = evaluate(&[pred], &[ann], &cfg).map_err(|e| e.to_string())?;
        ensure(rep.ods_f == 1.0 && rep.ois_f == 1.0, || format!("perfect case {case}: ODS {} OIS {}", rep.ods_f, rep.ois_f))?;
    }
    within(Duration::from_secs(300), start)?;
    Ok(format!("1000 fixtures + 100 perfect, max metric error {worst:.1e}, {:.1}s", start.elapsed().as_secs_f64()))
}

// -------------------------------------------------------------- parameters

fn parameter_budget() -> Outcome {
    let n = Stn::new(StnConfig::base()).map_err(|e| e.to_string())?.parameter_count();
    ensure((800_000..=2_000_000).contains(&n), || format!("{n} parameters"))?;
    Ok(format!("{n} parameters"))
}

// ------------------------------------------------------------------ smoke

fn smoke_config(steps: u64) -> TrainConfig {
    let (grid, stride) = (8, 4);
    let toy = ToyBackbone::new(0, grid, stride).unwrap();
    let mut cfg = TrainConfig {
        provider: ProviderConfig { grid_side: grid, toy_stride: stride, ..ProviderConfig::toy(0) },
        ..Default::default()
    };
    cfg.stn = StnConfig::for_toy(&toy, grid);
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-2;
    cfg.epochs = steps;
    cfg
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let samples: Vec<Sample> = (10..12).map(|s| shapes_sample(96, 3, s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cfg = smoke_config(500);
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = ToyBackbone::from_config(&cfg.provider).map_err(|e| e.to_string())?;
    let provider = CachedProvider::new(Box::new(toy), cache.path());
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let params = trainer.stn.parameter_count();
    while trainer.epoch < trainer.config.epochs {
        trainer.run_epoch(&samples, &provider).map_err(|e| e.to_string())?;
    }
    let mut candidates = Vec::new();
    for s in &samples {
        let maps = trainer.stn.predict(&provider.extract(&s.image).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        candidates.push(candidate_sweep(&maps, 3).map_err(|e| e.to_string())?);
    }
    let gts: Vec<AnnotationSet> = samples.iter().map(|s| s.annotations.clone()).collect();
    let rep = par_best_match(&candidates, &gts, &EvalConfig::default()).map_err(|e| e.to_string())?;
    within(Duration::from_secs(600), start)?;
    ensure(rep.ods_f >= 0.90, || format!("best-match ODS {:.4} after {} steps", rep.ods_f, trainer.step))?;
    Ok(format!(
        "best-match ODS {:.4} after {} steps, {params} parameters, {:.0}s",
        rep.ods_f,
        trainer.step,
        start.elapsed().as_secs_f64()
    ))
}

// -------------------------------------------------------------- consensus

fn consensus_mc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, w) = (100, 100);
    let labels = (0..4).map(|k| Mask::filled(h, w, k < 2)).collect();
    let ann = AnnotationSet::new(labels).unwrap();
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..10 {
        let c = sample_consensus(&ann, 0.2, &mut rng).map_err(|e| e.to_string())?;
        hits += c.label.count();
        total += c.label.len();
    }
    let p = hits as f64 / total as f64;
    let expected = 1.0 - oracle::phi(-0.6);
    let rel = (p - expected).abs() / expected;
    ensure(rel <= 0.01, || format!("P = {p:.4}, expected {expected:.4}"))?;
    Ok(format!("{total} samples, P = {p:.4} vs {expected:.4} ({:.2}% off)", 100.0 * rel))
}

// --------------------------------------------------------------- ablation

fn ablation_contract() -> Outcome {
    let samples: Vec<Sample> = (0..2).map(|s| shapes_sample(48, 3, s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let tiny = |f: &dyn Fn(&mut TrainConfig)| {
        let toy = ToyBackbone::new(0, 2, 4).unwrap();
        let mut cfg = TrainConfig {
            provider: ProviderConfig { grid_side: 2, toy_stride: 4, ..ProviderConfig::toy(0) },
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        cfg.stn = StnConfig::for_toy(&toy, 2);
        f(&mut cfg);
        cfg
    };
    let train = |cfg: TrainConfig, dir: &Path| -> Result<(Trainer, Vec<u8>), String> {
        let toy = ToyBackbone::from_config(&cfg.provider).map_err(|e| e.to_string())?;
        let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
        run::train(&mut t, &samples, &toy, dir, |_| {}).map_err(|e| e.to_string())?;
        let log = std::fs::read(dir.join(run::LOG_FILE)).map_err(|e| e.to_string())?;
        Ok((t, log))
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    train(tiny(&|c| c.ablation.soc_off = true), &tmp.path().join("soc"))?;
    let loaded = checkpoint::load(&tmp.path().join("soc").join(run::LAST_CHECKPOINT)).map_err(|e| e.to_string())?;
    let toy = ToyBackbone::from_config(&loaded.config.provider).map_err(|e| e.to_string())?;
    let img = &samples[0].image;
    ensure(run::infer_image(&loaded, &toy, img, InferRequest::Alpha(0.5)).is_err(), || {
        String::from("soc_off network accepted a granularity request")
    })?;
    ensure(run::infer_image(&loaded, &toy, img, InferRequest::Sweep(3)).is_err(), || {
        String::from("soc_off network accepted a sweep request")
    })?;
    ensure(run::infer_image(&loaded, &toy, img, InferRequest::Final).is_ok(), || {
        String::from("soc_off network refused the final output")
    })?;

    let (a, log_a) = train(tiny(&|c| c.weights.lambda = 0.0), &tmp.path().join("lambda0"))?;
    let (b, log_b) = train(tiny(&|c| c.ablation.differ_off = true), &tmp.path().join("differ_off"))?;
    ensure(log_a == log_b, || String::from("λ = 0 and differ_off logs differ"))?;
    let same = a.stn.params().iter().zip(b.stn.params().iter()).all(|((_, _, x), (_, _, y))| {
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    ensure(same, || String::from("λ = 0 and differ_off weights differ"))?;
    Ok(format!("soc_off rejects α; λ = 0 and differ_off match over {} steps", a.step))
}

// ----------------------------------------------------------------- driver

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("loss-oracles", loss_oracles),
        ("gradient-check", gradient_suite),
        ("granularity-blending", blending_suite),
        ("ladder-invariants", ladder_suite),
        ("dataflow-isolation", dataflow_isolation),
        ("eval-oracle", eval_oracle),
        ("parameter-budget", parameter_budget),
        ("overfit-smoke", overfit_smoke),
        ("consensus-monte-carlo", consensus_mc),
        ("ablation-contract", ablation_contract),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {name} ({detail}; {secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({detail}; {secs:.2}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
