//! Independent reference implementations used by the acceptance suite.

use granedge::core::{Map, Mask};

/// Maximum matching by exhaustive dynamic programming over subsets of the
/// ground-truth pixels. Ground truth must have at most 16 pixels.
pub fn brute_matching(pred: &Mask, gt: &Mask, d_max: f64) -> u64 {
    let pts = |m: &Mask| -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.at(y, x) {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let g = pts(gt);
    assert!(g.len() <= 16, "oracle limited to 16 ground-truth pixels");
    let near = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= d_max;
    let mut dp: Vec<i32> = vec![-1; 1 << g.len()];
    dp[0] = 0;
    for p in pts(pred) {
        let adj: Vec<usize> = (0..g.len()).filter(|&j| near(p, g[j])).collect();
        if adj.is_empty() {
            continue;
        }
        let prev = dp.clone();
        for (mask, &v) in prev.iter().enumerate() {
            if v < 0 {
                continue;
            }
            for &j in &adj {
                if mask & (1 << j) == 0 {
                    let m2 = mask | (1 << j);
                    dp[m2] = dp[m2].max(v + 1);
                }
            }
        }
    }
    dp.into_iter().max().unwrap_or(0) as u64
}

/// (tp, fp, recalled, fn) under the union / per-annotator convention.
pub fn brute_counts(pred: &Mask, gts: &[Mask], d_max: f64) -> [u64; 4] {
    let union = Mask::from_fn(pred.height(), pred.width(), |y, x| gts.iter().any(|g| g.at(y, x)));
    let tp = brute_matching(pred, &union, d_max);
    let fp = pred.count() as u64 - tp;
    let mut rec = 0;
    let mut total = 0;
    for g in gts {
        rec += brute_matching(pred, g, d_max);
        total += g.count() as u64;
    }
    [tp, fp, rec, total - rec]
}

fn prf(c: [u64; 4]) -> (f64, f64, f64) {
    let p = if c[0] + c[1] == 0 { 0.0 } else { c[0] as f64 / (c[0] + c[1]) as f64 };
    let r = if c[2] + c[3] == 0 { 0.0 } else { c[2] as f64 / (c[2] + c[3]) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn sum(a: [u64; 4], b: [u64; 4]) -> [u64; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

pub struct Reference {
    pub counts: Vec<Vec<[u64; 4]>>,
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
}

/// Reference metrics for already-thinned maps at thresholds `i / (T + 1)`.
pub fn reference_eval(thinned: &[Map], gts: &[Vec<Mask>], thresholds: usize, d_of: impl Fn(usize, usize) -> f64) -> Reference {
    let ts: Vec<f64> = (1..=thresholds).map(|i| i as f64 / (thresholds + 1) as f64).collect();
    let counts: Vec<Vec<[u64; 4]>> = thinned
        .iter()
        .zip(gts)
        .map(|(m, g)| {
            let d = d_of(m.height(), m.width());
            ts.iter().map(|&t| brute_counts(&Mask::from_fn(m.height(), m.width(), |y, x| m.at(y, x) >= t), g, d)).collect()
        })
        .collect();
    let mut curve = Vec::new();
    let mut ods = 0.0f64;
    for k in 0..ts.len() {
        let c = counts.iter().fold([0; 4], |a, ci| sum(a, ci[k]));
        let (p, r, f) = prf(c);
        ods = ods.max(f);
        curve.push((r, p));
    }
    let mut ois_c = [0; 4];
    for ci in &counts {
        let mut best = 0;
        for k in 1..ci.len() {
            if prf(ci[k]).2 > prf(ci[best]).2 {
                best = k;
            }
        }
        ois_c = sum(ois_c, ci[best]);
    }
    // Area under the interpolated curve: each recall step is weighted by
    // the best precision reachable at that recall or beyond.
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).collect();
    recalls.sort_by(f64::total_cmp);
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &r in &recalls {
        let p = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Reference { counts, ods, ois: prf(ois_c).2, ap }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
