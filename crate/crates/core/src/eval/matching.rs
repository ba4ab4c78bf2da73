//! Maximum-cardinality matching of predicted to ground-truth edge pixels.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::Mask;

const NONE: usize = usize::MAX;

/// Size of a maximum one-to-one matching between `pred` and `gt` pixels
/// closer than or equal to `d_max` (Euclidean). Hopcroft–Karp.
pub fn max_matching(pred: &Mask, gt: &Mask, d_max: f64) -> usize {
    assert_eq!(pred.size(), gt.size(), "matching needs equal sizes");
    let (h, w) = pred.size();
    let mut gt_index = vec![NONE; h * w];
    let mut n_gt = 0;
    for (i, &g) in gt.data().iter().enumerate() {
        if g {
            gt_index[i] = n_gt;
            n_gt += 1;
        }
    }
    let r = math::floor(d_max.max(0.0)) as isize;
    let d2 = d_max * d_max;
    let mut adj: Vec<Vec<usize>> = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !pred.at(y as usize, x as usize) {
                continue;
            }
            let mut nb = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if ((dy * dy + dx * dx) as f64) > d2 {
                        continue;
                    }
                    let gi = gt_index[yy as usize * w + xx as usize];
                    if gi != NONE {
                        nb.push(gi);
                    }
                }
            }
            adj.push(nb);
        }
    }
    hopcroft_karp(&adj, n_gt)
}

fn hopcroft_karp(adj: &[Vec<usize>], n_right: usize) -> usize {
    let n_left = adj.len();
    let mut match_l = vec![NONE; n_left];
    let mut match_r = vec![NONE; n_right];
    let mut dist = vec![0usize; n_left];
    let mut matched = 0;
    // Greedy start.
    for u in 0..n_left {
        if let Some(&v) = adj[u].iter().find(|&&v| match_r[v] == NONE) {
            match_l[u] = v;
            match_r[v] = u;
            matched += 1;
        }
    }
    loop {
        // BFS layering from free left vertices.
        let mut queue = VecDeque::new();
        let mut found = false;
        for u in 0..n_left {
            if match_l[u] == NONE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = NONE;
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let m = match_r[v];
                if m == NONE {
                    found = true;
                } else if dist[m] == NONE {
                    dist[m] = dist[u] + 1;
                    queue.push_back(m);
                }
            }
        }
        if !found {
            return matched;
        }
        let mut it = vec![0usize; n_left];
        for u in 0..n_left {
            if match_l[u] == NONE && augment(u, adj, &mut match_l, &mut match_r, &mut dist, &mut it) {
                matched += 1;
            }
        }
    }
}

/// Iterative layered DFS for an augmenting path from `root`.
fn augment(
    root: usize,
    adj: &[Vec<usize>],
    match_l: &mut [usize],
    match_r: &mut [usize],
    dist: &mut [usize],
    it: &mut [usize],
) -> bool {
    let mut stack = vec![root];
    while let Some(&u) = stack.last() {
        if it[u] == adj[u].len() {
            dist[u] = NONE;
            stack.pop();
            continue;
        }
        let v = adj[u][it[u]];
        it[u] += 1;
        let m = match_r[v];
        if m == NONE {
            // Flip the path held on the stack.
            let mut v = v;
            while let Some(u) = stack.pop() {
                let prev = match_l[u];
                match_l[u] = v;
                match_r[v] = u;
                v = prev;
            }
            return true;
        }
        if dist[m] != NONE && dist[m] == dist[u] + 1 {
            stack.push(m);
        }
    }
    false
}
