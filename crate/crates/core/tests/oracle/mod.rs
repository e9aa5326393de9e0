//! Independent, definition-level reference implementations used by the tests.
//! Everything here favors directness over speed.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

/// Plain row-major 0/1 grid.
pub type Grid = Vec<Vec<u8>>;

pub fn fg(grid: &Grid, r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < grid.len() && (c as usize) < grid[0].len() && grid[r as usize][c as usize] == 1
}

const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Screen angle of an offset measured counter-clockwise from east (rows grow down).
fn angle(d: (isize, isize)) -> f64 {
    (-(d.0 as f64)).atan2(d.1 as f64)
}

fn wrap(a: f64) -> f64 {
    let t = a.rem_euclid(2.0 * PI);
    if t < 1e-9 {
        2.0 * PI
    } else {
        t
    }
}

/// Neighbors of `p` visited clockwise starting at (and including) direction `from`.
fn clockwise_from(from: (isize, isize)) -> Vec<(isize, isize)> {
    let mut ds = OFFSETS.to_vec();
    ds.sort_by(|&a, &b| {
        let ka = (angle(from) - angle(a)).rem_euclid(2.0 * PI);
        let kb = (angle(from) - angle(b)).rem_euclid(2.0 * PI);
        ka.partial_cmp(&kb).unwrap()
    });
    ds
}

/// Neighbors visited counter-clockwise starting just after `from`, ending at `from`.
fn counter_clockwise_after(from: (isize, isize)) -> Vec<(isize, isize)> {
    let mut ds = OFFSETS.to_vec();
    ds.sort_by(|&a, &b| {
        let ka = wrap(angle(a) - angle(from));
        let kb = wrap(angle(b) - angle(from));
        ka.partial_cmp(&kb).unwrap()
    });
    ds
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut y = x;
    while parent[y] != root {
        let next = parent[y];
        parent[y] = root;
        y = next;
    }
    root
}

/// First raster pixel of every 8-connected foreground component, in raster order.
pub fn component_starts(grid: &Grid) -> Vec<(usize, usize)> {
    let (h, w) = (grid.len(), grid[0].len());
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if grid[r][c] == 0 {
                continue;
            }
            for &(dr, dc) in &OFFSETS {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if fg(grid, nr, nc) {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr as usize * w + nc as usize);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    let mut starts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if grid[r][c] == 1 && seen.insert(find(&mut parent, r * w + c)) {
                starts.push((r, c));
            }
        }
    }
    starts
}

/// Suzuki-Abe outer border following, steps 3.1 to 3.5, from an outer-border start.
pub fn follow(grid: &Grid, start: (usize, usize)) -> Vec<(usize, usize)> {
    let add = |p: (usize, usize), d: (isize, isize)| (p.0 as isize + d.0, p.1 as isize + d.1);
    let sub = |a: (usize, usize), b: (usize, usize)| (a.0 as isize - b.0 as isize, a.1 as isize - b.1 as isize);
    let p1 = clockwise_from((0, -1))
        .into_iter()
        .map(|d| add(start, d))
        .find(|&(r, c)| fg(grid, r, c));
    let Some(p1) = p1 else { return vec![start] };
    let p1 = (p1.0 as usize, p1.1 as usize);
    let (mut p2, mut p3) = (p1, start);
    let mut out = Vec::new();
    loop {
        let p4 = counter_clockwise_after(sub(p2, p3))
            .into_iter()
            .map(|d| add(p3, d))
            .find(|&(r, c)| fg(grid, r, c))
            .unwrap();
        let p4 = (p4.0 as usize, p4.1 as usize);
        out.push(p3);
        if p4 == start && p3 == p1 {
            return out;
        }
        p2 = p3;
        p3 = p4;
    }
}

pub fn contours(grid: &Grid) -> Vec<Vec<(usize, usize)>> {
    component_starts(grid).into_iter().map(|s| follow(grid, s)).collect()
}

/// Lesion share of the radius-`r` disk at `p` by scanning the whole image.
pub fn proportion(grid: &Grid, p: (usize, usize), radius: usize) -> f64 {
    let (mut covered, mut count) = (0.0, 0usize);
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let (dr, dc) = (r as isize - p.0 as isize, c as isize - p.1 as isize);
            if dr * dr + dc * dc > (radius * radius) as isize {
                continue;
            }
            count += 1;
            if v == 1 {
                let (ri, ci) = (r as isize, c as isize);
                let edge =
                    !(fg(grid, ri - 1, ci) && fg(grid, ri + 1, ci) && fg(grid, ri, ci - 1) && fg(grid, ri, ci + 1));
                covered += if edge { 0.5 } else { 1.0 };
            }
        }
    }
    covered / count as f64
}

/// Indices whose score beats every other index within `k` steps either way (cyclic).
pub fn strict_window_maxima(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    (0..n)
        .filter(|&i| {
            let window: BTreeSet<usize> = (1..=k)
                .flat_map(|d| [(i + d) % n, (i + n - d % n) % n])
                .filter(|&j| j != i)
                .collect();
            window.iter().all(|&j| scores[i] > scores[j])
        })
        .collect()
}

pub fn keypoint_map(grid: &Grid, radius: usize, k: usize) -> Grid {
    let mut out = vec![vec![0u8; grid[0].len()]; grid.len()];
    for contour in contours(grid) {
        let scores: Vec<f64> = contour
            .iter()
            .map(|&p| (proportion(grid, p, radius) - 0.5).abs())
            .collect();
        for i in strict_window_maxima(&scores, k) {
            let (r, c) = contour[i];
            out[r][c] = 1;
        }
    }
    out
}

pub fn boundary(grid: &Grid) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let (ri, ci) = (r as isize, c as isize);
            if v == 1
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|&(dr, dc)| !fg(grid, ri + dr, ci + dc))
            {
                out.push((r, c));
            }
        }
    }
    out
}

pub fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| ((r as f64 - r2 as f64).powi(2) + (c as f64 - c2 as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn assd(a: &Grid, b: &Grid) -> f64 {
    let (pa, pb) = (boundary(a), boundary(b));
    let (da, db) = (directed(&pa, &pb), directed(&pb, &pa));
    (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64
}

pub fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let idx = (0.95 * d.len() as f64).ceil() as usize - 1;
    d[idx]
}

pub fn hd95(a: &Grid, b: &Grid) -> f64 {
    let (pa, pb) = (boundary(a), boundary(b));
    p95(directed(&pa, &pb)).max(p95(directed(&pb, &pa)))
}

pub fn hausdorff(a: &Grid, b: &Grid) -> f64 {
    let (pa, pb) = (boundary(a), boundary(b));
    let m = |d: Vec<f64>| d.into_iter().fold(0.0, f64::max);
    m(directed(&pa, &pb)).max(m(directed(&pb, &pa)))
}

/// Dense row-major matrix helpers for the attention oracle.
pub type Mat = Vec<Vec<f64>>;

pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub struct AttentionWeights {
    pub q: (Mat, Vec<f64>),
    pub k: (Mat, Vec<f64>),
    pub v: (Mat, Vec<f64>),
    pub o: (Mat, Vec<f64>),
    pub heads: usize,
    pub sigmoid: bool,
}

/// Multi-head attention by explicit loops.
pub fn attention(queries: &Mat, keys: &Mat, p: &AttentionWeights) -> Mat {
    let q = affine(queries, &p.q.0, &p.q.1);
    let k = affine(keys, &p.k.0, &p.k.1);
    let v = affine(keys, &p.v.0, &p.v.1);
    let c = q[0].len();
    let d = c / p.heads;
    let mut mixed = vec![vec![0.0; c]; q.len()];
    for h in 0..p.heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let weights: Vec<f64> = if p.sigmoid {
                logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect()
            } else {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            };
            for t in 0..d {
                mixed[i][h * d + t] = (0..k.len()).map(|j| weights[j] * v[j][h * d + t]).sum();
            }
        }
    }
    affine(&mixed, &p.o.0, &p.o.1)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn feed_forward(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let hidden: Mat = affine(x, w1, b1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    affine(&hidden, w2, b2)
}
