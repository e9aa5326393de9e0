//! Boundary key-point map generation.
//!
//! Ground-truth masks are turned into sparse maps of the boundary points with the
//! strongest local deviation from a straight edge:
//!
//! 1. trace the outer border of every 8-connected foreground component,
//! 2. score each border point by how far the lesion share of a radius-`r` disk
//!    around it departs from one half,
//! 3. keep the points whose score beats their `k` neighbors on either side along
//!    the contour,
//! 4. rasterize the survivors into a binary map.
//!
//! The lesion share treats the traced border as the lesion outline running through
//! pixel centers: border pixels count as half covered, interior pixels as fully
//! covered.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, KeyPointMap};

/// 8-neighborhood offsets in clockwise order (rows grow downwards), starting west.
const NEIGHBORS: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

/// Ordered border of one foreground component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contour {
    pub points: Vec<(usize, usize)>,
    pub closed: bool,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A contour with one deviation score per point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredContour {
    pub points: Vec<(usize, usize)>,
    /// Lesion share of the disk around each point, in `[0, 1]`.
    pub proportions: Vec<f64>,
    /// `|p - 0.5|` for each point, in `[0, 0.5]`.
    pub scores: Vec<f64>,
    pub closed: bool,
}

/// Traces the outer border of every 8-connected foreground component.
///
/// Components are visited in raster order of their first pixel. Each border starts at
/// that pixel and runs counter-clockwise on screen (down the left side first), using
/// Suzuki-Abe border following. Hole borders are not reported.
pub fn trace_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut contours = Vec::new();
    let mut stack = Vec::new();

    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) || seen[row * w + col] {
                continue;
            }
            // Mark the whole component so only its first raster pixel starts a trace.
            seen[row * w + col] = true;
            stack.push((row, col));
            while let Some((r, c)) = stack.pop() {
                for &(dr, dc) in &NEIGHBORS {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if mask.get_signed(nr, nc) {
                        let idx = nr as usize * w + nc as usize;
                        if !seen[idx] {
                            seen[idx] = true;
                            stack.push((nr as usize, nc as usize));
                        }
                    }
                }
            }
            contours.push(follow_border(mask, (row, col)));
        }
    }
    contours
}

fn step(p: (usize, usize), dir: usize) -> (isize, isize) {
    let (dr, dc) = NEIGHBORS[dir];
    (p.0 as isize + dr, p.1 as isize + dc)
}

fn direction(from: (usize, usize), to: (usize, usize)) -> usize {
    let d = (to.0 as isize - from.0 as isize, to.1 as isize - from.1 as isize);
    NEIGHBORS.iter().position(|&n| n == d).expect("pixels are 8-neighbors")
}

/// Follows the outer border starting at a pixel whose west neighbor is background.
fn follow_border(mask: &BinaryMask, start: (usize, usize)) -> Contour {
    // Clockwise search from the west neighbor finds the last pixel of the border.
    let first = (0..8).find_map(|dir| {
        let (r, c) = step(start, dir);
        mask.get_signed(r, c).then_some((r as usize, c as usize))
    });
    let Some(last) = first else {
        return Contour {
            points: vec![start],
            closed: true,
        };
    };

    let mut points = Vec::new();
    let mut prev = last;
    let mut current = start;
    loop {
        let back = direction(current, prev);
        // Counter-clockwise search starting just after the pixel we came from.
        let next = (1..=8)
            .find_map(|i| {
                let dir = (back + 8 - i) % 8;
                let (r, c) = step(current, dir);
                mask.get_signed(r, c).then_some((r as usize, c as usize))
            })
            .expect("the previous pixel is always foreground");
        points.push(current);
        if next == start && current == last {
            break;
        }
        prev = current;
        current = next;
    }
    Contour { points, closed: true }
}

/// Offsets `(dr, dc)` of the digital disk `dr² + dc² <= r²`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                offsets.push((dr, dc));
            }
        }
    }
    offsets
}

/// Lesion coverage of a pixel: 1 inside, 1/2 on the border, 0 outside.
fn coverage(mask: &BinaryMask, row: usize, col: usize) -> f64 {
    if !mask.get(row, col) {
        0.0
    } else if mask.is_boundary(row, col) {
        0.5
    } else {
        1.0
    }
}

/// Lesion share of the radius-`r` disk centered at a pixel. Disks clipped by the image
/// border are normalized by their in-bounds pixel count.
pub fn disk_proportion(mask: &BinaryMask, center: (usize, usize), offsets: &[(isize, isize)]) -> f64 {
    let (h, w) = mask.dims();
    let mut covered = 0.0;
    let mut total = 0usize;
    for &(dr, dc) in offsets {
        let (r, c) = (center.0 as isize + dr, center.1 as isize + dc);
        if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
            continue;
        }
        total += 1;
        covered += coverage(mask, r as usize, c as usize);
    }
    covered / total as f64
}

/// Scores every contour point by `|p - 0.5|`.
pub fn score_contour(mask: &BinaryMask, contour: &Contour, radius: usize) -> Result<ScoredContour> {
    if radius == 0 {
        return Err(Error::InvalidParam("disk radius must be at least 1".into()));
    }
    if let Some(&p) = contour
        .points
        .iter()
        .find(|&&(r, c)| r >= mask.height() || c >= mask.width())
    {
        return Err(Error::shape(format!(
            "contour point {p:?} outside {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    let offsets = disk_offsets(radius);
    let proportions: Vec<f64> = contour
        .points
        .iter()
        .map(|&p| disk_proportion(mask, p, &offsets))
        .collect();
    let scores = proportions.iter().map(|p| (p - 0.5).abs()).collect();
    Ok(ScoredContour {
        points: contour.points.clone(),
        proportions,
        scores,
        closed: contour.closed,
    })
}

/// Non-maximum suppression along the contour.
///
/// A point survives when its score is strictly greater than the scores of the `k`
/// points before and after it (wrapping around on closed contours). When a closed
/// contour has at most `2k + 1` points the window covers the whole contour, so only a
/// unique strict maximum can survive. Pixels visited twice by the trace are reported
/// once.
pub fn select_keypoints(scored: &ScoredContour, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::InvalidParam("suppression window k must be at least 1".into()));
    }
    let n = scored.scores.len();
    let s = &scored.scores;
    let mut selected = Vec::new();
    let mut taken = HashSet::new();
    for i in 0..n {
        let beats = |j: usize| s[i] > s[j];
        let keep = if scored.closed {
            if n <= 2 * k + 1 {
                (0..n).filter(|&j| j != i).all(beats)
            } else {
                (1..=k).all(|d| beats((i + d) % n) && beats((i + n - d) % n))
            }
        } else {
            let lo = i.saturating_sub(k);
            let hi = (i + k).min(n - 1);
            (lo..=hi).filter(|&j| j != i).all(beats)
        };
        if keep && taken.insert(scored.points[i]) {
            selected.push(scored.points[i]);
        }
    }
    Ok(selected)
}

fn check_keypoint_params(radius: usize, k: usize) -> Result<()> {
    if radius == 0 {
        return Err(Error::InvalidParam("disk radius must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParam("suppression window k must be at least 1".into()));
    }
    Ok(())
}

/// Full pipeline: trace, score, suppress, rasterize.
pub fn generate_keypoint_map(mask: &BinaryMask, radius: usize, k: usize) -> Result<KeyPointMap> {
    check_keypoint_params(radius, k)?;
    let mut map = KeyPointMap::zeros(mask.height(), mask.width());
    for contour in trace_contours(mask) {
        let scored = score_contour(mask, &contour, radius)?;
        for (r, c) in select_keypoints(&scored, k)? {
            map.set(r, c, 1.0);
        }
    }
    Ok(map)
}

/// Max-pools a full-resolution key-point map into `levels` coarser maps; level `l`
/// (1-based) uses window and stride `2^(l+1)`.
pub fn build_keypoint_pyramid(map: &KeyPointMap, levels: usize) -> Result<Vec<KeyPointMap>> {
    let (h, w) = map.dims();
    let coarsest = 1usize << (levels + 1);
    for dim in [h, w] {
        if dim % coarsest != 0 {
            return Err(Error::Dimension { dim, divisor: coarsest });
        }
    }
    Ok((1..=levels).map(|level| max_pool(map, 1 << (level + 1))).collect())
}

fn max_pool(map: &KeyPointMap, window: usize) -> KeyPointMap {
    let (h, w) = map.dims();
    let mut out = KeyPointMap::zeros(h / window, w / window);
    for ((r, c), &v) in map.values().indexed_iter() {
        let (pr, pc) = (r / window, c / window);
        if v > out.values()[[pr, pc]] {
            out.set(pr, pc, v);
        }
    }
    out
}
