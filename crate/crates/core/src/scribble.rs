//! Scribble synthesis from dense masks by Zhang–Suen thinning, and
//! simulation of partial scribble availability.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::datamodel::{Angiogram, DenseMask, Grid, ScribbleLabel, BACKGROUND, UNANNOTATED, VESSEL};
use crate::error::{Error, Result};
use crate::seed;

/// Neighbour offsets (dy, dx) in Zhang–Suen order P2..P9: N, NE, E, SE, S, SW, W, NW.
const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

#[inline]
fn pixel(g: &Grid<u8>, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width && g.get(y as usize, x as usize) != 0
}

fn ring(g: &Grid<u8>, y: usize, x: usize) -> [bool; 8] {
    let mut n = [false; 8];
    for (k, (dy, dx)) in RING.iter().enumerate() {
        n[k] = pixel(g, y as isize + dy, x as isize + dx);
    }
    n
}

/// Zhang–Suen deletion test for one sub-iteration (`first` selects the
/// first or second pair of directional conditions).
fn zs_deletable(n: &[bool; 8], first: bool) -> bool {
    let b = n.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = *n;
    if first {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// A foreground pixel is simple (8-connectivity for foreground,
/// 4-connectivity for background) when removing it changes neither the
/// number of foreground components nor the number of holes.
fn is_simple(n: &[bool; 8]) -> bool {
    // Foreground neighbours must form exactly one 8-connected group.
    let mut seen = [false; 8];
    let mut groups = 0;
    for start in 0..8 {
        if !n[start] || seen[start] {
            continue;
        }
        groups += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            for j in 0..8 {
                if n[j] && !seen[j] && ring_adjacent8(k, j) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    if groups != 1 {
        return false;
    }
    // Background 4-neighbours of the centre must be joined through the ring.
    let mut seen = [false; 8];
    let mut groups = 0;
    for start in (0..8).step_by(2) {
        if n[start] || seen[start] {
            continue;
        }
        groups += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            for j in 0..8 {
                if !n[j] && !seen[j] && ring_adjacent4(k, j) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    groups == 1
}

fn offset(k: usize) -> (isize, isize) {
    RING[k]
}

fn ring_adjacent8(a: usize, b: usize) -> bool {
    let (ya, xa) = offset(a);
    let (yb, xb) = offset(b);
    a != b && (ya - yb).abs() <= 1 && (xa - xb).abs() <= 1
}

fn ring_adjacent4(a: usize, b: usize) -> bool {
    let (ya, xa) = offset(a);
    let (yb, xb) = offset(b);
    (ya - yb).abs() + (xa - xb).abs() == 1
}

fn check_binary(mask: &Grid<u8>) -> Result<()> {
    if let Some(v) = mask.data.iter().find(|&&v| v > 1) {
        return Err(Error::domain(format!("skeletonize needs a binary grid, found {v}")));
    }
    Ok(())
}

/// Zhang–Suen thinning iterated to a fixpoint. Pixels outside the grid count
/// as background.
///
/// Each sub-iteration deletes the classic parallel candidate set. The plain
/// parallel rule erases some whole components (2×2 blocks, two-pixel-thick
/// diagonals); when a sub-iteration would lose or split a component it is
/// redone sequentially in raster order, deleting only candidates that are
/// still simple points. Component counts are therefore always preserved.
pub fn skeletonize(mask: &Grid<u8>) -> Result<Grid<u8>> {
    check_binary(mask)?;
    let mut g = mask.clone();
    loop {
        let mut changed = false;
        for first in [true, false] {
            let mut candidates = Vec::new();
            for y in 0..g.height {
                for x in 0..g.width {
                    if g.get(y, x) != 0 && zs_deletable(&ring(&g, y, x), first) {
                        candidates.push((y, x));
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let (labels, before) = label_components(&g);
            let mut next = g.clone();
            for &(y, x) in &candidates {
                next.set(y, x, 0);
            }
            let mut survives = vec![false; before];
            for (i, &v) in next.data.iter().enumerate() {
                if v != 0 {
                    survives[labels[i] - 1] = true;
                }
            }
            if survives.iter().all(|&s| s) && count_components(&next) == before {
                g = next;
                changed = true;
            } else {
                for (y, x) in candidates {
                    if is_simple(&ring(&g, y, x)) {
                        g.set(y, x, 0);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return Ok(g);
        }
    }
}

/// Labels 8-connected foreground components 1..=n (0 is background).
fn label_components(mask: &Grid<u8>) -> (Vec<usize>, usize) {
    let mut label = vec![0usize; mask.data.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.data.len() {
        if mask.data[start] == 0 || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / mask.width) as isize, (i % mask.width) as isize);
            for (dy, dx) in RING {
                let (ny, nx) = (y + dy, x + dx);
                if pixel(mask, ny, nx) {
                    let j = ny as usize * mask.width + nx as usize;
                    if label[j] == 0 {
                        label[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (label, count)
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &Grid<u8>) -> usize {
    label_components(mask).1
}

/// Synthesizes a scribble from a binary dense mask.
///
/// Vessel strokes are the skeleton of the vessel region. Background strokes
/// are the skeleton of the background region, kept only at Chebyshev
/// distance ≥ 2 from any vessel pixel. Everything else is UNANNOTATED.
pub fn make_scribble(mask: &DenseMask) -> Result<ScribbleLabel> {
    if mask.classes() != 2 {
        return Err(Error::domain(format!(
            "scribble synthesis needs a binary mask, got {} classes",
            mask.classes()
        )));
    }
    let labels = mask.labels();
    let vessel = labels.map(|v| u8::from(v == VESSEL));
    let background = labels.map(|v| u8::from(v == BACKGROUND));
    let vessel_skel = skeletonize(&vessel)?;
    let bg_skel = skeletonize(&background)?;

    let mut out = Grid::filled(labels.height, labels.width, UNANNOTATED);
    for y in 0..labels.height {
        for x in 0..labels.width {
            if vessel_skel.get(y, x) != 0 {
                out.set(y, x, VESSEL);
            } else if bg_skel.get(y, x) != 0 && !near_vessel(&vessel, y, x) {
                out.set(y, x, BACKGROUND);
            }
        }
    }
    ScribbleLabel::new(out, 2)
}

fn near_vessel(vessel: &Grid<u8>, y: usize, x: usize) -> bool {
    let (y, x) = (y as isize, x as isize);
    (-1..=1).any(|dy| (-1..=1).any(|dx| pixel(vessel, y + dy, x + dx)))
}

/// Number of items that keep their scribble: ⌈p·n⌉.
pub fn retained_count(p: f64, n: usize) -> usize {
    // Guard against p·n landing a rounding error above an integer.
    let exact = p * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Chooses which of `tags.len()` items keep their scribble. Exactly
/// `⌈p·N⌉` are kept. When any tag is present the quota is apportioned across
/// tag strata by largest remainder (ties by tag order) and each stratum takes
/// a prefix of its seeded shuffle.
pub fn select_available(tags: &[Option<String>], p: f64, seed: u64) -> Result<Vec<bool>> {
    if tags.is_empty() {
        return Err(Error::domain("availability subsampling of an empty dataset"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("availability {p} outside (0, 1]")));
    }
    let n = tags.len();
    let total = retained_count(p, n);

    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let stratified = tags.iter().any(Option::is_some);
    for (i, t) in tags.iter().enumerate() {
        let key = if stratified { t.as_deref().unwrap_or("") } else { "" };
        strata.entry(key).or_default().push(i);
    }

    let quotas = apportion(
        &strata.values().map(Vec::len).collect::<Vec<_>>(),
        total,
    );
    let mut keep = vec![false; n];
    for ((tag, members), quota) in strata.iter().zip(quotas) {
        let mut order = members.clone();
        order.shuffle(&mut seed::rng(seed, &format!("availability/{tag}")));
        for &i in order.iter().take(quota) {
            keep[i] = true;
        }
    }
    Ok(keep)
}

/// Largest-remainder apportionment of `total` over groups of the given sizes.
pub(crate) fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let shares: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut quota: Vec<usize> = shares.iter().map(|s| (s + 1e-9).floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - quota[a] as f64;
        let rb = shares[b] - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        quota[i] += 1;
    }
    for (q, &s) in quota.iter_mut().zip(sizes) {
        *q = (*q).min(s);
    }
    quota
}

/// Replaces the scribbles of all but `⌈p·N⌉` samples with all-UNANNOTATED
/// labels. Selection is stratified by the angiograms' condition tags.
pub fn subsample_availability(
    dataset: &[(Angiogram, ScribbleLabel)],
    p: f64,
    seed: u64,
) -> Result<Vec<(Angiogram, ScribbleLabel)>> {
    let tags: Vec<Option<String>> = dataset.iter().map(|(a, _)| a.tag.clone()).collect();
    let keep = select_available(&tags, p, seed)?;
    Ok(dataset
        .iter()
        .zip(keep)
        .map(|((a, s), k)| {
            let s = if k {
                s.clone()
            } else {
                ScribbleLabel::unannotated(s.labels().height, s.labels().width, s.classes())
            };
            (a.clone(), s)
        })
        .collect())
}
