//! Dataset layout on disk, splits, the unpaired subset, rotation
//! augmentation and the synthetic vessel phantom generator.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Angiogram, DenseMask, Grid, ScribbleLabel, UNANNOTATED};
use crate::error::{Error, Result};
use crate::scribble::{apportion, make_scribble};
use crate::seed;

/// One image with whatever labels the dataset provides.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tag: Option<String>,
    pub image: Angiogram,
    pub mask: Option<DenseMask>,
    pub scribble: Option<ScribbleLabel>,
}

impl Sample {
    pub fn mask(&self) -> Result<&DenseMask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::domain(format!("sample {} has no dense mask", self.id)))
    }

    /// The stored scribble, or one derived from the dense mask.
    pub fn scribble_or_derived(&self) -> Result<ScribbleLabel> {
        match &self.scribble {
            Some(s) => Ok(s.clone()),
            None => make_scribble(self.mask()?),
        }
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub tag: Option<String>,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub scribble: Option<String>,
}

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Result<&Sample> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::domain(format!("unknown sample id {id}")))
    }

    pub fn ids_and_tags(&self) -> Vec<(String, Option<String>)> {
        self.samples.iter().map(|s| (s.id.clone(), s.tag.clone())).collect()
    }

    /// Reads `dir/manifest.jsonl` and every raster it references.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::format(&path, format!("line {}: {err}", n + 1)))?;
            if !seen.insert(e.id.clone()) {
                return Err(Error::format(&path, format!("duplicate id {}", e.id)));
            }
            let image = read_image(&dir.join(&e.image))?
                .with_id(e.id.clone())
                .with_tag(e.tag.clone());
            let mask = match &e.mask {
                Some(p) => Some(DenseMask::new(read_labels(&dir.join(p))?, 2)?),
                None => None,
            };
            let scribble = match &e.scribble {
                Some(p) => Some(ScribbleLabel::new(read_labels(&dir.join(p))?, 2)?),
                None => None,
            };
            for (what, h, w) in mask
                .iter()
                .map(|m| ("mask", m.height(), m.width()))
                .chain(scribble.iter().map(|s| ("scribble", s.labels().height, s.labels().width)))
            {
                if (h, w) != (image.height(), image.width()) {
                    return Err(Error::format(
                        &path,
                        format!("sample {}: {what} is {h}x{w}, image {}x{}", e.id, image.height(), image.width()),
                    ));
                }
            }
            samples.push(Sample {
                id: e.id,
                tag: e.tag,
                image,
                mask,
                scribble,
            });
        }
        if samples.is_empty() {
            return Err(Error::format(&path, "manifest lists no samples"));
        }
        Ok(Self { samples })
    }

    /// Writes rasters under `images/`, `masks/`, `scribbles/` and the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks", "scribbles"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let path = dir.join(MANIFEST);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        for s in &self.samples {
            let image = format!("images/{}.png", s.id);
            write_image(&dir.join(&image), s.image.pixels())?;
            let mask = match &s.mask {
                Some(m) => {
                    let p = format!("masks/{}.png", s.id);
                    write_labels(&dir.join(&p), m.labels())?;
                    Some(p)
                }
                None => None,
            };
            let scribble = match &s.scribble {
                Some(sc) => {
                    let p = format!("scribbles/{}.png", s.id);
                    write_labels(&dir.join(&p), sc.labels())?;
                    Some(p)
                }
                None => None,
            };
            let entry = ManifestEntry {
                id: s.id.clone(),
                tag: s.tag.clone(),
                image,
                mask,
                scribble,
            };
            writeln!(out, "{}", serde_json::to_string(&entry).expect("entry serializes"))
                .map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }
}

/// A dataset directory: either a single manifest (the test split is drawn
/// by [`stratified_split`]) or `train/` and `test/` subdirectories with a
/// fixed test split.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl DataLayout {
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST).is_file() {
            return Ok(Self {
                train: Dataset::load(dir)?,
                test: None,
            });
        }
        let (tr, te) = (dir.join("train"), dir.join("test"));
        if tr.join(MANIFEST).is_file() && te.join(MANIFEST).is_file() {
            return Ok(Self {
                train: Dataset::load(&tr)?,
                test: Some(Dataset::load(&te)?),
            });
        }
        Err(Error::io(
            dir.join(MANIFEST),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest.jsonl (or train/ and test/)"),
        ))
    }

    /// Split for one cross-validation fold. With a fixed test split only
    /// the training samples are divided into folds.
    pub fn split(&self, test_fraction: f64, folds: usize, fold: usize, seed: u64) -> Result<DatasetSplit> {
        let splits = match &self.test {
            None => stratified_split(&self.train.ids_and_tags(), test_fraction, folds, seed)?,
            Some(test) => {
                let mut s = cross_validation(&self.train.ids_and_tags(), folds, seed)?;
                for sp in &mut s {
                    sp.test = test.samples.iter().map(|t| t.id.clone()).collect();
                    for t in &test.samples {
                        sp.tags.insert(t.id.clone(), t.tag.clone());
                    }
                }
                s
            }
        };
        splits
            .into_iter()
            .nth(fold)
            .ok_or_else(|| Error::domain(format!("fold {fold} of {folds}")))
    }

    pub fn sample(&self, id: &str) -> Result<&Sample> {
        self.train.get(id).or_else(|e| match &self.test {
            Some(t) => t.get(id),
            None => Err(e),
        })
    }
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

fn read_gray(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(f));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, info.bit_depth, buf))
}

/// Reads an 8- or 16-bit grayscale PNG and min-max normalizes it to [0, 1].
pub fn read_image(path: &Path) -> Result<Angiogram> {
    let (h, w, depth, buf) = read_gray(path)?;
    let raw: Vec<f64> = match depth {
        png::BitDepth::Eight => buf.iter().map(|&v| f64::from(v)).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    Angiogram::new(Grid::from_vec(h, w, min_max(raw))?)
}

/// Per-image min-max normalization; a constant image maps to zeros.
pub fn min_max(raw: Vec<f64>) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        raw.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

pub fn read_labels(path: &Path) -> Result<Grid<u8>> {
    let (h, w, depth, buf) = read_gray(path)?;
    if depth != png::BitDepth::Eight {
        return Err(Error::format(path, "label rasters must be 8-bit"));
    }
    Grid::from_vec(h, w, buf)
}

fn write_png(path: &Path, h: usize, w: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(data).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// 16-bit grayscale PNG of a [0, 1] image.
pub fn write_image(path: &Path, pixels: &Grid<f64>) -> Result<()> {
    let mut data = Vec::with_capacity(pixels.data.len() * 2);
    for &v in &pixels.data {
        data.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    write_png(path, pixels.height, pixels.width, png::BitDepth::Sixteen, &data)
}

/// 8-bit PNG of class indices (255 = unannotated).
pub fn write_labels(path: &Path, labels: &Grid<u8>) -> Result<()> {
    write_png(path, labels.height, labels.width, png::BitDepth::Eight, &labels.data)
}

/// Train / validation / test identifiers for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub tags: BTreeMap<String, Option<String>>,
}

fn strata(samples: &[(String, Option<String>)]) -> BTreeMap<String, Vec<usize>> {
    let mut s: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (_, t)) in samples.iter().enumerate() {
        s.entry(t.clone().unwrap_or_default()).or_default().push(i);
    }
    s
}

/// Splits into a stratified test set of round(N·test_fraction) samples and
/// `folds` cross-validation partitions of the rest. Returns one split per
/// fold; the test set is the same in all of them.
pub fn stratified_split(
    samples: &[(String, Option<String>)],
    test_fraction: f64,
    folds: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let groups = strata(samples);
    check_strata(&groups, folds)?;
    let total = (samples.len() as f64 * test_fraction).round() as usize;
    let quotas = apportion(&groups.values().map(Vec::len).collect::<Vec<_>>(), total);
    let mut is_test = vec![false; samples.len()];
    for ((tag, members), q) in groups.iter().zip(quotas) {
        let mut order = members.clone();
        order.shuffle(&mut seed::rng(seed, &format!("split/test/{tag}")));
        for &i in order.iter().take(q) {
            is_test[i] = true;
        }
    }
    let rest: Vec<(String, Option<String>)> = samples
        .iter()
        .zip(&is_test)
        .filter(|(_, t)| !**t)
        .map(|(s, _)| s.clone())
        .collect();
    let test: Vec<String> = samples
        .iter()
        .zip(&is_test)
        .filter(|(_, t)| **t)
        .map(|(s, _)| s.0.clone())
        .collect();
    let mut splits = folds_of(&rest, folds, seed);
    for s in &mut splits {
        s.test = test.clone();
        s.tags = samples.iter().cloned().collect();
    }
    Ok(splits)
}

/// Stratified k-fold partition with an empty test list.
pub fn cross_validation(samples: &[(String, Option<String>)], folds: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    check_strata(&strata(samples), folds)?;
    let mut splits = folds_of(samples, folds, seed);
    for s in &mut splits {
        s.tags = samples.iter().cloned().collect();
    }
    Ok(splits)
}

fn check_strata(groups: &BTreeMap<String, Vec<usize>>, folds: usize) -> Result<()> {
    if folds < 2 {
        return Err(Error::domain(format!("need at least 2 folds, got {folds}")));
    }
    for (tag, members) in groups {
        if members.len() < folds {
            return Err(Error::domain(format!(
                "stratum {tag:?} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
    }
    Ok(())
}

/// Each stratum is shuffled and dealt round-robin into folds; fold j is the
/// validation set of split j.
fn folds_of(samples: &[(String, Option<String>)], folds: usize, seed: u64) -> Vec<DatasetSplit> {
    let mut fold_of = vec![0usize; samples.len()];
    let mut offset = 0;
    for (tag, members) in strata(samples) {
        let mut order = members;
        order.shuffle(&mut seed::rng(seed, &format!("split/folds/{tag}")));
        for (k, &i) in order.iter().enumerate() {
            fold_of[i] = (k + offset) % folds;
        }
        // continue dealing where the previous stratum stopped so fold sizes
        // stay within one of each other
        offset = (offset + order.len()) % folds;
    }
    (0..folds)
        .map(|j| {
            let pick = |want: bool| {
                samples
                    .iter()
                    .zip(&fold_of)
                    .filter(|(_, &f)| (f == j) == want)
                    .map(|(s, _)| s.0.clone())
                    .collect()
            };
            DatasetSplit {
                fold: j,
                train: pick(false),
                validation: pick(true),
                test: Vec::new(),
                tags: BTreeMap::new(),
            }
        })
        .collect()
}

/// Partitions `train` into (weak, unpaired) with round(n·fraction) unpaired
/// items. Both sides keep the input order.
pub fn unpaired_subset(train: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain(format!("unpaired fraction {fraction} outside (0, 1)")));
    }
    let n = train.len();
    let k = (n as f64 * fraction).round() as usize;
    if k == 0 || k == n {
        return Err(Error::domain(format!(
            "unpaired fraction {fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "unpaired"));
    let mut unpaired = vec![false; n];
    for &i in &order[..k] {
        unpaired[i] = true;
    }
    let side = |want: bool| {
        train
            .iter()
            .zip(&unpaired)
            .filter(|(_, &u)| u == want)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok((side(false), side(true)))
}

fn sin_cos_degrees(deg: f64) -> (f64, f64) {
    // exact values at right angles keep the 90° permutation exact
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Source coordinate of an output pixel under a rotation about the centre.
fn source_coords(y: usize, x: usize, h: usize, w: usize, s: f64, c: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    // inverse rotation (counter-clockwise on screen for positive angles)
    let sx = c * dx - s * dy + cx;
    let sy = s * dx + c * dy + cy;
    (sy, sx)
}

/// Bilinear rotation of an image; pixels from outside are 0.
pub fn rotate_image(pixels: &Grid<f64>, degrees: f64) -> Grid<f64> {
    let (h, w) = (pixels.height, pixels.width);
    let (s, c) = sin_cos_degrees(degrees);
    let mut out = Grid::filled(h, w, 0.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            pixels.get(y as usize, x as usize)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_coords(y, x, h, w, s, c);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.set(y, x, v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Nearest-neighbour rotation of a label grid; pixels from outside get `fill`.
pub fn rotate_labels(labels: &Grid<u8>, degrees: f64, fill: u8) -> Grid<u8> {
    let (h, w) = (labels.height, labels.width);
    let (s, c) = sin_cos_degrees(degrees);
    let mut out = Grid::filled(h, w, fill);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_coords(y, x, h, w, s, c);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                out.set(y, x, labels.get(ry as usize, rx as usize));
            }
        }
    }
    out
}

/// Rotates an image and its scribble together. The label fill is
/// UNANNOTATED so rotated-in corners carry no supervision.
pub fn rotate_augment(image: &Angiogram, scribble: &ScribbleLabel, degrees: f64) -> Result<(Angiogram, ScribbleLabel)> {
    let mut img = Angiogram::new(rotate_image(image.pixels(), degrees))?;
    img.id = image.id.clone();
    img.tag = image.tag.clone();
    let lab = ScribbleLabel::new(rotate_labels(scribble.labels(), degrees, UNANNOTATED), scribble.classes())?;
    Ok((img, lab))
}

/// Uniform angle in [−range, range].
pub fn draw_angle(range: f64, rng: &mut seed::Rng) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

const PHANTOM_RETRIES: usize = 32;

/// Synthetic angiogram: `n_vessels` quadratic curves of width 1–4 px over a
/// textured background with multiplicative speckle and a light blur.
pub fn generate_phantom(height: usize, width: usize, n_vessels: usize, seed: u64) -> Result<(Angiogram, DenseMask)> {
    if height < 32 || width < 32 {
        return Err(Error::domain(format!("phantom must be at least 32x32, got {height}x{width}")));
    }
    let mut rng = seed::rng(seed, "phantom");
    let mut mask = Grid::filled(height, width, 0u8);
    let mut level = Grid::filled(height, width, 0.0f64);
    let mut ok = n_vessels == 0;
    for _ in 0..PHANTOM_RETRIES {
        if ok {
            break;
        }
        mask = Grid::filled(height, width, 0u8);
        level = Grid::filled(height, width, 0.0);
        for _ in 0..n_vessels {
            draw_vessel(&mut mask, &mut level, &mut rng);
        }
        let frac = mask.data.iter().filter(|&&v| v == 1).count() as f64 / (height * width) as f64;
        ok = (0.02..=0.35).contains(&frac);
    }
    if !ok {
        return Err(Error::domain(format!(
            "no {n_vessels}-vessel phantom with vessel fraction in [0.02, 0.35] after {PHANTOM_RETRIES} tries"
        )));
    }

    // low-frequency background texture from a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let speckle = Normal::new(1.0, 0.15).expect("valid std");
    let mut raw = Grid::filled(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let tex: f64 = waves
                .iter()
                .map(|&(f, theta, ph)| {
                    let t = f * (x as f64 * theta.cos() + y as f64 * theta.sin()) * std::f64::consts::TAU;
                    (t + ph).sin()
                })
                .sum::<f64>()
                / 3.0;
            let v = 0.15 + 0.08 * tex + level.get(y, x);
            raw.set(y, x, (v * speckle.sample(&mut rng)).max(0.0));
        }
    }
    // light blur: centre weight 4, edge neighbours 1
    let mut blurred = Grid::filled(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 4.0 * raw.get(y, x);
            let mut wsum = 4.0;
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                    acc += raw.get(yy as usize, xx as usize);
                    wsum += 1.0;
                }
            }
            blurred.set(y, x, acc / wsum);
        }
    }
    let image = Angiogram::new(Grid::from_vec(height, width, min_max(blurred.data))?)?;
    Ok((image, DenseMask::new(mask, 2)?))
}

fn draw_vessel(mask: &mut Grid<u8>, level: &mut Grid<f64>, rng: &mut seed::Rng) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let min_len = h.min(w) / 2.0;
    let point = |rng: &mut seed::Rng| (rng.random_range(0.0..h), rng.random_range(0.0..w));
    let p0 = point(rng);
    let mut p2 = point(rng);
    for _ in 0..64 {
        if ((p2.0 - p0.0).powi(2) + (p2.1 - p0.1).powi(2)).sqrt() >= min_len {
            break;
        }
        p2 = point(rng);
    }
    let p1 = point(rng);
    let width: usize = rng.random_range(1..=4);
    let radius = width as f64 / 2.0;
    let intensity = rng.random_range(0.5..0.85);
    let approx_len = ((p1.0 - p0.0).hypot(p1.1 - p0.1) + (p2.0 - p1.0).hypot(p2.1 - p1.1)).max(1.0);
    let steps = (approx_len * 4.0).ceil() as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let u = 1.0 - t;
        let cy = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let cx = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let r = radius.ceil() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy.floor() as isize + dy, cx.floor() as isize + dx);
                if y < 0 || x < 0 || y >= mask.height as isize || x >= mask.width as isize {
                    continue;
                }
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius {
                    mask.set(y as usize, x as usize, 1);
                    let l = level.get(y as usize, x as usize).max(intensity);
                    level.set(y as usize, x as usize, l);
                }
            }
        }
    }
}

/// A tagged phantom dataset. Each sample draws 3–8 vessels; the tag
/// records whether the sample is "sparse" (≤ 5) or "dense".
pub fn synth_dataset(count: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    let samples = crate::par::map_indexed(count, |i| -> Result<Sample> {
        let s = seed::child_seed(seed, &format!("synth/{i}"));
        let n = 3 + (seed::child_seed(s, "vessels") % 6) as usize;
        let (image, mask) = generate_phantom(height, width, n, s)?;
        let id = format!("phantom_{i:04}");
        let tag = Some(if n <= 5 { "sparse" } else { "dense" }.to_string());
        Ok(Sample {
            image: image.with_id(id.clone()).with_tag(tag.clone()),
            id,
            tag,
            mask: Some(mask),
            scribble: None,
        })
    });
    Ok(Dataset {
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}

/// Fills in missing scribbles from the dense masks.
pub fn add_scribbles(ds: &mut Dataset, overwrite: bool) -> Result<usize> {
    let todo: Vec<usize> = (0..ds.samples.len())
        .filter(|&i| overwrite || ds.samples[i].scribble.is_none())
        .collect();
    let made = crate::par::map(&todo, |&i| make_scribble(ds.samples[i].mask()?));
    for (i, s) in todo.iter().zip(made) {
        ds.samples[*i].scribble = Some(s?);
    }
    Ok(todo.len())
}
