//! Shared domain types. Every constructor validates eagerly, so a value that
//! exists satisfies its invariants.

mod config;

pub use config::{
    AggregateDivisor, Alpha0Mode, LrSchedule, PyramidRule, TrainConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved label value for pixels without annotation.
pub const UNANNOTATED: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const VESSEL: u8 = 1;

/// Per-pixel channel sums must be within this of 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Single-channel intensity image in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Angiogram {
    pixels: Grid<f64>,
    pub id: Option<String>,
    pub tag: Option<String>,
}

impl Angiogram {
    pub fn new(pixels: Grid<f64>) -> Result<Self> {
        if let Some(v) = pixels
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::domain(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            id: None,
            tag: None,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_tag(mut self, tag: Option<String>) -> Self {
        self.tag = tag;
        self
    }

    pub fn pixels(&self) -> &Grid<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Checks the image can pass through `depth` 2× downsamplings.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        check_divisible(self.height(), self.width(), depth)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            channels: 1,
            height: self.height(),
            width: self.width(),
            data: self.pixels.data.clone(),
        }
    }
}

pub(crate) fn check_divisible(height: usize, width: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if height < f || width < f || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
        return Err(Error::shape(format!(
            "{height}x{width} is not divisible by 2^{depth}"
        )));
    }
    Ok(())
}

/// Sparse labels: class indices or [`UNANNOTATED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleLabel {
    labels: Grid<u8>,
    classes: usize,
}

impl ScribbleLabel {
    pub fn new(labels: Grid<u8>, classes: usize) -> Result<Self> {
        validate_classes(classes)?;
        if let Some(v) = labels
            .data
            .iter()
            .find(|&&v| v != UNANNOTATED && v as usize >= classes)
        {
            return Err(Error::domain(format!(
                "scribble value {v} is neither a class below {classes} nor UNANNOTATED"
            )));
        }
        Ok(Self { labels, classes })
    }

    pub fn unannotated(height: usize, width: usize, classes: usize) -> Self {
        Self {
            labels: Grid::filled(height, width, UNANNOTATED),
            classes,
        }
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.data.iter().filter(|&&v| v != UNANNOTATED).count()
    }

    pub fn is_empty(&self) -> bool {
        self.annotated_count() == 0
    }
}

/// Fully annotated labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask {
    labels: Grid<u8>,
    classes: usize,
}

impl DenseMask {
    pub fn new(labels: Grid<u8>, classes: usize) -> Result<Self> {
        validate_classes(classes)?;
        if let Some(v) = labels.data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::domain(format!(
                "mask value {v} is not a class below {classes}"
            )));
        }
        Ok(Self { labels, classes })
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.data.iter().filter(|&&v| v == class).count()
    }
}

fn validate_classes(classes: usize) -> Result<()> {
    if !(2..=UNANNOTATED as usize).contains(&classes) {
        return Err(Error::domain(format!("class count {classes} outside [2, 255)")));
    }
    Ok(())
}

fn check_simplex(t: &Tensor) -> Result<()> {
    match t.simplex_error() {
        Some(e) if e <= SIMPLEX_TOL => Ok(()),
        Some(e) => Err(Error::domain(format!(
            "channel sums deviate from 1 by {e:e}"
        ))),
        None => Err(Error::domain("negative or non-finite probability")),
    }
}

/// Per-pixel class probabilities, C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    probs: Tensor,
}

impl SegmentationMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        check_simplex(&probs)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.channels
    }
}

/// Attention maps â⁰…â^d from coarsest to full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapSet {
    maps: Vec<Tensor>,
}

impl AttentionMapSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::shape("empty attention map set"));
        };
        let classes = first.channels;
        for (i, m) in maps.iter().enumerate() {
            if m.channels != classes {
                return Err(Error::shape(format!(
                    "map {i} has {} channels, expected {classes}",
                    m.channels
                )));
            }
            if i > 0 {
                let prev = &maps[i - 1];
                if m.height != 2 * prev.height || m.width != 2 * prev.width {
                    return Err(Error::shape(format!(
                        "map {i} is {}x{}, expected double of {}x{}",
                        m.height, m.width, prev.height, prev.width
                    )));
                }
            }
            check_simplex(m)?;
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<Tensor> {
        self.maps
    }

    /// Decoder depth d (the set holds d+1 maps).
    pub fn depth(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn finest(&self) -> &Tensor {
        self.maps.last().expect("non-empty")
    }
}

/// Expands a dense mask into a one-hot C×H×W tensor.
pub fn one_hot(mask: &DenseMask, classes: usize) -> Result<Tensor> {
    let labels = mask.labels();
    if let Some(v) = labels.data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::domain(format!("label {v} not below {classes}")));
    }
    let mut t = Tensor::zeros(classes, labels.height, labels.width);
    let p = t.plane();
    for (i, &v) in labels.data.iter().enumerate() {
        t.data[v as usize * p + i] = 1.0;
    }
    Ok(t)
}

/// 𝟙(y_s): 1 where annotated, 0 where UNANNOTATED.
pub fn annotation_indicator(scribble: &ScribbleLabel) -> Grid<u8> {
    scribble.labels().map(|v| u8::from(v != UNANNOTATED))
}

/// Per-pixel argmax over channels; ties go to the lower class index.
pub fn argmax_labels(probs: &Tensor) -> Grid<u8> {
    let p = probs.plane();
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let mut best = 0usize;
        for c in 1..probs.channels {
            if probs.data[c * p + i] > probs.data[best * p + i] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    Grid {
        height: probs.height,
        width: probs.width,
        data: out,
    }
}
