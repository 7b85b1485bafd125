//! Objectives and dynamic balancing weights.
//!
//! Every differentiable loss comes in two forms: a plain scalar function on
//! the validated domain types, and a `*_grad` variant on raw tensors that
//! also returns the gradient with respect to its inputs. Batch reductions
//! are means.

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    AggregateDivisor, AttentionMapSet, ScribbleLabel, SegmentationMap, UNANNOTATED,
};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, resize_bilinear_backward, Tensor};

pub const LOG_EPS: f64 = 1e-8;

/// Per-step values of every objective term and the weights that combined
/// them. One of these is logged per optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub w_pce: f64,
    pub v_sigma: f64,
    pub v_delta: f64,
    pub l_ild: f64,
    pub alpha0: f64,
    pub kappa: f64,
    pub total_sigma: f64,
    pub total_delta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.w_pce,
            self.v_sigma,
            self.v_delta,
            self.l_ild,
            self.alpha0,
            self.kappa,
            self.total_sigma,
            self.total_delta,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// First non-finite component, for error reporting.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("w_pce", self.w_pce),
            ("v_sigma", self.v_sigma),
            ("v_delta", self.v_delta),
            ("l_ild", self.l_ild),
            ("alpha0", self.alpha0),
            ("kappa", self.kappa),
            ("total_sigma", self.total_sigma),
            ("total_delta", self.total_delta),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Class weights from annotated-pixel counts: count_i / total.
///
/// With `invert`, weights are proportional to 1/count_i over the classes
/// that occur, normalized to sum to one.
pub fn class_weights(scribbles: &[&ScribbleLabel], classes: usize, invert: bool) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for s in scribbles {
        for &v in &s.labels().data {
            if v != UNANNOTATED {
                counts[v as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoSupervision);
    }
    if !invert {
        return Ok(counts.iter().map(|&n| n as f64 / total as f64).collect());
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
        .collect();
    let s: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / s).collect())
}

/// Weighted partial cross-entropy over a batch: the mean, over every
/// annotated pixel in the batch, of −w_y·log(ŷ_y + ε). Returns the loss and
/// one gradient tensor per prediction.
pub fn weighted_partial_ce_grad(
    preds: &[&Tensor],
    scribbles: &[&ScribbleLabel],
    eps: f64,
    invert_class_weights: bool,
) -> Result<(f64, Vec<Tensor>)> {
    if preds.len() != scribbles.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} scribbles",
            preds.len(),
            scribbles.len()
        )));
    }
    let classes = preds[0].channels;
    for (p, s) in preds.iter().zip(scribbles) {
        let l = s.labels();
        if p.channels != classes || p.height != l.height || p.width != l.width {
            return Err(Error::shape(format!(
                "prediction {:?} against scribble {}x{}",
                p.shape(),
                l.height,
                l.width
            )));
        }
        if s.classes() > classes {
            return Err(Error::shape(format!(
                "scribble has {} classes, prediction {classes}",
                s.classes()
            )));
        }
    }
    let weights = class_weights(scribbles, classes, invert_class_weights)?;
    let annotated: usize = scribbles.iter().map(|s| s.annotated_count()).sum();
    let n = annotated as f64;

    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(scribbles) {
        let mut g = Tensor::zeros_like(p);
        let plane = p.plane();
        for (i, &v) in s.labels().data.iter().enumerate() {
            if v == UNANNOTATED {
                continue;
            }
            let k = v as usize * plane + i;
            let w = weights[v as usize];
            loss -= w * (p.data[k] + eps).ln();
            g.data[k] = -w / ((p.data[k] + eps) * n);
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}

/// Single-sample weighted partial cross-entropy with ε = 1e-8.
pub fn weighted_partial_ce(y: &SegmentationMap, scribble: &ScribbleLabel) -> Result<f64> {
    Ok(weighted_partial_ce_grad(&[y.probs()], &[scribble], LOG_EPS, false)?.0)
}

/// ½·mean (c − 1)² over the fake scores.
pub fn lsgan_segmentor(c_fake: &[f64]) -> f64 {
    lsgan_segmentor_grad(c_fake).0
}

pub fn lsgan_segmentor_grad(c_fake: &[f64]) -> (f64, Vec<f64>) {
    let n = c_fake.len() as f64;
    let loss = 0.5 * c_fake.iter().map(|c| (c - 1.0).powi(2)).sum::<f64>() / n;
    (loss, c_fake.iter().map(|c| (c - 1.0) / n).collect())
}

/// ½·mean (c_fake + 1)² + ½·mean (c_real − 1)².
pub fn lsgan_discriminator(c_fake: &[f64], c_real: &[f64]) -> f64 {
    lsgan_discriminator_grad(c_fake, c_real).0
}

/// Loss with gradients for the fake and the real scores.
pub fn lsgan_discriminator_grad(c_fake: &[f64], c_real: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nf = c_fake.len() as f64;
    let nr = c_real.len() as f64;
    let fake = 0.5 * c_fake.iter().map(|c| (c + 1.0).powi(2)).sum::<f64>() / nf;
    let real = 0.5 * c_real.iter().map(|c| (c - 1.0).powi(2)).sum::<f64>() / nr;
    (
        fake + real,
        c_fake.iter().map(|c| (c + 1.0) / nf).collect(),
        c_real.iter().map(|c| (c - 1.0) / nr).collect(),
    )
}

/// Intermediate values kept for [`aggregate_backward`].
#[derive(Debug, Clone)]
pub struct AggregateCache {
    shapes: Vec<(usize, usize)>,
    scales: Vec<f64>,
    mu: Tensor,
    sums: Vec<f64>,
}

fn aggregate_divisor(depth: usize, divisor: AggregateDivisor) -> f64 {
    match divisor {
        AggregateDivisor::Depth => depth.max(1) as f64,
        AggregateDivisor::Levels => (depth + 1) as f64,
    }
}

/// Bilinear upscale of every level to the finest resolution, weighted sum
/// scaled by the divisor, then renormalized per pixel to the simplex.
pub fn aggregate_grad(
    maps: &[Tensor],
    weights: &[f64],
    divisor: AggregateDivisor,
) -> Result<(Tensor, AggregateCache)> {
    if weights.len() != maps.len() {
        return Err(Error::domain(format!(
            "{} level weights for {} attention maps",
            weights.len(),
            maps.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::domain("level weights must be non-negative with a positive sum"));
    }
    let finest = maps.last().ok_or_else(|| Error::domain("empty attention map set"))?;
    let (c, h, w) = finest.shape();
    let div = aggregate_divisor(maps.len() - 1, divisor);
    let scales: Vec<f64> = weights.iter().map(|w| w / div).collect();
    let mut raw = Tensor::zeros(c, h, w);
    for (m, &k) in maps.iter().zip(&scales) {
        let up = if (m.height, m.width) == (h, w) {
            m.clone()
        } else {
            resize_bilinear(m, h, w)
        };
        for (r, u) in raw.data.iter_mut().zip(&up.data) {
            *r += k * u;
        }
    }
    let plane = h * w;
    let mut sums = vec![0.0; plane];
    for ch in 0..c {
        for (s, v) in sums.iter_mut().zip(raw.channel(ch)) {
            *s += v;
        }
    }
    let mut mu = raw;
    for ch in 0..c {
        for (v, s) in mu.channel_mut(ch).iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    let cache = AggregateCache {
        shapes: maps.iter().map(|m| (m.height, m.width)).collect(),
        scales,
        mu: mu.clone(),
        sums,
    };
    Ok((mu, cache))
}

/// Gradients w.r.t. each input level given the gradient of μ.
pub fn aggregate_backward(cache: &AggregateCache, grad_mu: &Tensor) -> Vec<Tensor> {
    let mu = &cache.mu;
    let (c, h, w) = mu.shape();
    let plane = h * w;
    // μ = r / Σr  ⇒  ∂/∂r_c = (g_c − Σ_k g_k μ_k) / Σr
    let mut dot = vec![0.0; plane];
    for ch in 0..c {
        for ((d, g), m) in dot.iter_mut().zip(grad_mu.channel(ch)).zip(mu.channel(ch)) {
            *d += g * m;
        }
    }
    let mut grad_raw = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let out = &mut grad_raw.data[ch * plane..(ch + 1) * plane];
        for i in 0..plane {
            out[i] = (grad_mu.data[ch * plane + i] - dot[i]) / cache.sums[i];
        }
    }
    cache
        .shapes
        .iter()
        .zip(&cache.scales)
        .map(|(&(mh, mw), &k)| {
            let g = grad_raw.scaled(k);
            if (mh, mw) == (h, w) {
                g
            } else {
                resize_bilinear_backward(&g, mh, mw)
            }
        })
        .collect()
}

/// μ_w(A) as a full-resolution simplex tensor.
pub fn aggregate_attention(
    maps: &AttentionMapSet,
    weights: &[f64],
    divisor: AggregateDivisor,
) -> Result<Tensor> {
    Ok(aggregate_grad(maps.maps(), weights, divisor)?.0)
}

/// Pixel-mean KL(ŷ ‖ μ) with ε inside both logs. Returns the loss and the
/// gradients w.r.t. ŷ and μ.
pub fn divergence_grad(y: &Tensor, mu: &Tensor, eps: f64) -> Result<(f64, Tensor, Tensor)> {
    if y.shape() != mu.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} against aggregate {:?}",
            y.shape(),
            mu.shape()
        )));
    }
    let n = y.plane() as f64;
    let mut loss = 0.0;
    let mut gy = Tensor::zeros_like(y);
    let mut gm = Tensor::zeros_like(mu);
    for k in 0..y.data.len() {
        let (p, q) = (y.data[k], mu.data[k]);
        let (lp, lq) = ((p + eps).ln(), (q + eps).ln());
        loss += p * (lp - lq);
        gy.data[k] = (lp - lq + p / (p + eps)) / n;
        gm.data[k] = -p / ((q + eps) * n);
    }
    Ok((loss / n, gy, gm))
}

/// Inter-layer divergence between ŷ and the aggregate of its attention maps,
/// with uniform level weights, the 1/d divisor and ε = 1e-8.
pub fn interlayer_divergence(y: &SegmentationMap, maps: &AttentionMapSet) -> Result<f64> {
    let weights = vec![1.0; maps.maps().len()];
    let mu = aggregate_attention(maps, &weights, AggregateDivisor::Depth)?;
    Ok(divergence_grad(y.probs(), &mu, LOG_EPS)?.0)
}

/// Reciprocal dynamic weight min(|W| / |V|, 𝒞); 𝒞 when V = 0.
pub fn alpha0(w_pce: f64, v_sigma: f64, clamp: f64) -> f64 {
    if v_sigma == 0.0 {
        return clamp;
    }
    (w_pce.abs() / v_sigma.abs()).min(clamp)
}

/// Unclamped ratio |V| / |W|; `fallback` when W = 0.
pub fn original_alpha0(w_pce: f64, v_sigma: f64, fallback: f64) -> f64 {
    if w_pce == 0.0 {
        return fallback;
    }
    v_sigma.abs() / w_pce.abs()
}

/// |ILD| / (|W| + |V|); 0 when the denominator vanishes.
pub fn kappa(l_ild: f64, w_pce: f64, v_sigma: f64) -> f64 {
    let denom = w_pce.abs() + v_sigma.abs();
    if denom == 0.0 {
        return 0.0;
    }
    l_ild.abs() / denom
}

/// α₀·W + α₁·V + κ·ILD together with the filled-in breakdown. The
/// discriminator fields are left at zero.
pub fn segmentor_loss(
    alpha0: f64,
    w_pce: f64,
    alpha1: f64,
    v_sigma: f64,
    kappa: f64,
    l_ild: f64,
) -> (f64, LossBreakdown) {
    let total = alpha0 * w_pce + alpha1 * v_sigma + kappa * l_ild;
    (
        total,
        LossBreakdown {
            w_pce,
            v_sigma,
            l_ild,
            alpha0,
            kappa,
            total_sigma: total,
            ..LossBreakdown::default()
        },
    )
}
