//! Segmentor (UNet with adversarial attention gates) and multi-resolution
//! discriminator, with hand-written backward passes.
//!
//! The segmentor's decoder emits one attention map per depth: â⁰ at the
//! bottleneck resolution up to â^d at full resolution. Each map is the
//! channel softmax of a 1×1 projection of that stage's features, and the
//! features are multiplied by the map's non-background mass before moving
//! to the next stage. The final map â^d is the prediction ŷ.

use sha2::{Digest, Sha256};

use crate::datamodel::{
    check_divisible, one_hot, Angiogram, AttentionMapSet, DenseMask, PyramidRule, SegmentationMap,
};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, BlockCache, Conv2d, ConvBlock, ConvCache};
use crate::seed::Rng;
use crate::tensor::{
    avg_pool2, avg_pool2_backward, max_pool2, max_pool2_backward, softmax_channels,
    softmax_channels_backward, upsample_nearest2, upsample_nearest2_backward, Tensor,
};

/// Named flat parameter tensors in a fixed order. Gradient containers are
/// values of the same type.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn conv_tensors<'a>(prefix: &str, c: &'a Conv2d, out: &mut Vec<(String, &'a Vec<f64>)>) {
    out.push((format!("{prefix}.weight"), &c.weight));
    out.push((format!("{prefix}.bias"), &c.bias));
}

fn conv_tensors_mut<'a>(c: &'a mut Conv2d, out: &mut Vec<&'a mut Vec<f64>>) {
    out.push(&mut c.weight);
    out.push(&mut c.bias);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentor {
    pub depth: usize,
    pub classes: usize,
    pub base_width: usize,
    /// d+1 blocks, finest first; the last one is the bottleneck.
    pub encoder: Vec<ConvBlock>,
    /// d blocks, coarsest first.
    pub decoder: Vec<ConvBlock>,
    /// d+1 1×1 projections to class logits, coarsest first.
    pub gates: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct SegmentorCache {
    enc: Vec<BlockCache>,
    pool: Vec<(Vec<usize>, (usize, usize, usize))>,
    dec: Vec<BlockCache>,
    feats: Vec<Tensor>,
    gate: Vec<ConvCache>,
    coef: Vec<Vec<f64>>,
    skip_channels: Vec<usize>,
}

/// Non-background probability mass at each pixel.
fn foreground_mass(a: &Tensor) -> Vec<f64> {
    let p = a.plane();
    (0..p)
        .map(|i| (1..a.channels).map(|c| a.data[c * p + i]).sum())
        .collect()
}

fn gate_features(f: &Tensor, coef: &[f64]) -> Tensor {
    let mut g = f.clone();
    let p = f.plane();
    for c in 0..f.channels {
        for (v, k) in g.data[c * p..(c + 1) * p].iter_mut().zip(coef) {
            *v *= k;
        }
    }
    g
}

impl Segmentor {
    pub fn new(depth: usize, base_width: usize, classes: usize, rng: &mut Rng) -> Self {
        let width = |l: usize| base_width << l;
        let mut encoder = Vec::with_capacity(depth + 1);
        encoder.push(ConvBlock::new(1, width(0), rng));
        for l in 1..=depth {
            encoder.push(ConvBlock::new(width(l - 1), width(l), rng));
        }
        let mut decoder = Vec::with_capacity(depth);
        for i in 1..=depth {
            let l = depth - i;
            decoder.push(ConvBlock::new(width(l + 1) + width(l), width(l), rng));
        }
        let gates = (0..=depth)
            .map(|i| Conv2d::new(width(depth - i), classes, 1, rng))
            .collect();
        Self {
            depth,
            classes,
            base_width,
            encoder,
            decoder,
            gates,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            depth: self.depth,
            classes: self.classes,
            base_width: self.base_width,
            encoder: self.encoder.iter().map(ConvBlock::zeros_like).collect(),
            decoder: self.decoder.iter().map(ConvBlock::zeros_like).collect(),
            gates: self.gates.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    /// Raw forward pass on a 1×H×W tensor. Returns the d+1 attention maps,
    /// coarsest first; the last one is ŷ.
    pub fn forward_tensor(&self, x: &Tensor) -> (Vec<Tensor>, SegmentorCache) {
        let d = self.depth;
        let mut enc = Vec::with_capacity(d + 1);
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(d + 1);
        let mut pool = Vec::with_capacity(d);
        let (o, c) = self.encoder[0].forward(x);
        enc.push(c);
        enc_out.push(o);
        for l in 1..=d {
            let prev = &enc_out[l - 1];
            let (pooled, arg) = max_pool2(prev);
            pool.push((arg, prev.shape()));
            let (o, c) = self.encoder[l].forward(&pooled);
            enc.push(c);
            enc_out.push(o);
        }

        let mut maps = Vec::with_capacity(d + 1);
        let mut feats = Vec::with_capacity(d + 1);
        let mut gate = Vec::with_capacity(d + 1);
        let mut coef: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
        let mut dec = Vec::with_capacity(d);
        let mut skip_channels = Vec::with_capacity(d);

        let mut f = enc_out.pop().expect("bottleneck");
        for i in 0..=d {
            if i > 0 {
                let g = gate_features(&f, coef.last().expect("previous gate"));
                let up = upsample_nearest2(&g);
                let skip = enc_out.pop().expect("skip connection");
                skip_channels.push(skip.channels);
                let cat = Tensor::concat(&up, &skip);
                let (o, c) = self.decoder[i - 1].forward(&cat);
                dec.push(c);
                f = o;
            }
            let (logits, gc) = self.gates[i].forward(&f);
            let a = softmax_channels(&logits);
            coef.push(foreground_mass(&a));
            gate.push(gc);
            maps.push(a);
            feats.push(f.clone());
        }
        (
            maps,
            SegmentorCache {
                enc,
                pool,
                dec,
                feats,
                gate,
                coef,
                skip_channels,
            },
        )
    }

    /// Backpropagates gradients of the attention maps (coarsest first) and
    /// returns the parameter gradients.
    pub fn backward(&self, cache: &SegmentorCache, maps: &[Tensor], grad_maps: &[Tensor]) -> Segmentor {
        let d = self.depth;
        let mut grads = self.zeros_like();
        let mut grad_skips: Vec<Option<Tensor>> = vec![None; d + 1];
        // Gradient reaching the gated features of stage i from stage i+1.
        let mut grad_gated: Option<Tensor> = None;
        let mut grad_bottleneck = None;

        for i in (0..=d).rev() {
            let f = &cache.feats[i];
            let a = &maps[i];
            let mut grad_a = grad_maps[i].clone();
            let mut grad_f = Tensor::zeros_like(f);
            if let Some(gg) = grad_gated.take() {
                let p = f.plane();
                let coef = &cache.coef[i];
                let mut grad_coef = vec![0.0; p];
                for c in 0..f.channels {
                    for j in 0..p {
                        let k = c * p + j;
                        grad_f.data[k] += gg.data[k] * coef[j];
                        grad_coef[j] += gg.data[k] * f.data[k];
                    }
                }
                for c in 1..a.channels {
                    for (g, gc) in grad_a.channel_mut(c).iter_mut().zip(&grad_coef) {
                        *g += gc;
                    }
                }
            }
            let grad_logits = softmax_channels_backward(a, &grad_a);
            let gf = self.gates[i]
                .backward(&cache.gate[i], &grad_logits, &mut grads.gates[i], true)
                .expect("input gradient");
            grad_f.add_assign(&gf);

            if i == 0 {
                grad_bottleneck = Some(grad_f);
            } else {
                let grad_cat = self.decoder[i - 1]
                    .backward(&cache.dec[i - 1], &grad_f, &mut grads.decoder[i - 1], true)
                    .expect("input gradient");
                let up_channels = grad_cat.channels - cache.skip_channels[i - 1];
                let (grad_up, grad_skip) = grad_cat.split_channels(up_channels);
                grad_skips[d - i] = Some(grad_skip);
                grad_gated = Some(upsample_nearest2_backward(&grad_up));
            }
        }

        let mut grad_out = grad_bottleneck.expect("bottleneck gradient");
        for l in (0..=d).rev() {
            if l < d {
                let mut g = grad_skips[l].take().expect("skip gradient");
                g.add_assign(&grad_out);
                grad_out = g;
            }
            let gin = self.encoder[l].backward(&cache.enc[l], &grad_out, &mut grads.encoder[l], l > 0);
            if l > 0 {
                let (arg, shape) = &cache.pool[l - 1];
                grad_out = max_pool2_backward(&gin.expect("input gradient"), arg, *shape);
            }
        }
        grads
    }

    /// Validated forward pass: ŷ and the attention map set.
    pub fn forward(&self, x: &Angiogram) -> Result<(SegmentationMap, AttentionMapSet)> {
        x.check_depth(self.depth)?;
        let (maps, _) = self.forward_tensor(&x.to_tensor());
        let y = SegmentationMap::new(maps[self.depth].clone())?;
        Ok((y, AttentionMapSet::new(maps)?))
    }
}

impl Parameters for Segmentor {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (l, b) in self.encoder.iter().enumerate() {
            conv_tensors(&format!("encoder.{l}.conv1"), &b.conv1, &mut out);
            conv_tensors(&format!("encoder.{l}.conv2"), &b.conv2, &mut out);
        }
        for (l, b) in self.decoder.iter().enumerate() {
            conv_tensors(&format!("decoder.{l}.conv1"), &b.conv1, &mut out);
            conv_tensors(&format!("decoder.{l}.conv2"), &b.conv2, &mut out);
        }
        for (l, g) in self.gates.iter().enumerate() {
            conv_tensors(&format!("gate.{l}"), g, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            conv_tensors_mut(&mut b.conv1, &mut out);
            conv_tensors_mut(&mut b.conv2, &mut out);
        }
        for b in &mut self.decoder {
            conv_tensors_mut(&mut b.conv1, &mut out);
            conv_tensors_mut(&mut b.conv2, &mut out);
        }
        for g in &mut self.gates {
            conv_tensors_mut(g, &mut out);
        }
        out
    }
}

/// Scores a whole attention-map pyramid with one scalar.
///
/// Each map passes its own 3×3 adapter; starting from the finest map the
/// running features are average-pooled and summed with the next coarser
/// adapter output. A 3×3 trunk convolution, global mean pooling and a linear
/// head produce the score.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub depth: usize,
    pub classes: usize,
    pub width: usize,
    /// d+1 adapters, coarsest first (matching the map order).
    pub adapters: Vec<Conv2d>,
    pub trunk: Conv2d,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    adapters: Vec<ConvCache>,
    pre: Vec<Tensor>,
    trunk: ConvCache,
    trunk_pre: Tensor,
    pooled: Vec<f64>,
    trunk_plane: usize,
    shapes: Vec<(usize, usize)>,
}

impl Discriminator {
    pub fn new(depth: usize, classes: usize, width: usize, rng: &mut Rng) -> Self {
        let adapters = (0..=depth).map(|_| Conv2d::new(classes, width, 3, rng)).collect();
        let trunk = Conv2d::new(width, 2 * width, 3, rng);
        let head = Conv2d::new(2 * width, 1, 1, rng);
        Self {
            depth,
            classes,
            width,
            adapters,
            trunk,
            head_weight: head.weight,
            head_bias: head.bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapters: self.adapters.iter().map(Conv2d::zeros_like).collect(),
            trunk: self.trunk.zeros_like(),
            head_weight: vec![0.0; self.head_weight.len()],
            head_bias: vec![0.0; self.head_bias.len()],
            ..*self
        }
    }

    pub fn check_maps(&self, maps: &[Tensor]) -> Result<()> {
        if maps.len() != self.depth + 1 {
            return Err(Error::shape(format!(
                "discriminator expects {} maps, got {}",
                self.depth + 1,
                maps.len()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.channels != self.classes {
                return Err(Error::shape(format!(
                    "map {i} has {} channels, expected {}",
                    m.channels, self.classes
                )));
            }
            if i > 0 && (m.height != 2 * maps[i - 1].height || m.width != 2 * maps[i - 1].width) {
                return Err(Error::shape(format!("map {i} does not double map {}", i - 1)));
            }
        }
        Ok(())
    }

    /// Raw forward on maps ordered coarsest first. Shapes are assumed valid.
    pub fn forward_maps(&self, maps: &[Tensor]) -> (f64, DiscriminatorCache) {
        let d = self.depth;
        let mut adapters = Vec::with_capacity(d + 1);
        let mut pre = Vec::with_capacity(d + 1);
        let mut h: Option<Tensor> = None;
        for i in (0..=d).rev() {
            let (z, c) = self.adapters[i].forward(&maps[i]);
            let a = leaky_relu(&z);
            h = Some(match h {
                None => a,
                Some(prev) => {
                    let mut p = avg_pool2(&prev);
                    p.add_assign(&a);
                    p
                }
            });
            adapters.push(c);
            pre.push(z);
        }
        adapters.reverse();
        pre.reverse();
        let h = h.expect("at least one map");
        let (tz, tc) = self.trunk.forward(&h);
        let t = leaky_relu(&tz);
        let plane = t.plane();
        let pooled: Vec<f64> = (0..t.channels)
            .map(|c| t.channel(c).iter().sum::<f64>() / plane as f64)
            .collect();
        let score = self.head_bias[0]
            + pooled
                .iter()
                .zip(&self.head_weight)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        (
            score,
            DiscriminatorCache {
                adapters,
                pre,
                trunk: tc,
                trunk_pre: tz,
                pooled,
                trunk_plane: plane,
                shapes: maps.iter().map(|m| (m.height, m.width)).collect(),
            },
        )
    }

    /// Parameter gradients and, if requested, gradients w.r.t. every input
    /// map, for an upstream gradient `grad_score` on the output.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache,
        grad_score: f64,
        need_input: bool,
    ) -> (Discriminator, Option<Vec<Tensor>>) {
        let d = self.depth;
        let mut grads = self.zeros_like();
        grads.head_bias[0] += grad_score;
        for (g, p) in grads.head_weight.iter_mut().zip(&cache.pooled) {
            *g += grad_score * p;
        }
        let tz = &cache.trunk_pre;
        let mut grad_t = Tensor::zeros_like(tz);
        for c in 0..tz.channels {
            let g = grad_score * self.head_weight[c] / cache.trunk_plane as f64;
            grad_t.channel_mut(c).fill(g);
        }
        let grad_tz = leaky_relu_backward(tz, &grad_t);
        let mut grad_h = self
            .trunk
            .backward(&cache.trunk, &grad_tz, &mut grads.trunk, true)
            .expect("input gradient");

        let mut grad_inputs: Vec<Option<Tensor>> = vec![None; d + 1];
        for i in 0..=d {
            // h_i = pool(h_{i+1}) + act(adapter_i(map_i)); grad_h is d/dh_i.
            let gz = leaky_relu_backward(&cache.pre[i], &grad_h);
            let gi = self.adapters[i].backward(&cache.adapters[i], &gz, &mut grads.adapters[i], need_input);
            if need_input {
                grad_inputs[i] = gi;
            }
            if i < d {
                grad_h = avg_pool2_backward(&grad_h);
                debug_assert_eq!((grad_h.height, grad_h.width), cache.shapes[i + 1]);
            }
        }
        let inputs = need_input.then(|| grad_inputs.into_iter().map(|g| g.expect("input gradient")).collect());
        (grads, inputs)
    }

    /// Validated scalar score of an attention map set.
    pub fn forward(&self, maps: &AttentionMapSet) -> Result<f64> {
        self.check_maps(maps.maps())?;
        Ok(self.forward_maps(maps.maps()).0)
    }
}

impl Parameters for Discriminator {
    fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, a) in self.adapters.iter().enumerate() {
            conv_tensors(&format!("adapter.{i}"), a, &mut out);
        }
        conv_tensors("trunk", &self.trunk, &mut out);
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for a in &mut self.adapters {
            conv_tensors_mut(a, &mut out);
        }
        conv_tensors_mut(&mut self.trunk, &mut out);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// One-hot dense mask at every attention-map resolution, coarsest first.
pub fn ground_truth_pyramid(mask: &DenseMask, depth: usize, rule: PyramidRule) -> Result<Vec<Tensor>> {
    check_divisible(mask.height(), mask.width(), depth)?;
    let classes = mask.classes();
    let full = one_hot(mask, classes)?;
    let labels = mask.labels();
    let mut levels = Vec::with_capacity(depth + 1);
    for i in 0..=depth {
        let f = 1usize << (depth - i);
        let (h, w) = (mask.height() / f, mask.width() / f);
        let t = match rule {
            PyramidRule::Nearest => {
                let mut t = Tensor::zeros(classes, h, w);
                for y in 0..h {
                    for x in 0..w {
                        let c = labels.get(y * f, x * f) as usize;
                        t.set(c, y, x, 1.0);
                    }
                }
                t
            }
            PyramidRule::AvgPool => {
                let mut t = full.clone();
                for _ in 0..(depth - i) {
                    t = avg_pool2(&t);
                }
                t
            }
        };
        levels.push(t);
    }
    Ok(levels)
}

/// [`ground_truth_pyramid`] wrapped as a validated map set.
pub fn ground_truth_map_set(mask: &DenseMask, depth: usize, rule: PyramidRule) -> Result<AttentionMapSet> {
    AttentionMapSet::new(ground_truth_pyramid(mask, depth, rule)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Grid;
    use crate::nn::random_tensor;
    use rand::{Rng as _, SeedableRng};

    fn random_simplex(classes: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        softmax_channels(&random_tensor(classes, h, w, rng).scaled(2.0))
    }

    fn random_maps(depth: usize, classes: usize, size: usize, rng: &mut Rng) -> Vec<Tensor> {
        (0..=depth)
            .map(|i| {
                let s = size >> (depth - i);
                random_simplex(classes, s, s, rng)
            })
            .collect()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn segmentor_outputs_are_simplex_pyramid() {
        let mut rng = Rng::seed_from_u64(1);
        let net = Segmentor::new(3, 4, 2, &mut rng);
        let img = Angiogram::new(Grid::from_vec(16, 16, (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap()).unwrap();
        let (y, a) = net.forward(&img).unwrap();
        assert_eq!(a.maps().len(), 4);
        for (i, m) in a.maps().iter().enumerate() {
            assert_eq!(m.height, 2usize << i);
            assert!(m.simplex_error().unwrap() < 1e-12);
        }
        assert_eq!(y.probs(), a.finest());
        let bad = Angiogram::new(Grid::filled(12, 12, 0.0)).unwrap();
        assert!(matches!(net.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_gate_halves_features() {
        let mut rng = Rng::seed_from_u64(2);
        let mut net = Segmentor::new(1, 3, 2, &mut rng);
        for g in &mut net.gates {
            g.weight.iter_mut().for_each(|w| *w = 0.0);
            g.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = random_tensor(1, 4, 4, &mut rng);
        let (_, cache) = net.forward_tensor(&x);
        // uniform logits → each map is 1/C, and the foreground mass is (C−1)/C
        assert!(cache.coef[0].iter().all(|&c| (c - 0.5).abs() < 1e-15));
        let gated = gate_features(&cache.feats[0], &cache.coef[0]);
        for (g, f) in gated.data.iter().zip(&cache.feats[0].data) {
            assert!((g - 0.5 * f).abs() < 1e-15);
        }

        let mut net3 = Segmentor::new(1, 3, 3, &mut rng);
        for g in &mut net3.gates {
            g.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        let (_, cache) = net3.forward_tensor(&x);
        assert!(cache.coef[0].iter().all(|&c| (c - 2.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn segmentor_backward_matches_finite_difference() {
        let mut rng = Rng::seed_from_u64(3);
        let net = Segmentor::new(2, 2, 2, &mut rng);
        let x = random_tensor(1, 8, 8, &mut rng);
        let (maps, cache) = net.forward_tensor(&x);
        let probes: Vec<Tensor> = maps.iter().map(|m| random_tensor(m.channels, m.height, m.width, &mut rng)).collect();
        let loss = |n: &Segmentor| -> f64 {
            let (m, _) = n.forward_tensor(&x);
            m.iter().zip(&probes).map(|(a, b)| dot(a, b)).sum()
        };
        let grads = net.backward(&cache, &maps, &probes);
        assert!(grads.all_finite());

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let n_tensors = net.tensors().len();
        for t in 0..n_tensors {
            let len = net.tensors()[t].1.len();
            for &j in &[0, len / 2, len - 1] {
                let mut p = net.clone();
                p.tensors_mut()[t][j] += h;
                let mut m = net.clone();
                m.tensors_mut()[t][j] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grads.tensors()[t].1[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn discriminator_is_deterministic_and_finite() {
        let mut rng = Rng::seed_from_u64(4);
        let disc = Discriminator::new(2, 2, 4, &mut rng);
        let maps = AttentionMapSet::new(random_maps(2, 2, 8, &mut rng)).unwrap();
        assert_eq!(disc.forward(&maps).unwrap(), disc.forward(&maps).unwrap());
        for _ in 0..100 {
            let m = AttentionMapSet::new(random_maps(2, 2, 8, &mut rng)).unwrap();
            assert!(disc.forward(&m).unwrap().is_finite());
        }
        let short = AttentionMapSet::new(random_maps(1, 2, 8, &mut rng)).unwrap();
        assert!(matches!(disc.forward(&short), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_difference() {
        let mut rng = Rng::seed_from_u64(5);
        let disc = Discriminator::new(1, 2, 3, &mut rng);
        let maps = random_maps(1, 2, 4, &mut rng);
        let (_, cache) = disc.forward_maps(&maps);
        let (pgrads, gin) = disc.backward(&cache, 1.0, true);
        let gin = gin.unwrap();
        let h = 1e-6;
        for (i, m) in maps.iter().enumerate() {
            for j in 0..m.data.len() {
                let mut p = maps.clone();
                p[i].data[j] += h;
                let mut q = maps.clone();
                q[i].data[j] -= h;
                let fd = (disc.forward_maps(&p).0 - disc.forward_maps(&q).0) / (2.0 * h);
                let an = gin[i].data[j];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "map {i}[{j}]: {fd} vs {an}");
            }
        }
        for t in 0..disc.tensors().len() {
            let len = disc.tensors()[t].1.len();
            let j = rng.random_range(0..len);
            let mut p = disc.clone();
            p.tensors_mut()[t][j] += h;
            let mut q = disc.clone();
            q.tensors_mut()[t][j] -= h;
            let fd = (p.forward_maps(&maps).0 - q.forward_maps(&maps).0) / (2.0 * h);
            let an = pgrads.tensors()[t].1[j];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3));
        }
    }

    #[test]
    fn pyramid_cases() {
        let mask = DenseMask::new(Grid::filled(8, 8, 0), 2).unwrap();
        let p = ground_truth_pyramid(&mask, 3, PyramidRule::Nearest).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[3], one_hot(&mask, 2).unwrap());
        for level in &p {
            assert!(level.channel(0).iter().all(|&v| v == 1.0));
        }
        assert!(ground_truth_pyramid(&DenseMask::new(Grid::filled(6, 6, 0), 2).unwrap(), 2, PyramidRule::Nearest).is_err());
    }

    #[test]
    fn pyramid_checkerboard_matches_block_oracle() {
        let data: Vec<u8> = (0..64).map(|i| (((i / 8) + (i % 8)) % 2) as u8).collect();
        let mask = DenseMask::new(Grid::from_vec(8, 8, data.clone()).unwrap(), 2).unwrap();
        for rule in [PyramidRule::Nearest, PyramidRule::AvgPool] {
            let p = ground_truth_pyramid(&mask, 1, rule).unwrap();
            let coarse = &p[0];
            for by in 0..4 {
                for bx in 0..4 {
                    let block = [
                        data[(2 * by) * 8 + 2 * bx],
                        data[(2 * by) * 8 + 2 * bx + 1],
                        data[(2 * by + 1) * 8 + 2 * bx],
                        data[(2 * by + 1) * 8 + 2 * bx + 1],
                    ];
                    let want_vessel = match rule {
                        PyramidRule::Nearest => f64::from(block[0]),
                        PyramidRule::AvgPool => block.iter().map(|&v| f64::from(v)).sum::<f64>() / 4.0,
                    };
                    assert_eq!(coarse.at(1, by, bx), want_vessel);
                    assert_eq!(coarse.at(0, by, bx), 1.0 - want_vessel);
                }
            }
            assert!(AttentionMapSet::new(p).is_ok());
        }
    }
}
