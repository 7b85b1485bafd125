//! Acceptance suite. Prints one PASS / FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 5 9`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use octave_core::data::DataLayout;
use octave_core::datamodel::{
    AggregateDivisor, AttentionMapSet, DenseMask, Grid, PyramidRule, ScribbleLabel, SegmentationMap, TrainConfig,
    UNANNOTATED,
};
use octave_core::evaluation::{binarize, dice, friedman_test, pairwise_posthoc, POSTHOC_ALPHA};
use octave_core::losses::*;
use octave_core::network::{ground_truth_pyramid, Discriminator};
use octave_core::scribble::{count_components, make_scribble, skeletonize};
use octave_core::seed::{self, Rng as SeedRng};
use octave_core::tensor::{softmax_channels, Tensor};
use octave_core::training::{dynamic_weights, segmentor_gradient, segmentor_objective, Batch, TrainState, LOG_FILE};
use rand::Rng;

type Outcome = Result<String, String>;

/// Best validation Dice of the first desk-scale run on this code, kept to
/// flag drift.
const PINNED_DESK_DICE: f64 = 0.7744;
const DESK_DRIFT: f64 = 0.05;

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut desk = Desk::default();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| {
        match &r {
            Ok(m) => println!("PASS criterion {n} ({name}): {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {m}");
            }
        }
    };
    let crits: [(usize, &str, fn(&mut Desk) -> Outcome); 10] = [
        (1, "loss gradients", |_| loss_gradients()),
        (2, "oracle equivalence", |_| oracle_equivalence()),
        (3, "alpha0 clamp", |_| alpha0_clamp()),
        (4, "divergence properties", |_| divergence_properties()),
        (5, "skeletonization", |_| skeletonization()),
        (6, "determinism", determinism),
        (7, "desk-scale training", desk_training),
        (8, "divergence term non-inferiority", ssds_direction),
        (9, "statistics", |_| statistics()),
        (10, "availability grid", availability_grid),
    ];
    for (n, name, f) in crits {
        if on(n) {
            let t = Instant::now();
            let r = f(&mut desk);
            report(n, name, r.map(|m| format!("{m} [{:.1}s]", t.elapsed().as_secs_f64())));
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(purpose: &str) -> SeedRng {
    seed::rng(7, purpose)
}

fn simplex(c: usize, h: usize, w: usize, rng: &mut SeedRng) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    softmax_channels(&Tensor::from_vec(c, h, w, data).unwrap())
}

fn scribble(h: usize, w: usize, rng: &mut SeedRng) -> ScribbleLabel {
    let mut data: Vec<u8> = (0..h * w)
        .map(|_| match rng.random_range(0..4) {
            0 => 0,
            1 => 1,
            _ => UNANNOTATED,
        })
        .collect();
    data[0] = 1;
    ScribbleLabel::new(Grid::from_vec(h, w, data).unwrap(), 2).unwrap()
}

/// Coarsest-first maps for `depth` with the finest at size×size.
fn pyramid(depth: usize, size: usize, rng: &mut SeedRng) -> Vec<Tensor> {
    (0..=depth).map(|i| {
        let s = size >> (depth - i);
        simplex(2, s, s, rng)
    }).collect()
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn unflatten(like: &[Tensor], x: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.data.len();
            let out = Tensor::from_vec(t.channels, t.height, t.width, x[off..off + n].to_vec()).unwrap();
            off += n;
            out
        })
        .collect()
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

/// Worst relative error of `an` against central differences of `f` at `x`.
fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], an: &[f64]) -> f64 {
    assert_eq!(x.len(), an.len());
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(FD_FLOOR));
    }
    worst
}

fn loss_gradients() -> Outcome {
    let mut rng = rng("criterion/1");
    let mut worst = [0.0f64; 6];
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let preds = vec![simplex(2, h, w, &mut rng), simplex(2, h, w, &mut rng)];
        let scr = [scribble(h, w, &mut rng), scribble(h, w, &mut rng)];
        let invert = rng.random_bool(0.5);
        let pce = |x: &[f64]| {
            let p = unflatten(&preds, x);
            weighted_partial_ce_grad(&[&p[0], &p[1]], &[&scr[0], &scr[1]], LOG_EPS, invert).unwrap().0
        };
        let (_, g) = weighted_partial_ce_grad(&[&preds[0], &preds[1]], &[&scr[0], &scr[1]], LOG_EPS, invert).unwrap();
        worst[0] = worst[0].max(fd_error(pce, &flatten(&preds), &flatten(&g)));

        let fake: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let real: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = lsgan_segmentor_grad(&fake);
        worst[1] = worst[1].max(fd_error(lsgan_segmentor, &fake, &g));
        let (_, gf, gr) = lsgan_discriminator_grad(&fake, &real);
        let joint: Vec<f64> = fake.iter().chain(&real).copied().collect();
        let an: Vec<f64> = gf.iter().chain(&gr).copied().collect();
        worst[2] = worst[2].max(fd_error(|x| lsgan_discriminator(&x[..4], &x[4..]), &joint, &an));

        // the segmentor adversarial term seen through the discriminator
        let maps = pyramid(2, 8, &mut rng);
        let disc = Discriminator::new(2, 2, 3, &mut rng);
        let (score, cache) = disc.forward_maps(&maps);
        let (_, gs) = lsgan_segmentor_grad(&[score]);
        let (_, gm) = disc.backward(&cache, gs[0], true);
        let through = |x: &[f64]| lsgan_segmentor(&[disc.forward_maps(&unflatten(&maps, x)).0]);
        worst[3] = worst[3].max(fd_error(through, &flatten(&maps), &flatten(&gm.unwrap())));

        let depth = rng.random_range(1..=3);
        let maps = pyramid(depth, 8, &mut rng);
        let y = simplex(2, 8, 8, &mut rng);
        let weights: Vec<f64> = (0..=depth).map(|_| rng.random_range(0.2..2.0)).collect();
        let div = if rng.random_bool(0.5) { AggregateDivisor::Depth } else { AggregateDivisor::Levels };
        let ild = |x: &[f64]| {
            let (y, m) = (unflatten(&[y.clone()], &x[..128]), unflatten(&maps, &x[128..]));
            let (mu, _) = aggregate_grad(&m, &weights, div).unwrap();
            divergence_grad(&y[0], &mu, LOG_EPS).unwrap().0
        };
        let (mu, cache) = aggregate_grad(&maps, &weights, div).unwrap();
        let (_, gy, gmu) = divergence_grad(&y, &mu, LOG_EPS).unwrap();
        let gm = aggregate_backward(&cache, &gmu);
        let x: Vec<f64> = y.data.iter().copied().chain(flatten(&maps)).collect();
        let an: Vec<f64> = gy.data.iter().copied().chain(flatten(&gm)).collect();
        worst[4] = worst[4].max(fd_error(ild, &x, &an));

        let probe = Tensor::from_vec(2, 8, 8, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let set = AttentionMapSet::new(maps.clone()).unwrap();
        assert_eq!(aggregate_attention(&set, &weights, div).unwrap(), mu);
        // perturbed maps leave the simplex, so differentiate the raw aggregate
        let agg = |x: &[f64]| {
            let mu = aggregate_grad(&unflatten(&maps, x), &weights, div).unwrap().0;
            mu.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let gm = aggregate_backward(&cache, &probe);
        worst[5] = worst[5].max(fd_error(agg, &flatten(&maps), &flatten(&gm)));
    }
    let names = ["partial ce", "lsgan segmentor", "lsgan discriminator", "lsgan via discriminator", "divergence", "aggregate"];
    let max = worst.iter().copied().fold(0.0, f64::max);
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    check(max < 1e-4, format!("max relative error {max:.2e} ({})", detail.join(", ")))?;
    Ok(format!("20 instances each, max relative error {max:.2e}"))
}

/// Direct pixel loop for the weighted partial cross-entropy of one image.
fn pce_oracle(y: &Tensor, s: &ScribbleLabel) -> f64 {
    let mut counts = [0.0f64; 2];
    for &v in &s.labels().data {
        if v != UNANNOTATED {
            counts[v as usize] += 1.0;
        }
    }
    let total = counts[0] + counts[1];
    let mut sum = 0.0;
    for yy in 0..y.height {
        for xx in 0..y.width {
            let v = s.labels().get(yy, xx);
            if v == UNANNOTATED {
                continue;
            }
            for c in 0..2 {
                let onehot = if c == v as usize { 1.0 } else { 0.0 };
                sum -= counts[c] / total * onehot * (y.at(c, yy, xx) + 1e-8).ln();
            }
        }
    }
    sum / total
}

/// Hat-function bilinear resize with half-pixel centres.
fn resize_oracle(src: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(src.channels, h, w);
    let sy = src.height as f64 / h as f64;
    let sx = src.width as f64 / w as f64;
    for c in 0..src.channels {
        for y in 0..h {
            for x in 0..w {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
                let mut v = 0.0;
                for yy in 0..src.height {
                    for xx in 0..src.width {
                        let wy = (1.0 - (fy - yy as f64).abs()).max(0.0);
                        let wx = (1.0 - (fx - xx as f64).abs()).max(0.0);
                        v += wy * wx * src.at(c, yy, xx);
                    }
                }
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// KL(ŷ ‖ μ) with μ the uniform-weight aggregate scaled by 1/d, computed
/// pixel by pixel.
fn ild_oracle(y: &Tensor, maps: &[Tensor]) -> f64 {
    let d = (maps.len() - 1) as f64;
    let ups: Vec<Tensor> = maps.iter().map(|m| resize_oracle(m, y.height, y.width)).collect();
    let mut total = 0.0;
    for yy in 0..y.height {
        for xx in 0..y.width {
            let raw: Vec<f64> = (0..y.channels).map(|c| ups.iter().map(|u| u.at(c, yy, xx) / d).sum()).collect();
            let z: f64 = raw.iter().sum();
            for c in 0..y.channels {
                let p = y.at(c, yy, xx);
                let q = raw[c] / z;
                total += p * ((p + 1e-8).ln() - (q + 1e-8).ln());
            }
        }
    }
    total / (y.height * y.width) as f64
}

fn oracle_equivalence() -> Outcome {
    let mut rng = rng("criterion/2");
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let y = simplex(2, h, w, &mut rng);
        let s = scribble(h, w, &mut rng);
        let got = weighted_partial_ce(&SegmentationMap::new(y.clone()).unwrap(), &s).unwrap();
        worst[0] = worst[0].max((got - pce_oracle(&y, &s)).abs());

        let depth = rng.random_range(1..=3);
        let size = 8;
        let maps = pyramid(depth, size, &mut rng);
        let yy = simplex(2, size, size, &mut rng);
        let got = interlayer_divergence(
            &SegmentationMap::new(yy.clone()).unwrap(),
            &AttentionMapSet::new(maps.clone()).unwrap(),
        )
        .unwrap();
        worst[1] = worst[1].max((got - ild_oracle(&yy, &maps)).abs());

        let bits = |rng: &mut SeedRng, density: f64| {
            let v = (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect();
            DenseMask::new(Grid::from_vec(h, w, v).unwrap(), 2).unwrap()
        };
        let (da, db) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        let (a, b) = (bits(&mut rng, da), bits(&mut rng, db));
        let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..h * w {
            let (x, z) = (a.labels().data[i] == 1, b.labels().data[i] == 1);
            if x {
                na += 1.0;
            }
            if z {
                nb += 1.0;
            }
            if x && z {
                inter += 1.0;
            }
        }
        let want = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        worst[2] = worst[2].max((dice(&a, &b).unwrap() - want).abs());

        let bin = binarize(&SegmentationMap::new(y.clone()).unwrap());
        let mut mismatched = 0.0;
        for r in 0..h {
            for c in 0..w {
                let want = u8::from(y.at(1, r, c) > y.at(0, r, c));
                if bin.labels().get(r, c) != want {
                    mismatched = 1.0;
                }
            }
        }
        worst[3] = worst[3].max(mismatched);
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    check(
        max < 1e-9,
        format!(
            "deviations: partial ce {:.1e}, divergence {:.1e}, dice {:.1e}, binarize {}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )?;
    Ok(format!("100 instances each, max deviation {max:.1e}"))
}

fn tiny_state_and_batch() -> (TrainState, Batch) {
    let cfg = TrainConfig {
        depth: 2,
        base_width: 2,
        disc_width: 2,
        ..TrainConfig::default()
    };
    let (img, mask) = octave_core::data::generate_phantom(32, 32, 3, 21).unwrap();
    let (_, other) = octave_core::data::generate_phantom(32, 32, 4, 22).unwrap();
    let batch = Batch {
        images: vec![img.to_tensor()],
        scribbles: vec![Some(make_scribble(&mask).unwrap())],
        unpaired: vec![ground_truth_pyramid(&other, 2, PyramidRule::Nearest).unwrap()],
    };
    (TrainState::new(&cfg).unwrap(), batch)
}

fn alpha0_clamp() -> Outcome {
    let mut rng = rng("criterion/3");
    let cfg = TrainConfig::default();
    let mut pairs = 0;
    for i in 0..=80 {
        let ratio = 10f64.powf(-4.0 + 0.1 * i as f64);
        for _ in 0..5 {
            let v = rng.random_range(0.01..10.0);
            let w = ratio * v;
            let want = (w / v).min(0.1);
            let got = alpha0(w, v, cfg.clamp_c);
            check(got == want, format!("w={w} v={v}: {got} != {want}"))?;
            let (via_step, _) = dynamic_weights(&cfg, Some(w), v, 0.0);
            check(via_step == want, format!("step weight {via_step} != {want}"))?;
            if ratio > 0.1 * (1.0 + 1e-12) {
                check(got == 0.1, format!("ratio {ratio} not clamped"))?;
            }
            pairs += 1;
        }
    }

    // Holding α₀ and κ fixed at their detached values, the analytic step
    // gradient must match finite differences; any dα₀/dθ term would break it.
    let (state, batch) = tiny_state_and_batch();
    let (grad, a0, k) = segmentor_gradient(&state, &batch).map_err(|e| e.to_string())?;
    use octave_core::network::Parameters;
    let mut worst: f64 = 0.0;
    let mut live_gap: f64 = 0.0;
    let h = 1e-6;
    for t in 0..state.segmentor.tensors().len() {
        let j = 0;
        let mut p = state.clone();
        p.segmentor.tensors_mut()[t][j] += h;
        let mut m = state.clone();
        m.segmentor.tensors_mut()[t][j] -= h;
        let frozen = (segmentor_objective(&p, &batch, a0, k).unwrap() - segmentor_objective(&m, &batch, a0, k).unwrap())
            / (2.0 * h);
        let an = grad.tensors()[t].1[j];
        worst = worst.max((frozen - an).abs() / frozen.abs().max(an.abs()).max(1e-3));
        let (_, ap, kp) = segmentor_gradient(&p, &batch).unwrap();
        let (_, am, km) = segmentor_gradient(&m, &batch).unwrap();
        let live = (segmentor_objective(&p, &batch, ap, kp).unwrap() - segmentor_objective(&m, &batch, am, km).unwrap())
            / (2.0 * h);
        live_gap = live_gap.max((live - an).abs());
    }
    check(worst < 1e-4, format!("gradient with frozen weights off by {worst:.2e}"))?;
    Ok(format!(
        "{pairs} pairs exact; step gradient matches frozen-weight differences ({worst:.1e}), \
         differs from live-weight differences by up to {live_gap:.1e}"
    ))
}

fn divergence_properties() -> Outcome {
    let mut rng = rng("criterion/4");
    let mut at_equality: f64 = 0.0;
    for _ in 0..20 {
        let depth = rng.random_range(1..=3);
        let maps = AttentionMapSet::new(pyramid(depth, 8, &mut rng)).unwrap();
        let mu = aggregate_attention(&maps, &vec![1.0; depth + 1], AggregateDivisor::Depth).unwrap();
        let v = interlayer_divergence(&SegmentationMap::new(mu).unwrap(), &maps).unwrap();
        at_equality = at_equality.max(v.abs());
    }
    check(at_equality < 1e-9, format!("divergence at equality {at_equality:.2e}"))?;

    let mut lowest = f64::INFINITY;
    for i in 0..1000 {
        let depth = rng.random_range(1..=3);
        let maps = AttentionMapSet::new(pyramid(depth, 8, &mut rng)).unwrap();
        let mut y = simplex(2, 8, 8, &mut rng);
        if i % 2 == 1 {
            // a prediction within 1e-6 of the aggregate, where roundoff matters most
            let mu = aggregate_attention(&maps, &vec![1.0; depth + 1], AggregateDivisor::Depth).unwrap();
            let noise = y.data.clone();
            for (v, (m, r)) in y.data.iter_mut().zip(mu.data.iter().zip(noise)) {
                *v = m + 1e-6 * (r - 0.5);
            }
            for k in 0..64 {
                let z = y.data[k] + y.data[64 + k];
                y.data[k] /= z;
                y.data[64 + k] /= z;
            }
        }
        let y = SegmentationMap::new(y).unwrap();
        lowest = lowest.min(interlayer_divergence(&y, &maps).unwrap());
    }
    check(lowest >= -10.0 * LOG_EPS, format!("divergence reached {lowest:.3e}"))?;

    // partial ce inputs drawn as in criterion 2
    let mut rng = self::rng("criterion/2");
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let y = simplex(2, h, w, &mut rng);
        let s = scribble(h, w, &mut rng);
        let base = weighted_partial_ce(&SegmentationMap::new(y.clone()).unwrap(), &s).unwrap();
        let mut z = y.clone();
        let plane = h * w;
        for (i, &v) in s.labels().data.iter().enumerate() {
            if v == UNANNOTATED {
                let a = rng.random_range(0.0..1.0);
                z.data[i] = a;
                z.data[plane + i] = 1.0 - a;
            }
        }
        let moved = weighted_partial_ce(&SegmentationMap::new(z).unwrap(), &s).unwrap();
        check(moved == base, format!("unannotated perturbation moved the loss {base} -> {moved}"))?;
        // keep the stream aligned with criterion 2's draws
        let depth = rng.random_range(1..=3);
        pyramid(depth, 8, &mut rng);
        simplex(2, 8, 8, &mut rng);
        let (_, _) = (rng.random_range(0.0..0.6f64), rng.random_range(0.0..0.6f64));
    }
    Ok(format!(
        "equality {at_equality:.1e}, minimum over 1000 draws {lowest:.1e}, partial ce invariant on 100 instances"
    ))
}

fn blob(seed: u64) -> Grid<u8> {
    let mut rng = seed::rng(seed, "blob");
    let (h, w) = (32usize, 32usize);
    let mut g = Grid::filled(h, w, 0u8);
    for _ in 0..rng.random_range(1..=6) {
        let (cy, cx) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        if rng.random_bool(0.5) {
            let r = rng.random_range(1..=6) as isize;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                        g.set(y as usize, x as usize, 1);
                    }
                }
            }
        } else {
            let (rh, rw) = (rng.random_range(1..=10), rng.random_range(1..=10));
            for y in cy.max(0) as usize..(cy as usize + rh).min(h) {
                for x in cx.max(0) as usize..(cx as usize + rw).min(w) {
                    g.set(y, x, 1);
                }
            }
        }
    }
    g
}

/// Textbook Zhang–Suen: two parallel sub-iterations until nothing changes.
fn zhang_suen_oracle(img: &Grid<u8>) -> Grid<u8> {
    let mut g = img.clone();
    let at = |g: &Grid<u8>, y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= g.height as isize || x >= g.width as isize {
            0
        } else {
            g.get(y as usize, x as usize)
        }
    };
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut kill = Vec::new();
            for y in 0..g.height as isize {
                for x in 0..g.width as isize {
                    if at(&g, y, x) == 0 {
                        continue;
                    }
                    let p2 = at(&g, y - 1, x);
                    let p3 = at(&g, y - 1, x + 1);
                    let p4 = at(&g, y, x + 1);
                    let p5 = at(&g, y + 1, x + 1);
                    let p6 = at(&g, y + 1, x);
                    let p7 = at(&g, y + 1, x - 1);
                    let p8 = at(&g, y, x - 1);
                    let p9 = at(&g, y - 1, x - 1);
                    let seq = [p2, p3, p4, p5, p6, p7, p8, p9, p2];
                    let b: u8 = seq[..8].iter().sum();
                    let a = seq.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
                    let (c, d) = if step == 0 {
                        (p2 * p4 * p6, p4 * p6 * p8)
                    } else {
                        (p2 * p4 * p8, p2 * p6 * p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && c == 0 && d == 0 {
                        kill.push((y as usize, x as usize));
                    }
                }
            }
            for (y, x) in &kill {
                g.set(*y, *x, 0);
            }
            changed |= !kill.is_empty();
        }
        if !changed {
            return g;
        }
    }
}

fn skeletonization() -> Outcome {
    for i in 0..50 {
        let m = blob(1000 + i);
        let s = skeletonize(&m).unwrap();
        check(
            s.data.iter().zip(&m.data).all(|(&a, &b)| a <= b),
            format!("blob {i}: skeleton leaves the foreground"),
        )?;
        let (before, after) = (count_components(&m), count_components(&s));
        check(before == after, format!("blob {i}: {before} components became {after}"))?;
        check(skeletonize(&s).unwrap() == s, format!("blob {i}: not idempotent"))?;
    }
    let mut square = Grid::filled(9, 9, 0u8);
    for y in 2..7 {
        for x in 2..7 {
            square.set(y, x, 1);
        }
    }
    let got = skeletonize(&square).unwrap();
    let want = zhang_suen_oracle(&square);
    check(got == want, format!("5x5 square: got {:?}, oracle {:?}", got.data, want.data))?;
    let kept: Vec<(usize, usize)> = (0..81).filter(|&i| got.data[i] == 1).map(|i| (i / 9, i % 9)).collect();
    Ok(format!("50 blobs hold all three properties; 5x5 square thins to {kept:?} as the oracle does"))
}

/// Two-sided p of Student's t with 5 degrees of freedom in closed form.
fn t5_two_sided(t: f64) -> f64 {
    let theta = (t.abs() / 5f64.sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let a = 2.0 / std::f64::consts::PI * (theta + s * (c + 2.0 / 3.0 * c.powi(3)));
    1.0 - a
}

fn statistics() -> Outcome {
    let scores = vec![
        vec![0.70, 0.72, 0.68, 0.75, 0.71, 0.69],
        vec![0.74, 0.76, 0.73, 0.77, 0.75, 0.70],
        vec![0.78, 0.75, 0.79, 0.80, 0.77, 0.70],
    ];
    // Ranks per dataset (low score = rank 1):
    //   d0 1 2 3 | d1 1 3 2 | d2..d4 1 2 3 | d5 1 2.5 2.5
    // Rank sums 6, 13.5, 16.5. Uncorrected statistic
    //   12/(6·3·4)·(36 + 182.25 + 272.25) − 3·6·4 = 81.75 − 72 = 9.75.
    // One pair tied in d5: correction 1 − 6/(6·24) = 23/24.
    let statistic: f64 = 9.75 * 24.0 / 23.0;
    // chi-square with 2 dof has survival exp(−x/2)
    let p = (-statistic / 2.0).exp();
    let f = friedman_test(&scores).map_err(|e| e.to_string())?;
    check((f.statistic - statistic).abs() < 1e-9, format!("statistic {} vs {statistic}", f.statistic))?;
    check((f.p_value - p).abs() < 1e-9, format!("p {} vs {p}", f.p_value))?;

    let pairs = pairwise_posthoc(&scores, POSTHOC_ALPHA).map_err(|e| e.to_string())?;
    check(pairs.len() == 3, format!("{} pairs", pairs.len()))?;
    let mut worst: f64 = 0.0;
    for r in &pairs {
        let d: Vec<f64> = scores[r.a].iter().zip(&scores[r.b]).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / 6.0;
        let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0).sqrt();
        let t = mean / (sd / 6f64.sqrt());
        let corrected = (3.0 * t5_two_sided(t)).min(1.0);
        worst = worst.max((r.t - t).abs()).max((r.p_corrected - corrected).abs());
        check(
            r.significant == (corrected < POSTHOC_ALPHA),
            format!("pair {}-{} significance", r.a, r.b),
        )?;
    }
    check(worst < 1e-9, format!("posthoc deviates by {worst:.2e}"))?;

    let ties = vec![vec![0.5; 6], vec![0.5; 6], vec![0.5; 6]];
    let f0 = friedman_test(&ties).map_err(|e| e.to_string())?;
    check(f0.statistic == 0.0, format!("all-tie statistic {}", f0.statistic))?;
    Ok(format!(
        "statistic {:.9} p {:.3e}; posthoc within {worst:.1e}; all-tie statistic 0",
        f.statistic, f.p_value
    ))
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

#[derive(Default)]
struct Desk {
    root: Option<tempfile::TempDir>,
    reference: Option<(PathBuf, f64, f64)>,
}

impl Desk {
    fn dir(&mut self) -> PathBuf {
        self.root
            .get_or_insert_with(|| tempfile::Builder::new().prefix("octave-acceptance").tempdir().unwrap())
            .path()
            .to_path_buf()
    }

    fn data(&mut self) -> Result<PathBuf, String> {
        let d = self.dir().join("phantoms");
        if !d.exists() {
            octave(&["synth", "--out", s(&d), "--count", "128", "--size", "64x64", "--seed", "50"])?;
        }
        Ok(d)
    }

    fn config(&mut self, ssds: bool) -> Result<PathBuf, String> {
        let p = self.dir().join(if ssds { "desk.toml" } else { "desk-no-divergence.toml" });
        if !p.exists() {
            let cfg = TrainConfig {
                ssds,
                test_fraction: 0.3,
                ..TrainConfig::desk_scale()
            };
            std::fs::write(&p, cfg.to_toml_string()).map_err(|e| e.to_string())?;
        }
        Ok(p)
    }

    /// Trains one desk-scale run; returns (best validation Dice, seconds).
    fn train(&mut self, name: &str, ssds: bool, seed: u64, availability: f64) -> Result<(PathBuf, f64, f64), String> {
        let data = self.data()?;
        let cfg = self.config(ssds)?;
        let out = self.dir().join("runs").join(name);
        let t = Instant::now();
        octave(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--seed",
            &seed.to_string(),
            "--scribbles",
            &availability.to_string(),
        ])?;
        let secs = t.elapsed().as_secs_f64();
        let best = best_logged_dice(&out)?;
        Ok((out, best, secs))
    }

    fn reference_run(&mut self) -> Result<(PathBuf, f64, f64), String> {
        if self.reference.is_none() {
            self.reference = Some(self.train("seed50-p1.00-on", true, 50, 1.0)?);
        }
        Ok(self.reference.clone().unwrap())
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn octave(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_octave"))
        .args(args)
        .env_remove("OCTAVE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "octave {} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn best_logged_dice(run: &Path) -> Result<f64, String> {
    let epochs = octave_core::training::read_epoch_summaries(&run.join(LOG_FILE)).map_err(|e| e.to_string())?;
    if epochs.is_empty() {
        return Err(format!("{} logged no epochs", run.display()));
    }
    Ok(epochs.iter().map(|e| e.val_dice).fold(f64::MIN, f64::max))
}

fn determinism(desk: &mut Desk) -> Outcome {
    let (a, _, _) = desk.reference_run()?;
    let (b, _, _) = desk.train("seed50-p1.00-on-repeat", true, 50, 1.0)?;
    let mut files = Vec::new();
    for f in [LOG_FILE, "best.ckpt", "last.ckpt", "run_manifest.json"] {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        check(x == y, format!("{f} differs between identical runs"))?;
        files.push(format!("{f} ({} bytes)", x.len()));
    }
    Ok(format!("identical: {}", files.join(", ")))
}

fn desk_training(desk: &mut Desk) -> Outcome {
    let (run, best, secs) = desk.reference_run()?;
    let ck = octave_core::checkpoint::Checkpoint::load(&run.join("best.ckpt")).map_err(|e| e.to_string())?;
    check(ck.best_dice == Some(best), format!("checkpoint best {:?} vs logged {best}", ck.best_dice))?;
    check(best >= 0.60, format!("best validation dice {best:.4} < 0.60"))?;
    check(secs <= 1800.0, format!("run took {secs:.0}s"))?;
    if PINNED_DESK_DICE > 0.0 {
        check(
            (best - PINNED_DESK_DICE).abs() <= DESK_DRIFT,
            format!("best {best:.4} drifted from pinned {PINNED_DESK_DICE:.4}"),
        )?;
    }
    Ok(format!("best validation dice {best:.4} (pinned {PINNED_DESK_DICE:.4}) in {secs:.0}s"))
}

fn ssds_direction(desk: &mut Desk) -> Outcome {
    let mut lines = Vec::new();
    let mut means = Vec::new();
    for p in [1.0, 0.5] {
        let (mut on, mut off) = (0.0, 0.0);
        for seed in [50u64, 51, 52] {
            let a = if (seed, p) == (50, 1.0) {
                desk.reference_run()?.1
            } else {
                desk.train(&format!("seed{seed}-p{p:.2}-on"), true, seed, p)?.1
            };
            let b = desk.train(&format!("seed{seed}-p{p:.2}-off"), false, seed, p)?.1;
            lines.push(format!("seed {seed} p {p}: {a:.4} vs {b:.4}"));
            on += a / 3.0;
            off += b / 3.0;
        }
        means.push((p, on, off));
    }
    let summary: Vec<String> = means
        .iter()
        .map(|(p, on, off)| format!("p={p}: with {on:.4}, without {off:.4}"))
        .collect();
    for (p, on, off) in &means {
        check(
            *on >= off - 0.01,
            format!("p={p}: {on:.4} < {off:.4} - 0.01 ({})", lines.join("; ")),
        )?;
    }
    Ok(format!("{} ({})", summary.join("; "), lines.join("; ")))
}

fn availability_grid(desk: &mut Desk) -> Outcome {
    let data = desk.data()?;
    let cfg = desk.config(true)?;
    let out = desk.dir().join("sweep");
    octave(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--availability",
        "1.0,0.75,0.5,0.1",
        "--epochs",
        "2",
    ])?;
    let layout = DataLayout::load(&data).map_err(|e| e.to_string())?;
    let mut found = Vec::new();
    for (pct, name) in [(100usize, "availability-1.00"), (75, "availability-0.75"), (50, "availability-0.50"), (10, "availability-0.10")] {
        let dir = out.join(name);
        let read = |f: &str| -> Result<serde_json::Value, String> {
            let text = std::fs::read_to_string(dir.join(f)).map_err(|e| format!("{name}/{f}: {e}"))?;
            serde_json::from_str(&text).map_err(|e| format!("{name}/{f}: {e}"))
        };
        let manifest = read("run_manifest.json")?;
        let report = read("report.json")?;
        let weak = manifest["weak"].as_array().ok_or("manifest without weak set")?;
        let n = weak.len();
        let scribbled = weak.iter().filter(|w| w["scribbled"] == true).count();
        let want = (pct * n).div_ceil(100);
        check(scribbled == want, format!("{name}: {scribbled} scribbled, expected {want} of {n}"))?;
        for w in weak {
            let id = w["id"].as_str().ok_or("weak entry without id")?;
            layout.sample(id).map_err(|e| e.to_string())?;
        }
        let runs = report["runs"].as_array().ok_or("report without runs")?;
        check(
            runs.len() == 1 && !runs[0]["report"]["per_image"].as_array().map_or(true, Vec::is_empty),
            format!("{name}: incomplete report"),
        )?;
        check(
            report["folds"]["mean_over_folds"].as_f64().is_some_and(f64::is_finite),
            format!("{name}: no mean dice"),
        )?;
        found.push(format!("{pct}% {scribbled}/{n}"));
    }
    Ok(format!("four reports; scribbled counts {}", found.join(", ")))
}
