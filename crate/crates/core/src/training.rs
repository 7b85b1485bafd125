//! Alternating segmentor / discriminator optimization, the epoch loop with
//! checkpointing and resume, and run preparation from a dataset layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{init_networks, write_atomic, Checkpoint};
use crate::data::{draw_angle, rotate_augment, rotate_image, unpaired_subset, DataLayout, DatasetSplit, Sample};
use crate::datamodel::{Alpha0Mode, Angiogram, DenseMask, ScribbleLabel, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::mean_dice;
use crate::losses::{
    aggregate_backward, aggregate_grad, alpha0, divergence_grad, kappa, lsgan_discriminator_grad,
    lsgan_segmentor_grad, original_alpha0, segmentor_loss, weighted_partial_ce_grad, LossBreakdown,
};
use crate::network::{
    ground_truth_pyramid, Discriminator, DiscriminatorCache, Parameters, Segmentor, SegmentorCache,
};
use crate::optim::{learning_rate, Adam};
use crate::scribble::{retained_count, select_available};
use crate::tensor::Tensor;
use crate::{par, seed};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub segmentor: Segmentor,
    pub discriminator: Discriminator,
    pub segmentor_optimizer: Adam,
    pub discriminator_optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_dice: Option<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (seg, disc) = init_networks(config);
        Ok(Self {
            segmentor_optimizer: Adam::new(&seg, config.weight_decay),
            discriminator_optimizer: Adam::new(&disc, config.weight_decay),
            segmentor: seg,
            discriminator: disc,
            config: config.clone(),
            epoch: 0,
            best_dice: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let r = ck.restore()?;
        Ok(Self {
            config: ck.config.clone(),
            segmentor: r.segmentor,
            discriminator: r.discriminator,
            segmentor_optimizer: r.segmentor_optimizer,
            discriminator_optimizer: r.discriminator_optimizer,
            epoch: ck.epoch,
            best_dice: ck.best_dice,
        })
    }

    pub fn checkpoint(&self, with_optimizers: bool) -> Checkpoint {
        Checkpoint::new(
            &self.config,
            self.epoch,
            self.best_dice,
            &self.segmentor,
            &self.discriminator,
            with_optimizers.then_some((&self.segmentor_optimizer, &self.discriminator_optimizer)),
        )
    }
}

fn segmentor_grad(
    seg: &Segmentor,
    disc: &Discriminator,
    cfg: &TrainConfig,
    f: &BatchForward,
    a0: f64,
    k: f64,
) -> Segmentor {
    let d = cfg.depth;
    let n = f.samples.len() as f64;
    let idx: Vec<usize> = (0..f.samples.len()).collect();
    let grads = par::map(&idx, |&i| {
        let s = &f.samples[i];
        let (_, adv) = disc.backward(&s.disc_cache, cfg.alpha1 * f.v_grad[i], true);
        let mut g = adv.expect("input gradients requested");
        for (gl, il) in g.iter_mut().zip(&s.ild_grad) {
            gl.add_assign(&il.scaled(k / n));
        }
        if let Some((_, per)) = &f.pce {
            if let Some(gw) = &per[i] {
                g[d].add_assign(&gw.scaled(a0));
            }
        }
        seg.backward(&s.seg_cache, &s.maps, &g)
    });
    sum_grads(grads)
}

/// Gradient of the segmentor objective at the current parameters together
/// with the detached (α₀, κ) it was computed with.
pub fn segmentor_gradient(state: &TrainState, batch: &Batch) -> Result<(Segmentor, f64, f64)> {
    let cfg = &state.config;
    let f = forward_batch(&state.segmentor, &state.discriminator, cfg, batch)?;
    let (a0, k) = dynamic_weights(cfg, f.pce.as_ref().map(|(w, _)| *w), f.v_sigma, f.ild);
    Ok((segmentor_grad(&state.segmentor, &state.discriminator, cfg, &f, a0, k), a0, k))
}

/// One optimization step's inputs. `unpaired` holds ground-truth pyramids
/// of dense masks from the unpaired set.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub scribbles: Vec<Option<ScribbleLabel>>,
    pub unpaired: Vec<Vec<Tensor>>,
}

impl Batch {
    pub fn scribbled(&self) -> usize {
        self.scribbles.iter().filter(|s| s.is_some()).count()
    }
}

struct SampleForward {
    maps: Vec<Tensor>,
    seg_cache: SegmentorCache,
    score: f64,
    disc_cache: DiscriminatorCache,
    ild: f64,
    /// Gradient of this sample's divergence w.r.t. each attention map.
    ild_grad: Vec<Tensor>,
}

struct BatchForward {
    samples: Vec<SampleForward>,
    /// Supervised loss and per-sample gradients w.r.t. ŷ (absent when the
    /// batch has no annotated pixel).
    pce: Option<(f64, Vec<Option<Tensor>>)>,
    v_sigma: f64,
    v_grad: Vec<f64>,
    ild: f64,
}

fn forward_batch(seg: &Segmentor, disc: &Discriminator, cfg: &TrainConfig, batch: &Batch) -> Result<BatchForward> {
    if batch.images.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    if batch.scribbles.len() != batch.images.len() {
        return Err(Error::shape("one scribble slot per image is required"));
    }
    let weights = cfg.level_weights();
    let d = cfg.depth;
    let per_sample = par::map(&batch.images, |x| -> Result<SampleForward> {
        let (maps, seg_cache) = seg.forward_tensor(x);
        let (score, disc_cache) = disc.forward_maps(&maps);
        let (mu, agg) = aggregate_grad(&maps, &weights, cfg.aggregate_divisor)?;
        let (ild, gy, gmu) = divergence_grad(&maps[d], &mu, cfg.log_eps)?;
        let mut ild_grad = if cfg.ild_grad_through_aggregate {
            aggregate_backward(&agg, &gmu)
        } else {
            maps.iter().map(Tensor::zeros_like).collect()
        };
        ild_grad[d].add_assign(&gy);
        Ok(SampleForward {
            maps,
            seg_cache,
            score,
            disc_cache,
            ild,
            ild_grad,
        })
    });
    let samples: Vec<SampleForward> = per_sample.into_iter().collect::<Result<_>>()?;

    let sup: Vec<usize> = (0..samples.len()).filter(|&i| batch.scribbles[i].is_some()).collect();
    let pce = if sup.is_empty() {
        None
    } else {
        let preds: Vec<&Tensor> = sup.iter().map(|&i| &samples[i].maps[d]).collect();
        let scr: Vec<&ScribbleLabel> = sup
            .iter()
            .map(|&i| batch.scribbles[i].as_ref().expect("filtered"))
            .collect();
        match weighted_partial_ce_grad(&preds, &scr, cfg.log_eps, cfg.invert_class_weights) {
            Ok((loss, grads)) => {
                let mut per: Vec<Option<Tensor>> = vec![None; samples.len()];
                for (&i, g) in sup.iter().zip(grads) {
                    per[i] = Some(g);
                }
                Some((loss, per))
            }
            Err(Error::NoSupervision) => None,
            Err(e) => return Err(e),
        }
    };
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let (v_sigma, v_grad) = lsgan_segmentor_grad(&scores);
    let ild = samples.iter().map(|s| s.ild).sum::<f64>() / samples.len() as f64;
    Ok(BatchForward {
        samples,
        pce,
        v_sigma,
        v_grad,
        ild,
    })
}

/// The detached dynamic weights (α₀, κ) for given loss values.
pub fn dynamic_weights(cfg: &TrainConfig, w_pce: Option<f64>, v_sigma: f64, l_ild: f64) -> (f64, f64) {
    let a0 = match w_pce {
        None => 0.0,
        Some(w) => match cfg.alpha0_mode {
            Alpha0Mode::Reciprocal => alpha0(w, v_sigma, cfg.clamp_c),
            Alpha0Mode::Original => original_alpha0(w, v_sigma, cfg.clamp_c),
        },
    };
    let k = if cfg.ssds {
        kappa(l_ild, w_pce.unwrap_or(0.0), v_sigma)
    } else {
        0.0
    };
    (a0, k)
}

/// Segmentor objective α₀·W + α₁·V + κ·ILD at the current parameters, with
/// the dynamic weights held fixed.
pub fn segmentor_objective(state: &TrainState, batch: &Batch, alpha0: f64, kappa: f64) -> Result<f64> {
    let f = forward_batch(&state.segmentor, &state.discriminator, &state.config, batch)?;
    let w = f.pce.as_ref().map_or(0.0, |(w, _)| *w);
    Ok(segmentor_loss(alpha0, w, state.config.alpha1, f.v_sigma, kappa, f.ild).0)
}

fn sum_grads<P: Parameters + Clone>(mut parts: Vec<P>) -> P {
    let mut total = parts.remove(0);
    for p in &parts {
        total.add_assign(p);
    }
    total
}

/// One segmentor update followed by one discriminator update.
///
/// The discriminator sees the attention maps from this step's forward pass
/// as fixed inputs, against ground-truth pyramids of the unpaired masks.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    if batch.unpaired.is_empty() {
        return Err(Error::domain("batch has no unpaired masks"));
    }
    let cfg = state.config.clone();
    let f = forward_batch(&state.segmentor, &state.discriminator, &cfg, batch)?;
    let w_pce = f.pce.as_ref().map(|(w, _)| *w);
    let (a0, k) = dynamic_weights(&cfg, w_pce, f.v_sigma, f.ild);
    let (total_sigma, mut breakdown) =
        segmentor_loss(a0, w_pce.unwrap_or(0.0), cfg.alpha1, f.v_sigma, k, f.ild);

    // discriminator scores on the real pyramids
    let real = par::map(&batch.unpaired, |maps| state.discriminator.forward_maps(maps));
    let fake_scores: Vec<f64> = f.samples.iter().map(|s| s.score).collect();
    let real_scores: Vec<f64> = real.iter().map(|(c, _)| *c).collect();
    let (v_delta, g_fake, g_real) = lsgan_discriminator_grad(&fake_scores, &real_scores);
    breakdown.v_delta = v_delta;
    breakdown.total_delta = cfg.alpha2 * v_delta;
    if let Some(component) = breakdown.non_finite() {
        return Err(Error::NonFinite { component });
    }
    debug_assert_eq!(breakdown.total_sigma, total_sigma);

    let seg_grad = segmentor_grad(&state.segmentor, &state.discriminator, &cfg, &f, a0, k);
    if !seg_grad.all_finite() {
        return Err(Error::NonFinite {
            component: "segmentor gradient",
        });
    }

    // discriminator half-step on detached maps
    let mut jobs: Vec<(&DiscriminatorCache, f64)> = Vec::new();
    for (s, g) in f.samples.iter().zip(&g_fake) {
        jobs.push((&s.disc_cache, cfg.alpha2 * g));
    }
    for ((_, c), g) in real.iter().zip(&g_real) {
        jobs.push((c, cfg.alpha2 * g));
    }
    let disc = &state.discriminator;
    let disc_grads = par::map(&jobs, |(c, g)| disc.backward(c, *g, false).0);
    let disc_grad = sum_grads(disc_grads);
    if !disc_grad.all_finite() {
        return Err(Error::NonFinite {
            component: "discriminator gradient",
        });
    }

    state.segmentor_optimizer.update(&mut state.segmentor, &seg_grad, lr);
    state
        .discriminator_optimizer
        .update(&mut state.discriminator, &disc_grad, lr);
    Ok(breakdown)
}

/// A weak-set item: the image and its scribble if it kept one.
#[derive(Debug, Clone)]
pub struct WeakSample {
    pub id: String,
    pub image: Angiogram,
    pub scribble: Option<ScribbleLabel>,
}

/// Everything the epoch loop consumes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub weak: Vec<WeakSample>,
    pub unpaired: Vec<DenseMask>,
    pub validation: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEntry {
    pub id: String,
    pub scribbled: bool,
}

/// Which samples a run used for what; written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub fold: usize,
    pub seed: u64,
    pub availability: f64,
    /// ⌈p·N⌉ over the weak set.
    pub expected_scribbled: usize,
    pub weak: Vec<WeakEntry>,
    pub unpaired: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl RunManifest {
    pub fn scribbled(&self) -> usize {
        self.weak.iter().filter(|w| w.scribbled).count()
    }
}

/// Resolves the fold split, the weak / unpaired partition and scribble
/// availability for a config.
pub fn prepare_run(layout: &DataLayout, cfg: &TrainConfig) -> Result<(TrainData, RunManifest, DatasetSplit)> {
    cfg.validate()?;
    let split = layout.split(cfg.test_fraction, cfg.folds, cfg.fold, cfg.seed)?;
    let (weak_ids, unpaired_ids) = unpaired_subset(&split.train, cfg.unpaired_fraction, cfg.seed)?;
    let tags: Vec<Option<String>> = weak_ids.iter().map(|id| split.tags[id].clone()).collect();
    let keep = select_available(&tags, cfg.availability, cfg.seed)?;

    let mut weak = Vec::with_capacity(weak_ids.len());
    for (id, &k) in weak_ids.iter().zip(&keep) {
        let s = layout.sample(id)?;
        s.image.check_depth(cfg.depth)?;
        weak.push(WeakSample {
            id: id.clone(),
            image: s.image.clone(),
            scribble: if k { Some(s.scribble_or_derived()?) } else { None },
        });
    }
    let unpaired = unpaired_ids
        .iter()
        .map(|id| layout.sample(id).and_then(|s| s.mask().cloned()))
        .collect::<Result<Vec<_>>>()?;
    let validation = split
        .validation
        .iter()
        .map(|id| {
            let s = layout.sample(id)?;
            s.mask()?;
            Ok(s.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    if validation.is_empty() {
        return Err(Error::domain("validation split is empty"));
    }
    let manifest = RunManifest {
        fold: cfg.fold,
        seed: cfg.seed,
        availability: cfg.availability,
        expected_scribbled: retained_count(cfg.availability, weak.len()),
        weak: weak_ids
            .iter()
            .zip(&keep)
            .map(|(id, &k)| WeakEntry {
                id: id.clone(),
                scribbled: k,
            })
            .collect(),
        unpaired: unpaired_ids,
        validation: split.validation.clone(),
        test: split.test.clone(),
    };
    Ok((TrainData { weak, unpaired, validation }, manifest, split))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepRecord {
    kind: String,
    epoch: usize,
    step: usize,
    lr: f64,
    scribbled: usize,
    supervised: bool,
    #[serde(flatten)]
    losses: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpochRecord {
    kind: String,
    epoch: usize,
    val_dice: f64,
    best_dice: f64,
    improved: bool,
}

/// Per-epoch validation record parsed back from a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub val_dice: f64,
}

pub fn read_epoch_summaries(log: &Path) -> Result<Vec<EpochSummary>> {
    let f = File::open(log).map_err(|e| Error::io(log, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(log, e))?;
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::format(log, e.to_string()))?;
        if v["kind"] == "epoch" {
            let r: EpochRecord = serde_json::from_value(v).map_err(|e| Error::format(log, e.to_string()))?;
            out.push(EpochSummary {
                epoch: r.epoch,
                val_dice: r.val_dice,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best_dice: Option<f64>,
    pub epochs: usize,
    pub best_checkpoint: PathBuf,
}

/// Builds the batch for one step: seeded rotations of the chosen weak
/// samples and independent draws (with replacement) from the unpaired set.
fn compose_batch(
    cfg: &TrainConfig,
    data: &TrainData,
    pyramids: &[Vec<Tensor>],
    members: &[usize],
    epoch: usize,
    step: usize,
) -> Result<Batch> {
    let mut rng = seed::rng(cfg.seed, &format!("step/{epoch}/{step}"));
    let mut images = Vec::with_capacity(members.len());
    let mut scribbles = Vec::with_capacity(members.len());
    for &i in members {
        let w = &data.weak[i];
        let angle = draw_angle(cfg.rotation_degrees, &mut rng);
        match &w.scribble {
            Some(s) => {
                let (img, lab) = rotate_augment(&w.image, s, angle)?;
                images.push(img.to_tensor());
                scribbles.push(Some(lab));
            }
            None => {
                let img = Angiogram::new(rotate_image(w.image.pixels(), angle))?;
                images.push(img.to_tensor());
                scribbles.push(None);
            }
        }
    }
    let unpaired = (0..members.len())
        .map(|_| pyramids[rng.random_range(0..pyramids.len())].clone())
        .collect();
    Ok(Batch {
        images,
        scribbles,
        unpaired,
    })
}

fn validation_dice(seg: &Segmentor, data: &TrainData) -> Result<f64> {
    let refs: Vec<&Sample> = data.validation.iter().collect();
    mean_dice(seg, &refs)
}

/// Keeps only log lines from epochs before `epoch` (used on resume).
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if v["epoch"].as_u64().is_some_and(|e| (e as usize) < epoch) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Runs the epoch loop, writing `train_log.jsonl`, `last.ckpt` (with
/// optimizer state, every epoch) and `best.ckpt` (on validation
/// improvement) into `out`. With `resume`, continues from `last.ckpt` when
/// it exists.
pub fn fit(cfg: &TrainConfig, data: &TrainData, out: &Path, resume: bool) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.weak.is_empty() || data.unpaired.is_empty() {
        return Err(Error::domain("training needs a non-empty weak set and unpaired set"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let last = out.join(LAST_CHECKPOINT);
    let best = out.join(BEST_CHECKPOINT);

    let mut state = if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        // the epoch budget may be extended on resume; nothing else may change
        let same = TrainConfig {
            epochs: cfg.epochs,
            ..ck.config.clone()
        };
        if same != *cfg {
            return Err(Error::Config(format!(
                "{} was written with a different config",
                last.display()
            )));
        }
        truncate_log(&log_path, ck.epoch)?;
        let mut s = TrainState::from_checkpoint(&ck)?;
        s.config = cfg.clone();
        s
    } else {
        std::fs::write(&log_path, b"").map_err(|e| Error::io(&log_path, e))?;
        let s = TrainState::new(cfg)?;
        s.checkpoint(false).save(&best)?;
        s.checkpoint(true).save(&last)?;
        s
    };

    let pyramids = data
        .unpaired
        .iter()
        .map(|m| ground_truth_pyramid(m, cfg.depth, cfg.pyramid_rule))
        .collect::<Result<Vec<_>>>()?;
    let steps = data.weak.len().div_ceil(cfg.batch_size);
    let f = File::options()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(f);
    let write_line = |log: &mut BufWriter<File>, line: String| -> Result<()> {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.weak.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &format!("epoch/{epoch}")));
        for (step, members) in order.chunks(cfg.batch_size).enumerate() {
            let batch = compose_batch(cfg, data, &pyramids, members, epoch, step)?;
            let lr = learning_rate(cfg, epoch, step, steps);
            let losses = train_step(&mut state, &batch, lr)?;
            let rec = StepRecord {
                kind: "step".into(),
                epoch,
                step,
                lr,
                scribbled: batch.scribbled(),
                supervised: losses.alpha0 > 0.0 || losses.w_pce != 0.0,
                losses,
            };
            write_line(&mut log, serde_json::to_string(&rec).expect("record serializes"))?;
        }
        let dice = validation_dice(&state.segmentor, data)?;
        state.epoch += 1;
        let improved = state.best_dice.is_none_or(|b| dice > b);
        if improved {
            state.best_dice = Some(dice);
            state.checkpoint(false).save(&best)?;
        }
        let rec = EpochRecord {
            kind: "epoch".into(),
            epoch,
            val_dice: dice,
            best_dice: state.best_dice.expect("set above"),
            improved,
        };
        write_line(&mut log, serde_json::to_string(&rec).expect("record serializes"))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        state.checkpoint(true).save(&last)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(FitOutcome {
        best_dice: state.best_dice,
        epochs: state.epoch,
        best_checkpoint: best,
    })
}

/// `prepare_run` + `fit`, also writing the run manifest.
pub fn train_from_layout(layout: &DataLayout, cfg: &TrainConfig, out: &Path, resume: bool) -> Result<(FitOutcome, RunManifest)> {
    let (data, manifest, _) = prepare_run(layout, cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(RUN_MANIFEST), text.as_bytes())?;
    let outcome = fit(cfg, &data, out, resume)?;
    Ok((outcome, manifest))
}
