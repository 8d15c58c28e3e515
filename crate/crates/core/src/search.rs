//! Parallel Monte Carlo pose search.
//!
//! A pool of pose hypotheses scattered around the start pose is optimized
//! independently (free exploration), then repeatedly ranked on a shared set
//! of evaluation pixels: the lowest-loss fraction survives and every other
//! slot is re-seeded near a survivor drawn with softmax weights. The kept
//! fraction halves each round.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState, OptimizerConfig};
use crate::camera::{sample_pixel_batch, Intrinsics, RaySampleBatch, SampleBounds, SampleSettings};
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::image::Image;
use crate::lie::{jitter_pose, Pose};
use crate::loss::{loss_value_and_grad, PixelLoss};
use crate::render::{render_rays, render_with_pose_gradient, PoseGradient, RayScratch};
use crate::rng::RngStream;

const EVAL_LABEL: u64 = 0xE7A1;
const RESAMPLE_LABEL: u64 = 0x5E5A;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub pool_size: usize,
    /// Free-exploration steps (s1).
    pub explore_steps: u64,
    /// Steps after each resampling round (s2).
    pub resample_steps: u64,
    pub rounds: u32,
    /// Survivor fraction of the first round; halved every round after.
    pub keep_ratio: f64,
    pub explore_rot_deg: f64,
    pub explore_trans: f64,
    pub resample_rot_deg: f64,
    pub resample_trans: f64,
    pub rays_per_step: usize,
    pub eval_rays: usize,
    pub samples_per_ray: usize,
    /// Sampling interval per ray; the field's bounding box when absent.
    pub bounds: Option<SampleBounds>,
    /// Stratified jitter of sample distances during optimization. Off means
    /// bin midpoints, the same placement used to render observations.
    pub jitter_samples: bool,
    pub optimizer: OptimizerConfig,
    /// Keep one trace row per hypothesis every this many steps.
    pub trace_stride: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            pool_size: 64,
            explore_steps: 512,
            resample_steps: 512,
            rounds: 4,
            keep_ratio: 0.25,
            explore_rot_deg: 15.0,
            explore_trans: 0.25,
            resample_rot_deg: 3.0,
            resample_trans: 0.05,
            rays_per_step: 32,
            eval_rays: 1024,
            samples_per_ray: 32,
            bounds: None,
            jitter_samples: false,
            optimizer: OptimizerConfig::default(),
            trace_stride: 1,
        }
    }
}

impl SearchConfig {
    /// One hypothesis starting exactly at the start pose, optimized for the
    /// same total number of steps without resampling.
    pub fn single(&self) -> Self {
        Self {
            pool_size: 1,
            explore_steps: self.total_steps(),
            rounds: 0,
            explore_rot_deg: 0.0,
            explore_trans: 0.0,
            ..*self
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.explore_steps + self.rounds as u64 * self.resample_steps
    }

    /// Survivors kept at `round`: `⌈r / 2^round · P_N⌉`.
    pub fn survivor_count(&self, round: u32) -> usize {
        let ratio = self.keep_ratio / 2f64.powi(round as i32);
        let n = (ratio * self.pool_size as f64).ceil() as usize;
        n.clamp(1, self.pool_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.pool_size == 0 {
            return bad("pool_size must be >= 1");
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad("keep_ratio must be in (0, 1]");
        }
        let radii = [
            self.explore_rot_deg,
            self.explore_trans,
            self.resample_rot_deg,
            self.resample_trans,
        ];
        if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("search radii must be finite and non-negative");
        }
        if self.rays_per_step == 0 || self.eval_rays == 0 || self.samples_per_ray == 0 {
            return bad("ray and sample counts must be >= 1");
        }
        if self.trace_stride == 0 {
            return bad("trace_stride must be >= 1");
        }
        self.optimizer.validate()
    }
}

/// What the search minimizes: the loss between renders of `field` through
/// `intrinsics` and the `observed` image.
pub struct Objective<'a, F: ?Sized> {
    pub field: &'a F,
    pub intrinsics: Intrinsics,
    pub observed: &'a Image,
    pub loss: PixelLoss,
    pub settings: SampleSettings,
}

impl<'a, F: RadianceField + ?Sized> Objective<'a, F> {
    pub fn new(
        field: &'a F,
        intrinsics: Intrinsics,
        observed: &'a Image,
        loss: PixelLoss,
        config: &SearchConfig,
    ) -> Result<Self> {
        intrinsics.validate()?;
        loss.validate()?;
        if observed.width != intrinsics.width || observed.height != intrinsics.height {
            return Err(Error::DimensionMismatch {
                width: intrinsics.width,
                height: intrinsics.height,
                found_width: observed.width,
                found_height: observed.height,
            });
        }
        let bounds = config
            .bounds
            .unwrap_or_else(|| SampleBounds::scene_box(field.bounds()));
        Ok(Self {
            field,
            intrinsics,
            observed,
            loss,
            settings: SampleSettings {
                samples_per_ray: config.samples_per_ray,
                bounds,
            },
        })
    }

    /// Mean per-pixel loss over `pixels` and its pose gradient.
    pub fn loss_and_gradient(
        &self,
        pose: &Pose,
        pixels: &[u32],
        rng: Option<&mut RngStream>,
        ws: &mut Workspace,
    ) -> Result<(f64, PoseGradient)> {
        ws.batch.rebuild(&self.intrinsics, pose, pixels, &self.settings, rng)?;
        let mut total = 0.0;
        let batch = &ws.batch;
        let grad = render_with_pose_gradient(self.field, batch, &mut ws.scratch, |r, pred| {
            let target = self.observed.pixel(batch.pixels[r]);
            let (value, grad) = loss_value_and_grad(&self.loss, pred, &target);
            total += value;
            grad
        });
        Ok((total / pixels.len().max(1) as f64, grad))
    }

    /// Mean per-pixel loss over `pixels` with midpoint sampling.
    pub fn loss(&self, pose: &Pose, pixels: &[u32]) -> Result<f64> {
        let batch =
            RaySampleBatch::build::<RngStream>(&self.intrinsics, pose, pixels, &self.settings, None)?;
        let rendered = render_rays(self.field, &batch);
        let total: f64 = batch
            .pixels
            .iter()
            .zip(&rendered.colors)
            .map(|(&px, pred)| loss_value_and_grad(&self.loss, pred, &self.observed.pixel(px)).0)
            .sum();
        Ok(total / pixels.len().max(1) as f64)
    }
}

/// Buffers reused across the steps of one hypothesis.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    batch: RaySampleBatch,
    scratch: RayScratch,
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub id: usize,
    pub pose: Pose,
    pub adam: AdamState,
    /// Loss on the current round's evaluation pixels; infinite until
    /// evaluated.
    pub loss_estimate: f64,
    pub rng_stream_id: u64,
    pub alive: bool,
    rng: RngStream,
}

#[derive(Clone, Debug)]
pub struct HypothesisPool {
    pub hypotheses: Vec<Hypothesis>,
    /// Global optimization steps taken so far; drives the learning rate.
    pub step: u64,
}

impl HypothesisPool {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Alive hypothesis ids ordered by loss, ties by id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .hypotheses
            .iter()
            .filter(|h| h.alive)
            .map(|h| h.id)
            .collect();
        ids.sort_by(|&a, &b| {
            let (la, lb) = (self.hypotheses[a].loss_estimate, self.hypotheses[b].loss_estimate);
            la.total_cmp(&lb).then(a.cmp(&b))
        });
        ids
    }

    pub fn best(&self) -> Result<&Hypothesis> {
        self.ranking()
            .first()
            .map(|&id| &self.hypotheses[id])
            .ok_or(Error::SearchDiverged)
    }
}

/// Hypothesis `i` draws from stream `i` of `seed`: first its offset from
/// `start`, then its pixel batches.
pub fn init_pool(start: &Pose, config: &SearchConfig, seed: u64) -> HypothesisPool {
    let hypotheses = (0..config.pool_size)
        .map(|id| {
            let mut rng = RngStream::new(seed, id as u64);
            let pose = jitter_pose(start, config.explore_rot_deg, config.explore_trans, &mut rng);
            Hypothesis {
                id,
                pose,
                adam: AdamState::new(),
                loss_estimate: f64::INFINITY,
                rng_stream_id: id as u64,
                alive: true,
                rng,
            }
        })
        .collect();
    HypothesisPool { hypotheses, step: 0 }
}

/// The evaluation pixels shared by all hypotheses for ranking at the end of
/// phase `round` (0 is free exploration).
pub fn eval_pixels(intr: &Intrinsics, config: &SearchConfig, seed: u64, round: u32) -> Result<Vec<u32>> {
    let n = config.eval_rays.min(intr.pixel_count());
    let mut rng = RngStream::derive(seed, &[EVAL_LABEL, round as u64]);
    let mut pixels = sample_pixel_batch(intr, n, &mut rng)?;
    pixels.sort_unstable();
    Ok(pixels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub hypothesis: usize,
    /// Batch loss at `pose`, before that step's update.
    pub loss: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub step: u64,
    /// Kept hypotheses, best first.
    pub survivors: Vec<usize>,
    /// `(re-seeded id, survivor it was placed near)`.
    pub reseeded: Vec<(usize, usize)>,
    pub best_loss_before: f64,
    pub best_loss_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub best_hypothesis: usize,
    pub best_loss: f64,
    pub best_pose: [f64; 12],
    pub total_steps: u64,
    pub alive: usize,
    pub rounds: Vec<RoundRecord>,
}

impl SearchTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "step,hypothesis_id,loss,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz"
        )?;
        for rec in &self.records {
            write!(w, "{},{},{:?}", rec.step, rec.hypothesis, rec.loss)?;
            for v in rec.pose.to_array() {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Runs `steps` Adam iterations on every alive hypothesis, then refreshes
/// loss estimates on `eval`. Hypotheses whose loss or gradient turns
/// non-finite are marked dead and left in place.
pub fn optimize_round<F: RadianceField + ?Sized>(
    pool: &mut HypothesisPool,
    objective: &Objective<'_, F>,
    steps: u64,
    config: &SearchConfig,
    eval: &[u32],
    trace: Option<&mut SearchTrace>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let start_step = pool.step;
    let rays = config.rays_per_step.min(objective.intrinsics.pixel_count());
    let keep_trace = trace.is_some();
    let rows: Vec<Result<Vec<TraceRecord>>> = pool
        .hypotheses
        .par_iter_mut()
        .map(|h| {
            let mut rows = Vec::new();
            let mut ws = Workspace::default();
            if !h.alive {
                return Ok(rows);
            }
            for step in start_step..start_step + steps {
                let pixels = sample_pixel_batch(&objective.intrinsics, rays, &mut h.rng)?;
                let jitter = config.jitter_samples.then_some(&mut h.rng);
                let (loss, grad) = objective.loss_and_gradient(&h.pose, &pixels, jitter, &mut ws)?;
                if keep_trace && (step - start_step) % config.trace_stride == 0 {
                    rows.push(TraceRecord {
                        step,
                        hypothesis: h.id,
                        loss,
                        pose: h.pose,
                    });
                }
                if !loss.is_finite() || !grad.is_finite() {
                    h.alive = false;
                    h.loss_estimate = f64::INFINITY;
                    return Ok(rows);
                }
                let (pose, adam) = adam_step(&h.adam, &h.pose, &grad, &config.optimizer, step);
                if !pose.is_finite() {
                    h.alive = false;
                    h.loss_estimate = f64::INFINITY;
                    return Ok(rows);
                }
                h.pose = pose;
                h.adam = adam;
            }
            let loss = objective.loss(&h.pose, eval)?;
            if loss.is_finite() {
                h.loss_estimate = loss;
            } else {
                h.alive = false;
                h.loss_estimate = f64::INFINITY;
            }
            Ok(rows)
        })
        .collect();
    pool.step += steps;
    let mut merged = Vec::new();
    for r in rows {
        merged.extend(r?);
    }
    if let Some(trace) = trace {
        merged.sort_by(|a, b| a.step.cmp(&b.step).then(a.hypothesis.cmp(&b.hypothesis)));
        trace.records.extend(merged);
    }
    Ok(())
}

/// Outcome of one resampling round before newcomers are re-evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampling {
    pub survivors: Vec<usize>,
    pub reseeded: Vec<(usize, usize)>,
}

/// Softmax weights `exp(-(L - L_min) / T)` over survivor losses with
/// temperature `T` = their mean; uniform when `T` is not positive.
pub fn survivor_weights(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let temperature = losses.iter().sum::<f64>() / n as f64;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return vec![1.0 / n as f64; n];
    }
    let w: Vec<f64> = losses.iter().map(|l| (-(l - min) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Keeps the `survivor_count(round)` lowest-loss alive hypotheses and moves
/// every other slot next to a survivor with a fresh optimizer state. Moved
/// hypotheses get an infinite loss estimate until re-evaluated.
pub fn resample(pool: &mut HypothesisPool, config: &SearchConfig, round: u32, seed: u64) -> Result<Resampling> {
    let ranking = pool.ranking();
    if ranking.is_empty() {
        return Err(Error::SearchDiverged);
    }
    let keep = config.survivor_count(round).min(ranking.len());
    let survivors = ranking[..keep].to_vec();
    let losses: Vec<f64> = survivors.iter().map(|&id| pool.hypotheses[id].loss_estimate).collect();
    let weights = survivor_weights(&losses);
    let mut rng = RngStream::derive(seed, &[RESAMPLE_LABEL, round as u64]);
    let mut is_survivor = vec![false; pool.len()];
    for &id in &survivors {
        is_survivor[id] = true;
    }
    let mut reseeded = Vec::new();
    for id in 0..pool.len() {
        if is_survivor[id] {
            continue;
        }
        let source = survivors[pick(&weights, &mut rng)];
        let anchor = pool.hypotheses[source].pose;
        let pose = jitter_pose(&anchor, config.resample_rot_deg, config.resample_trans, &mut rng);
        let h = &mut pool.hypotheses[id];
        h.pose = pose;
        h.adam = AdamState::new();
        h.loss_estimate = f64::INFINITY;
        h.alive = true;
        reseeded.push((id, source));
    }
    Ok(Resampling { survivors, reseeded })
}

fn evaluate<F: RadianceField + ?Sized>(
    pool: &mut HypothesisPool,
    objective: &Objective<'_, F>,
    ids: &[usize],
    eval: &[u32],
) -> Result<()> {
    let mut selected = vec![false; pool.len()];
    for &id in ids {
        selected[id] = true;
    }
    let results: Vec<Result<()>> = pool
        .hypotheses
        .par_iter_mut()
        .filter(|h| selected[h.id])
        .map(|h| {
            let loss = objective.loss(&h.pose, eval)?;
            h.loss_estimate = if loss.is_finite() { loss } else { f64::INFINITY };
            h.alive = loss.is_finite();
            Ok(())
        })
        .collect();
    results.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Pose,
    pub best_loss: f64,
    pub best_hypothesis: usize,
    pub pool: HypothesisPool,
    pub trace: SearchTrace,
}

impl SearchResult {
    pub fn summary(&self) -> SearchSummary {
        SearchSummary {
            best_hypothesis: self.best_hypothesis,
            best_loss: self.best_loss,
            best_pose: self.best.to_array(),
            total_steps: self.pool.step,
            alive: self.pool.hypotheses.iter().filter(|h| h.alive).count(),
            rounds: self.trace.rounds.clone(),
        }
    }
}

/// Free exploration for `explore_steps`, then `rounds` rounds of resampling
/// followed by `resample_steps` more steps. Returns the lowest-loss pose on
/// the final evaluation pixels.
pub fn run_search<F: RadianceField + ?Sized>(
    objective: &Objective<'_, F>,
    start: &Pose,
    config: &SearchConfig,
    seed: u64,
) -> Result<SearchResult> {
    config.validate()?;
    if !start.is_finite() {
        return Err(Error::InvalidConfig("start pose is not finite".into()));
    }
    let intr = &objective.intrinsics;
    let mut pool = init_pool(start, config, seed);
    let mut trace = SearchTrace::default();
    let mut eval = eval_pixels(intr, config, seed, 0)?;
    optimize_round(&mut pool, objective, config.explore_steps, config, &eval, Some(&mut trace))?;
    if config.explore_steps == 0 {
        let all: Vec<usize> = (0..pool.len()).collect();
        evaluate(&mut pool, objective, &all, &eval)?;
    }
    for round in 0..config.rounds {
        let before = pool.best()?.loss_estimate;
        let step = pool.step;
        let rs = resample(&mut pool, config, round, seed)?;
        let moved: Vec<usize> = rs.reseeded.iter().map(|&(id, _)| id).collect();
        evaluate(&mut pool, objective, &moved, &eval)?;
        let after = pool.best()?.loss_estimate;
        trace.rounds.push(RoundRecord {
            round,
            step,
            survivors: rs.survivors,
            reseeded: rs.reseeded,
            best_loss_before: before,
            best_loss_after: after,
        });
        eval = eval_pixels(intr, config, seed, round + 1)?;
        optimize_round(&mut pool, objective, config.resample_steps, config, &eval, Some(&mut trace))?;
        if config.resample_steps == 0 {
            let all: Vec<usize> = (0..pool.len()).collect();
            evaluate(&mut pool, objective, &all, &eval)?;
        }
    }
    let best = pool.best()?;
    let (best_pose, best_loss, best_id) = (best.pose, best.loss_estimate, best.id);
    Ok(SearchResult {
        best: best_pose,
        best_loss,
        best_hypothesis: best_id,
        pool,
        trace,
    })
}
