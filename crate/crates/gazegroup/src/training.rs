//! Target matching, the composite loss, and the optimization loop.
//!
//! Predicted group slots outnumber annotated groups, so each scene is
//! scored through a minimum-cost bipartite matching between annotation
//! rows and slot rows; the cost is the mean per-person binary cross
//! entropy of the membership row. Matched slots pay membership BCE and a
//! mean-squared error on the aggregated map; unmatched slots are pushed
//! toward empty membership and an empty map at a reduced weight so that
//! mostly-negative data does not drown the group signal. The total adds
//! per-person auxiliary terms: gaze direction cosine, gaze heatmap MSE,
//! in-frame BCE, and pairwise same-group BCE.

use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::assignment::{min_cost_matching, AssignError};
use crate::autodiff::{Mat, Var};
use crate::model::{ModelConfig, ModelError, NetCtx};
use crate::params::{Adam, GradStore, ParamStore};
use crate::pipeline::forward_pass;
use crate::scene::{gt_heatmap_for_person, gt_membership, gt_sa_maps, Scene, SceneError};

/// Probabilities are clamped to [EPS, 1 - EPS] before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient on scene {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Scenes averaged into one optimizer step.
    pub batch_size: usize,
    /// Weight on unmatched slot rows.
    pub no_object_weight: f64,
    /// Width of rendered target bumps, normalized units.
    pub gaussian_sigma: f64,
    pub with_refinement: bool,
    pub with_social_loss: bool,
    pub log_every: usize,
    pub w_grp: f64,
    pub w_sae: f64,
    pub w_ang: f64,
    pub w_hm: f64,
    pub w_io: f64,
    pub w_social: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            steps: 1_000,
            batch_size: 4,
            no_object_weight: 0.1,
            gaussian_sigma: 0.06,
            with_refinement: true,
            with_social_loss: true,
            log_every: 25,
            w_grp: 1.0,
            w_sae: 1.0,
            w_ang: 1.0,
            w_hm: 1.0,
            w_io: 1.0,
            w_social: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for CPU-scale runs on generated scenes; the higher
    /// rate is what small grids and small batches tolerate.
    pub fn desk_preset() -> Self {
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }
}

pub fn bce_value(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Elementwise binary cross entropy of `pred` against a constant target.
fn bce_t(ctx: &mut NetCtx, pred: Var, target: &Mat) -> Var {
    let t = ctx.tape.leaf(target.clone());
    let t_inv = ctx.tape.leaf(target.mapv(|v| 1.0 - v));
    let p = ctx.tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = ctx.tape.ln(p);
    let neg_p = ctx.tape.neg(p);
    let one_minus_p = ctx.tape.add_const(neg_p, 1.0);
    let ln_q = ctx.tape.ln(one_minus_p);
    let a = ctx.tape.mul(t, ln_p);
    let b = ctx.tape.mul(t_inv, ln_q);
    let s = ctx.tape.add(a, b);
    ctx.tape.neg(s)
}

fn mse_t(ctx: &mut NetCtx, pred: Var, target: &Mat) -> Var {
    let t = ctx.tape.leaf(target.clone());
    let d = ctx.tape.sub(pred, t);
    let sq = ctx.tape.mul(d, d);
    ctx.tape.mean_all(sq)
}

/// Pair annotation row k with slot row e, minimizing the summed mean
/// per-person membership BCE. Pairs come back sorted by annotation row.
pub fn match_groups(pred: &Mat, gt: &Mat) -> Result<Vec<(usize, usize)>, AssignError> {
    let (k, n) = gt.dim();
    let e = pred.dim().0;
    if k == 0 || e == 0 {
        return Ok(Vec::new());
    }
    let mut cost = Mat::zeros((k, e));
    for ki in 0..k {
        for ei in 0..e {
            let mut acc = 0.0;
            for p in 0..n {
                acc += bce_value(pred[(ei, p)], gt[(ki, p)]);
            }
            cost[(ki, ei)] = acc / n as f64;
        }
    }
    min_cost_matching(&cost)
}

/// Membership and map losses of one detection stage.
///
/// Matched rows average their mean per-person BCE and per-cell MSE over
/// the annotation count; unmatched rows average the same terms against
/// empty targets and are scaled by `no_object_weight`.
fn stage_losses(
    ctx: &mut NetCtx,
    membership: Var,
    sa: Var,
    gt_memb: &Mat,
    gt_maps: &Mat,
    no_object_weight: f64,
) -> Result<(Var, Var), TrainError> {
    let pred = ctx.tape.value(membership).clone();
    let pairs = match_groups(&pred, gt_memb)?;
    let e = pred.dim().0;
    let n = pred.dim().1;
    let cells = ctx.tape.value(sa).dim().1;
    let mut matched_slot = vec![false; e];
    let mut grp_terms: Vec<Var> = Vec::new();
    let mut sae_terms: Vec<Var> = Vec::new();
    for &(k, slot) in &pairs {
        matched_slot[slot] = true;
        let m_row = ctx.tape.slice_rows(membership, slot, 1);
        let target = gt_memb.row(k).to_owned().insert_axis(ndarray::Axis(0));
        let bce = bce_t(ctx, m_row, &target);
        grp_terms.push(ctx.tape.mean_all(bce));
        let s_row = ctx.tape.slice_rows(sa, slot, 1);
        let map = gt_maps.row(k).to_owned().insert_axis(ndarray::Axis(0));
        sae_terms.push(mse_t(ctx, s_row, &map));
    }
    let k_norm = 1.0 / pairs.len().max(1) as f64;
    let mut grp = sum_scaled(ctx, &grp_terms, k_norm);
    let mut sae = sum_scaled(ctx, &sae_terms, k_norm);

    let unmatched: Vec<usize> = (0..e).filter(|&s| !matched_slot[s]).collect();
    if !unmatched.is_empty() {
        let zero_row = Mat::zeros((1, n));
        let zero_map = Mat::zeros((1, cells));
        let mut no_grp: Vec<Var> = Vec::new();
        let mut no_sae: Vec<Var> = Vec::new();
        for &slot in &unmatched {
            let m_row = ctx.tape.slice_rows(membership, slot, 1);
            let bce = bce_t(ctx, m_row, &zero_row);
            no_grp.push(ctx.tape.mean_all(bce));
            let s_row = ctx.tape.slice_rows(sa, slot, 1);
            no_sae.push(mse_t(ctx, s_row, &zero_map));
        }
        let u_norm = no_object_weight / unmatched.len() as f64;
        let g = sum_scaled(ctx, &no_grp, u_norm);
        let s = sum_scaled(ctx, &no_sae, u_norm);
        grp = ctx.tape.add(grp, g);
        sae = ctx.tape.add(sae, s);
    }
    Ok((grp, sae))
}

fn sum_scaled(ctx: &mut NetCtx, terms: &[Var], k: f64) -> Var {
    match terms.split_first() {
        None => ctx.tape.scalar(0.0),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = ctx.tape.add(acc, t);
            }
            ctx.tape.scale(acc, k)
        }
    }
}

/// Per-person terms: direction cosine, heatmap MSE, in-frame BCE, and
/// optionally pairwise same-group BCE over unordered pairs.
fn aux_losses(
    ctx: &mut NetCtx,
    heatmaps: Var,
    aux: &crate::model::AuxVars,
    scene: &Scene,
    cfg: &ModelConfig,
    sigma: f64,
    with_social: bool,
) -> Result<(Var, Var, Var, Var), TrainError> {
    let n = scene.persons.len();
    let (h, w) = (cfg.heatmap_height, cfg.heatmap_width);

    // Direction target: unit vector from head center to gaze target for
    // persons looking inside the frame, masked out otherwise.
    let mut dirs = Mat::zeros((n, 2));
    let mut mask = Mat::zeros((n, 1));
    let mut count = 0.0;
    for (i, p) in scene.persons.iter().enumerate() {
        if let Some((tx, ty)) = p.gaze_target {
            let (hx, hy) = p.head_center();
            let (dx, dy) = (tx - hx, ty - hy);
            let norm = (dx * dx + dy * dy).sqrt();
            if norm > 1e-9 {
                dirs[(i, 0)] = dx / norm;
                dirs[(i, 1)] = dy / norm;
                mask[(i, 0)] = 1.0;
                count += 1.0;
            }
        }
    }
    let ang = if count > 0.0 {
        let d = ctx.tape.leaf(dirs);
        let prod = ctx.tape.mul(aux.gaze_dir, d);
        let cos = ctx.tape.row_sum(prod);
        let neg = ctx.tape.neg(cos);
        let one_minus = ctx.tape.add_const(neg, 1.0);
        let m = ctx.tape.leaf(mask);
        let masked = ctx.tape.mul(one_minus, m);
        let total = ctx.tape.sum_all(masked);
        ctx.tape.scale(total, 1.0 / count)
    } else {
        ctx.tape.scalar(0.0)
    };

    let mut heat_target = Mat::zeros((n, h * w));
    for i in 0..n {
        let m = gt_heatmap_for_person(scene, i, sigma, h, w)?;
        for (c, v) in m.iter().enumerate() {
            heat_target[(i, c)] = *v;
        }
    }
    let hm = mse_t(ctx, heatmaps, &heat_target);

    let io_target = Mat::from_shape_fn((n, 1), |(i, _)| {
        if scene.persons[i].in_frame {
            1.0
        } else {
            0.0
        }
    });
    let io_bce = bce_t(ctx, aux.in_out, &io_target);
    let io = ctx.tape.mean_all(io_bce);

    let social = if with_social && n >= 2 {
        let memb = gt_membership(scene);
        let mut target = Mat::zeros((n, n));
        let mut tri = Mat::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                tri[(i, j)] = 1.0;
                let together = (0..memb.dim().0).any(|g| memb[(g, i)] > 0.5 && memb[(g, j)] > 0.5);
                if together {
                    target[(i, j)] = 1.0;
                }
            }
        }
        let bce = bce_t(ctx, aux.pairwise_social, &target);
        let t = ctx.tape.leaf(tri);
        let masked = ctx.tape.mul(bce, t);
        let total = ctx.tape.sum_all(masked);
        ctx.tape.scale(total, 2.0 / (n * (n - 1)) as f64)
    } else {
        ctx.tape.scalar(0.0)
    };

    Ok((ang, hm, io, social))
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub grp: f64,
    pub sae: f64,
    pub ang: f64,
    pub hm: f64,
    pub io: f64,
    pub social: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.grp += other.grp;
        self.sae += other.sae;
        self.ang += other.ang;
        self.hm += other.hm;
        self.io += other.io;
        self.social += other.social;
        self.total += other.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.grp *= k;
        self.sae *= k;
        self.ang *= k;
        self.hm *= k;
        self.io *= k;
        self.social *= k;
        self.total *= k;
    }

    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} l_grp={:.6} l_sae={:.6} l_ang={:.6} l_hm={:.6} l_io={:.6} l_social={:.6} total={:.6}",
            self.grp, self.sae, self.ang, self.hm, self.io, self.social, self.total
        )
    }
}

/// Build the full scene loss on the tape. Both detection stages contribute
/// membership and map terms; the auxiliary terms are added once.
pub fn scene_loss(
    ctx: &mut NetCtx,
    scene: &Scene,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Var, LossBreakdown), TrainError> {
    let pass = forward_pass(ctx, scene, cfg, tc.with_refinement)?;
    let gt_memb = gt_membership(scene);
    let gt_maps = gt_sa_maps(
        scene,
        tc.gaussian_sigma,
        cfg.heatmap_height,
        cfg.heatmap_width,
    )?;
    let (mut grp, mut sae) = stage_losses(
        ctx,
        pass.membership_init,
        pass.sa_init,
        &gt_memb,
        &gt_maps,
        tc.no_object_weight,
    )?;
    if let (Some(m1), Some(s1)) = (pass.membership_refined, pass.sa_refined) {
        let (g1, s1v) = stage_losses(ctx, m1, s1, &gt_memb, &gt_maps, tc.no_object_weight)?;
        grp = ctx.tape.add(grp, g1);
        sae = ctx.tape.add(sae, s1v);
    }
    let (ang, hm, io, social) = aux_losses(
        ctx,
        pass.heatmaps,
        &pass.aux,
        scene,
        cfg,
        tc.gaussian_sigma,
        tc.with_social_loss,
    )?;
    let grp = ctx.tape.scale(grp, tc.w_grp);
    let sae = ctx.tape.scale(sae, tc.w_sae);
    let ang = ctx.tape.scale(ang, tc.w_ang);
    let hm = ctx.tape.scale(hm, tc.w_hm);
    let io = ctx.tape.scale(io, tc.w_io);
    let social = ctx.tape.scale(social, tc.w_social);
    let mut total = ctx.tape.add(grp, sae);
    total = ctx.tape.add(total, ang);
    total = ctx.tape.add(total, hm);
    total = ctx.tape.add(total, io);
    total = ctx.tape.add(total, social);
    let at = |v: Var, ctx: &NetCtx| ctx.tape.value(v)[(0, 0)];
    let bd = LossBreakdown {
        grp: at(grp, ctx),
        sae: at(sae, ctx),
        ang: at(ang, ctx),
        hm: at(hm, ctx),
        io: at(io, ctx),
        social: at(social, ctx),
        total: at(total, ctx),
    };
    Ok((total, bd))
}

/// One optimizer step over a batch of scenes: per-scene backward passes
/// accumulate into one gradient, averaged and fed to Adam.
pub fn train_step(
    params: &mut ParamStore,
    adam: &mut Adam,
    scenes: &[&Scene],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    assert!(!scenes.is_empty(), "empty batch");
    let mut grads = GradStore::zeros_like(params);
    let mut mean = LossBreakdown::default();
    for scene in scenes {
        let mut ctx = NetCtx::new(params);
        let (total, bd) = scene_loss(&mut ctx, scene, cfg, tc)?;
        if !bd.total.is_finite() {
            return Err(TrainError::NonFinite(scene.scene_id.clone()));
        }
        ctx.accumulate_grads(total, &mut grads);
        mean.add(&bd);
    }
    let inv = 1.0 / scenes.len() as f64;
    grads.scale(inv);
    mean.scale(inv);
    if !grads.max_abs().is_finite() {
        return Err(TrainError::NonFinite(scenes[0].scene_id.clone()));
    }
    adam.step(params, &grads);
    Ok(mean)
}

/// Run `tc.steps` optimizer steps, cycling through `scenes` in order.
/// Writes one log line every `log_every` steps (and for the last step).
pub fn train_loop(
    params: &mut ParamStore,
    scenes: &[Scene],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<LossBreakdown>, TrainError> {
    assert!(!scenes.is_empty(), "empty dataset");
    let mut adam = Adam::new(params, tc.lr);
    let mut history = Vec::with_capacity(tc.steps);
    let mut cursor = 0usize;
    for step in 0..tc.steps {
        let batch: Vec<&Scene> = (0..tc.batch_size.max(1))
            .map(|i| &scenes[(cursor + i) % scenes.len()])
            .collect();
        cursor = (cursor + tc.batch_size.max(1)) % scenes.len();
        let bd = train_step(params, &mut adam, &batch, cfg, tc)?;
        if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps) {
            writeln!(log, "{}", bd.log_line(step))?;
        }
        history.push(bd);
    }
    Ok(history)
}
