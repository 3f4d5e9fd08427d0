//! Membership-weighted heatmap aggregation and the refinement round.
//!
//! Shared-attention maps are the person-mean of membership-weighted
//! individual heatmaps: `S[e] = (1/N) sum_n M[e][n] * A[n]`, realized as a
//! matrix product of the E x N membership with the N x (H*W) heatmap
//! stack. One refinement round appends the peak of each aggregated map to
//! its group token and repeats detection and membership under separate
//! parameters. Groups are emitted for token rows with at least two
//! memberships strictly above tau.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::autodiff::{Mat, Var};
use crate::grid;
use crate::groups::{
    augment_person_tokens_t, compute_membership_t, detect_groups_t, group_queries_t,
    DETECT_INITIAL, DETECT_REFINED, MEMBERSHIP_INITIAL, MEMBERSHIP_REFINED,
};
use crate::model::{
    decode_heatmaps_t, encode_persons_t, predict_aux_t, AuxVars, ModelConfig, ModelError, NetCtx,
    Network,
};
use crate::scene::Scene;

/// Value-level aggregation; the tape path in [`aggregate_heatmaps_t`] runs
/// the same matrix product.
pub fn aggregate_heatmaps(membership: &Mat, heatmaps: &Mat) -> Result<Mat, ModelError> {
    let n = heatmaps.dim().0;
    if n == 0 {
        return Err(ModelError::EmptyScene);
    }
    if membership.dim().1 != n {
        return Err(ModelError::ShapeMismatch(format!(
            "membership covers {} persons but {} heatmaps given",
            membership.dim().1,
            n
        )));
    }
    Ok(membership.dot(heatmaps) / n as f64)
}

pub fn aggregate_heatmaps_t(
    ctx: &mut NetCtx,
    membership: Var,
    heatmaps: Var,
) -> Result<Var, ModelError> {
    let n = ctx.tape.value(heatmaps).dim().0;
    if n == 0 {
        return Err(ModelError::EmptyScene);
    }
    if ctx.tape.value(membership).dim().1 != n {
        return Err(ModelError::ShapeMismatch(
            "membership and heatmap person counts differ".into(),
        ));
    }
    let prod = ctx.tape.matmul(membership, heatmaps);
    Ok(ctx.tape.scale(prod, 1.0 / n as f64))
}

/// Peak cell center of one flattened map; same contract as
/// [`crate::model::peak_coords`].
pub fn spatial_argmax(row: &[f64], h: usize, w: usize) -> Result<(f64, f64), ModelError> {
    grid::peak_coords_flat(row, h, w).map_err(|_| ModelError::ShapeMismatch("empty map".into()))
}

/// Peak coordinates for each row of an E x (H*W) stack.
///
/// Hard mode detaches the lookup (a constant on the tape); soft mode is a
/// softmax-weighted expectation of cell centers and stays differentiable.
pub fn argmax_coords_t(ctx: &mut NetCtx, stack: Var, cfg: &ModelConfig) -> Var {
    let (h, w) = (cfg.heatmap_height, cfg.heatmap_width);
    if cfg.soft_argmax {
        let scaled = ctx.tape.scale(stack, cfg.soft_argmax_temp);
        let weights = ctx.tape.softmax_rows(scaled);
        let mut centers = Mat::zeros((h * w, 2));
        for i in 0..h {
            for j in 0..w {
                centers[(i * w + j, 0)] = (j as f64 + 0.5) / w as f64;
                centers[(i * w + j, 1)] = (i as f64 + 0.5) / h as f64;
            }
        }
        let cv = ctx.tape.leaf(centers);
        ctx.tape.matmul(weights, cv)
    } else {
        let values = ctx.tape.value(stack);
        let e = values.dim().0;
        let mut coords = Mat::zeros((e, 2));
        for r in 0..e {
            let row: Vec<f64> = values.row(r).to_vec();
            let (x, y) = grid::peak_coords_flat(&row, h, w).expect("non-empty stack");
            coords[(r, 0)] = x;
            coords[(r, 1)] = y;
        }
        ctx.tape.leaf(coords)
    }
}

/// One refinement round: peak-augmented group tokens re-detect against the
/// augmented persons under separate parameters, then re-aggregate.
pub fn refine_t(
    ctx: &mut NetCtx,
    group_tokens: Var,
    sa_stack: Var,
    augmented: Var,
    heatmaps: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var), ModelError> {
    let coords = argmax_coords_t(ctx, sa_stack, cfg);
    let queries = ctx.tape.concat_cols(group_tokens, coords);
    let refined = detect_groups_t(ctx, queries, augmented, DETECT_REFINED, cfg);
    let membership = compute_membership_t(ctx, refined, augmented, MEMBERSHIP_REFINED);
    let sa = aggregate_heatmaps_t(ctx, membership, heatmaps)?;
    Ok((membership, sa))
}

pub struct ForwardPass {
    pub tokens: Var,
    /// N x (H*W) individual heatmaps.
    pub heatmaps: Var,
    pub aux: AuxVars,
    /// N x (D+2) augmented person tokens.
    pub augmented: Var,
    /// E x D detector output of the initial pass.
    pub group_tokens: Var,
    pub membership_init: Var,
    pub sa_init: Var,
    pub membership_refined: Option<Var>,
    pub sa_refined: Option<Var>,
}

impl ForwardPass {
    pub fn final_membership(&self) -> Var {
        self.membership_refined.unwrap_or(self.membership_init)
    }
    pub fn final_sa(&self) -> Var {
        self.sa_refined.unwrap_or(self.sa_init)
    }
}

/// Run the whole pipeline on one scene.
pub fn forward_pass(
    ctx: &mut NetCtx,
    scene: &Scene,
    cfg: &ModelConfig,
    with_refinement: bool,
) -> Result<ForwardPass, ModelError> {
    let (tokens, _) = encode_persons_t(ctx, scene, cfg)?;
    let heatmaps = decode_heatmaps_t(ctx, tokens, scene, cfg);
    let aux = predict_aux_t(ctx, tokens, cfg);
    let heat_values = ctx.tape.value(heatmaps).clone();
    let augmented = augment_person_tokens_t(ctx, tokens, &heat_values, cfg)?;
    let queries = group_queries_t(ctx, cfg);
    let group_tokens = detect_groups_t(ctx, queries, augmented, DETECT_INITIAL, cfg);
    let membership_init = compute_membership_t(ctx, group_tokens, augmented, MEMBERSHIP_INITIAL);
    let sa_init = aggregate_heatmaps_t(ctx, membership_init, heatmaps)?;
    let (membership_refined, sa_refined) = if with_refinement {
        let (m, s) = refine_t(ctx, group_tokens, sa_init, augmented, heatmaps, cfg)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(ForwardPass {
        tokens,
        heatmaps,
        aux,
        augmented,
        group_tokens,
        membership_init,
        sa_init,
        membership_refined,
        sa_refined,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictedGroup {
    pub members: Vec<usize>,
    pub sa_point: (f64, f64),
    pub confidence: f64,
}

/// Emit a group per token row whose membership clears tau (strictly) for
/// at least two persons. The attended point is the peak of the row's
/// aggregated map and the confidence its peak value.
pub fn extract_groups(
    membership: &Mat,
    sa_stack: &Mat,
    tau: f64,
    h: usize,
    w: usize,
) -> Vec<PredictedGroup> {
    let (e, n) = membership.dim();
    let mut out = Vec::new();
    for row in 0..e {
        let members: Vec<usize> = (0..n).filter(|&p| membership[(row, p)] > tau).collect();
        if members.len() < 2 {
            continue;
        }
        let s_row: Vec<f64> = sa_stack.row(row).to_vec();
        let sa_point = grid::peak_coords_flat(&s_row, h, w).expect("non-empty map");
        let confidence = s_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(PredictedGroup {
            members,
            sa_point,
            confidence,
        });
    }
    out
}

/// Value outputs of a full inference run on one scene.
pub struct ScenePrediction {
    pub heatmaps: Mat,
    pub membership_init: Mat,
    pub sa_init: Mat,
    pub membership_final: Mat,
    pub sa_final: Mat,
    pub pairwise_social: Mat,
    pub groups_initial: Vec<PredictedGroup>,
    pub groups: Vec<PredictedGroup>,
}

impl Network {
    /// Inference: forward pass plus group extraction at threshold `tau`.
    pub fn predict(
        &self,
        scene: &Scene,
        with_refinement: bool,
        tau: f64,
    ) -> Result<ScenePrediction, ModelError> {
        let mut ctx = NetCtx::new(&self.params);
        let pass = forward_pass(&mut ctx, scene, &self.cfg, with_refinement)?;
        let (h, w) = (self.cfg.heatmap_height, self.cfg.heatmap_width);
        let membership_init = ctx.tape.value(pass.membership_init).clone();
        let sa_init = ctx.tape.value(pass.sa_init).clone();
        let membership_final = ctx.tape.value(pass.final_membership()).clone();
        let sa_final = ctx.tape.value(pass.final_sa()).clone();
        Ok(ScenePrediction {
            heatmaps: ctx.tape.value(pass.heatmaps).clone(),
            pairwise_social: ctx.tape.value(pass.aux.pairwise_social).clone(),
            groups_initial: extract_groups(&membership_init, &sa_init, tau, h, w),
            groups: extract_groups(&membership_final, &sa_final, tau, h, w),
            membership_init,
            sa_init,
            membership_final,
            sa_final,
        })
    }
}

// ====================== prediction dump ======================

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenePredictionRecord {
    pub scene_id: String,
    pub groups: Vec<PredictedGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_groups: Option<Vec<PredictedGroup>>,
}

pub fn write_predictions(
    records: &[ScenePredictionRecord],
    path: &Path,
) -> Result<(), std::io::Error> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScenePredictionRecord>, std::io::Error> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
