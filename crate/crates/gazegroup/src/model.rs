//! Person/scene attention network.
//!
//! Persons become tokens through a learned projection of (head box, head
//! center, appearance); grid cells become tokens through a learned content
//! projection plus fixed sinusoidal positional encodings. A stack of
//! pre-norm blocks interleaves person self-attention with cross-attention
//! onto the grid, and three heads read the tokens out: a per-person gaze
//! heatmap decoder (per-cell dot-product scores through a two-layer
//! pointwise map and sigmoid), a unit gaze-direction head, an in-frame
//! probability head, and a symmetric pairwise-affinity head.

use ndarray::{Array3, Axis};
use thiserror::Error;

use crate::autodiff::{Mat, Tape, Var};
use crate::grid;
use crate::params::{GradStore, ParamError, ParamInit, ParamStore};
use crate::scene::Scene;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width D; divisible by `n_heads`.
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
    /// Number of learnable group queries E.
    pub max_group_tokens: usize,
    /// Membership threshold used when emitting groups.
    pub tau: f64,
    pub ffn_dim: usize,
    pub decoder_heads: usize,
    pub decoder_head_dim: usize,
    pub decoder_hidden: usize,
    pub group_encoder_layers: usize,
    pub detector_layers: usize,
    /// Shared space the membership maps g and f project into.
    pub membership_dim: usize,
    pub social_dim: usize,
    /// Replace the hard peak lookup on aggregated maps with a softmax
    /// expectation at this temperature.
    pub soft_argmax: bool,
    pub soft_argmax_temp: f64,
    pub grid_channels: usize,
    pub appearance_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_dim: 64,
            n_layers: 2,
            n_heads: 4,
            heatmap_height: 32,
            heatmap_width: 32,
            max_group_tokens: 4,
            tau: 0.5,
            ffn_dim: 128,
            decoder_heads: 4,
            decoder_head_dim: 16,
            decoder_hidden: 16,
            group_encoder_layers: 1,
            detector_layers: 2,
            membership_dim: 64,
            social_dim: 16,
            soft_argmax: false,
            soft_argmax_temp: 60.0,
            grid_channels: 8,
            appearance_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.token_dim < 8 {
            return Err(ModelError::InvalidConfig("token_dim must be >= 8".into()));
        }
        if self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "token_dim must be divisible by n_heads".into(),
            ));
        }
        if self.max_group_tokens < 1 {
            return Err(ModelError::InvalidConfig(
                "max_group_tokens must be >= 1".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ModelError::InvalidConfig("tau must lie in (0,1)".into()));
        }
        if self.n_layers == 0 || self.detector_layers == 0 {
            return Err(ModelError::InvalidConfig("need at least one layer".into()));
        }
        if self.heatmap_height == 0 || self.heatmap_width == 0 {
            return Err(ModelError::InvalidConfig("heatmap shape must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    pub fn cells(&self) -> usize {
        self.heatmap_height * self.heatmap_width
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("scene has no persons")]
    EmptyScene,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// N x D person tokens.
pub struct PersonTokenSet(pub Mat);

/// Per-person gaze heatmaps, each H x W with entries in [0,1].
pub struct IndividualHeatmaps(pub Array3<f64>);

impl IndividualHeatmaps {
    pub fn peak(&self, person: usize) -> (f64, f64) {
        grid::peak_coords(self.0.index_axis(Axis(0), person)).expect("non-empty map")
    }
}

pub struct AuxPredictions {
    /// N x 2 unit gaze directions.
    pub gaze_dir: Mat,
    /// N x 1 in-frame probabilities.
    pub in_out: Mat,
    /// N x N symmetric same-group probabilities.
    pub pairwise_social: Mat,
}

// ====================== forward context ======================

/// One forward pass: a tape plus lazy bindings of named parameters.
pub struct NetCtx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    touched: Vec<(usize, Var)>,
}

impl<'a> NetCtx<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        NetCtx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            touched: Vec::new(),
        }
    }

    /// Bind (once) and return the tape leaf for a named parameter.
    pub fn p(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .idx(name)
            .unwrap_or_else(|_| panic!("forward pass references unknown parameter `{name}`"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.tape.leaf(self.params.by_idx(idx).clone());
        self.bound[idx] = Some(v);
        self.touched.push((idx, v));
        v
    }

    pub fn n_bound(&self) -> usize {
        self.touched.len()
    }

    /// Add this pass's parameter grads of `root` into `out`.
    pub fn accumulate_grads(&self, root: Var, out: &mut GradStore) {
        let grads = self.tape.backward(root);
        for &(idx, var) in &self.touched {
            if let Some(g) = grads.get(var) {
                out.accumulate(idx, g);
            }
        }
    }
}

// ====================== shared blocks ======================

pub(crate) fn affine(ctx: &mut NetCtx, x: Var, prefix: &str) -> Var {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    let xw = ctx.tape.matmul(x, w);
    ctx.tape.add_row(xw, b)
}

pub(crate) fn layer_norm(ctx: &mut NetCtx, x: Var, prefix: &str) -> Var {
    let g = ctx.p(&format!("{prefix}.g"));
    let b = ctx.p(&format!("{prefix}.b"));
    let mu = ctx.tape.row_mean(x);
    let cent = ctx.tape.sub_col(x, mu);
    let sq = ctx.tape.mul(cent, cent);
    let var = ctx.tape.row_mean(sq);
    let var = ctx.tape.add_const(var, 1e-5);
    let sd = ctx.tape.sqrt(var);
    let norm = ctx.tape.div_col(cent, sd);
    let y = ctx.tape.mul_row(norm, g);
    ctx.tape.add_row(y, b)
}

/// Multi-head attention: queries from `q_in`, keys and values from `kv_in`,
/// concatenated heads through an output projection.
pub(crate) fn mha(
    ctx: &mut NetCtx,
    q_in: Var,
    kv_in: Var,
    prefix: &str,
    n_heads: usize,
    d_head: usize,
) -> Var {
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let wq = ctx.p(&format!("{prefix}.wq{h}"));
        let wk = ctx.p(&format!("{prefix}.wk{h}"));
        let wv = ctx.p(&format!("{prefix}.wv{h}"));
        let q = ctx.tape.matmul(q_in, wq);
        let k = ctx.tape.matmul(kv_in, wk);
        let v = ctx.tape.matmul(kv_in, wv);
        let s = ctx.tape.matmul_nt(q, k);
        let s = ctx.tape.scale(s, scale);
        let a = ctx.tape.softmax_rows(s);
        head_outs.push(ctx.tape.matmul(a, v));
    }
    let mut cat = head_outs[0];
    for &h in &head_outs[1..] {
        cat = ctx.tape.concat_cols(cat, h);
    }
    let wo = ctx.p(&format!("{prefix}.wo"));
    ctx.tape.matmul(cat, wo)
}

pub(crate) fn ffn(ctx: &mut NetCtx, x: Var, prefix: &str) -> Var {
    let h = affine(ctx, x, &format!("{prefix}.l1"));
    let h = ctx.tape.tanh(h);
    affine(ctx, h, &format!("{prefix}.l2"))
}

/// Sinusoidal positional encoding for the cell centers of an H x W grid.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros((h * w, d));
    let quarter = (d / 4).max(1);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let row = i * w + j;
            for k in 0..quarter {
                let omega = std::f64::consts::PI * (k + 1) as f64;
                if 2 * k + 1 < d / 2 {
                    pe[(row, 2 * k)] = (omega * x).sin();
                    pe[(row, 2 * k + 1)] = (omega * x).cos();
                }
                if d / 2 + 2 * k + 1 < d {
                    pe[(row, d / 2 + 2 * k)] = (omega * y).sin();
                    pe[(row, d / 2 + 2 * k + 1)] = (omega * y).cos();
                }
            }
        }
    }
    pe
}

fn register_attn(init: &mut ParamInit, prefix: &str, q_dim: usize, kv_dim: usize, n_heads: usize, d_head: usize, out_dim: usize) {
    for h in 0..n_heads {
        init.xavier(&format!("{prefix}.wq{h}"), q_dim, d_head);
        init.xavier(&format!("{prefix}.wk{h}"), kv_dim, d_head);
        init.xavier(&format!("{prefix}.wv{h}"), kv_dim, d_head);
    }
    init.xavier(&format!("{prefix}.wo"), n_heads * d_head, out_dim);
}

fn register_affine(init: &mut ParamInit, prefix: &str, in_dim: usize, out_dim: usize) {
    init.xavier(&format!("{prefix}.w"), in_dim, out_dim);
    init.constant(&format!("{prefix}.b"), 1, out_dim, 0.0);
}

fn register_norm(init: &mut ParamInit, prefix: &str, dim: usize) {
    init.constant(&format!("{prefix}.g"), 1, dim, 1.0);
    init.constant(&format!("{prefix}.b"), 1, dim, 0.0);
}

fn register_ffn(init: &mut ParamInit, prefix: &str, dim: usize, hidden: usize) {
    register_affine(init, &format!("{prefix}.l1"), dim, hidden);
    register_affine(init, &format!("{prefix}.l2"), hidden, dim);
}

/// Register encoder, decoder and auxiliary-head parameters.
pub fn register_backbone(init: &mut ParamInit, cfg: &ModelConfig) {
    let d = cfg.token_dim;
    let dh = cfg.head_dim();
    register_affine(init, "embed.person", 6 + cfg.appearance_dim, d);
    register_affine(init, "embed.grid", cfg.grid_channels, d);
    for l in 0..cfg.n_layers {
        register_norm(init, &format!("enc{l}.self.ln"), d);
        register_attn(init, &format!("enc{l}.self.attn"), d, d, cfg.n_heads, dh, d);
        register_norm(init, &format!("enc{l}.cross.ln"), d);
        register_attn(init, &format!("enc{l}.cross.attn"), d, d, cfg.n_heads, dh, d);
        register_norm(init, &format!("enc{l}.ffn.ln"), d);
        register_ffn(init, &format!("enc{l}.ffn"), d, cfg.ffn_dim);
    }
    register_norm(init, "enc.final_ln", d);

    register_affine(init, "dec.grid", cfg.grid_channels, d);
    for h in 0..cfg.decoder_heads {
        init.xavier(&format!("dec.wq{h}"), d, cfg.decoder_head_dim);
        init.xavier(&format!("dec.wk{h}"), d, cfg.decoder_head_dim);
    }
    register_affine(init, "dec.mix.l1", cfg.decoder_heads, cfg.decoder_hidden);
    register_affine(init, "dec.mix.l2", cfg.decoder_hidden, 1);

    init.xavier("aux.dir.w", d, 2);
    init.row("aux.dir.b", &[0.5, 0.0]);
    register_affine(init, "aux.io", d, 1);
    register_affine(init, "aux.soc_a", d, cfg.social_dim);
    register_affine(init, "aux.soc_b", d, cfg.social_dim);
}

/// Initialize every parameter of the full pipeline (backbone + group head).
pub fn init_full(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut init = ParamInit::new(seed);
    register_backbone(&mut init, cfg);
    crate::groups::register_group_head(&mut init, cfg);
    init.store
}

// ====================== forward passes ======================

fn scene_checks(scene: &Scene, cfg: &ModelConfig) -> Result<(), ModelError> {
    if scene.persons.is_empty() {
        return Err(ModelError::EmptyScene);
    }
    if scene.grid.height() != cfg.heatmap_height || scene.grid.width() != cfg.heatmap_width {
        return Err(ModelError::ShapeMismatch(format!(
            "scene grid {}x{} but model expects {}x{}",
            scene.grid.height(),
            scene.grid.width(),
            cfg.heatmap_height,
            cfg.heatmap_width
        )));
    }
    if scene.grid.channels() != cfg.grid_channels {
        return Err(ModelError::ShapeMismatch(format!(
            "scene grid has {} channels but model expects {}",
            scene.grid.channels(),
            cfg.grid_channels
        )));
    }
    for (i, p) in scene.persons.iter().enumerate() {
        if p.appearance.len() != cfg.appearance_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "persons[{i}] appearance dim {} but model expects {}",
                p.appearance.len(),
                cfg.appearance_dim
            )));
        }
    }
    Ok(())
}

fn person_features(scene: &Scene, cfg: &ModelConfig) -> Mat {
    let n = scene.persons.len();
    let mut f = Mat::zeros((n, 6 + cfg.appearance_dim));
    for (i, p) in scene.persons.iter().enumerate() {
        let (cx, cy) = p.head_center();
        f[(i, 0)] = p.head_box[0];
        f[(i, 1)] = p.head_box[1];
        f[(i, 2)] = p.head_box[2];
        f[(i, 3)] = p.head_box[3];
        f[(i, 4)] = cx;
        f[(i, 5)] = cy;
        for (k, &a) in p.appearance.iter().enumerate() {
            f[(i, 6 + k)] = a;
        }
    }
    f
}

/// Encode persons into N x D tokens; also returns the grid-cell embedding
/// the cross-attention attended to, for reuse by downstream heads.
pub fn encode_persons_t(
    ctx: &mut NetCtx,
    scene: &Scene,
    cfg: &ModelConfig,
) -> Result<(Var, Var), ModelError> {
    scene_checks(scene, cfg)?;
    let feats = person_features(scene, cfg);
    let fvar = ctx.tape.leaf(feats);
    let mut x = affine(ctx, fvar, "embed.person");

    let cells = ctx.tape.leaf(scene.grid.cells());
    let ge = affine(ctx, cells, "embed.grid");
    let pe = ctx.tape.leaf(positional_encoding(
        cfg.heatmap_height,
        cfg.heatmap_width,
        cfg.token_dim,
    ));
    let ge = ctx.tape.add(ge, pe);

    let dh = cfg.head_dim();
    for l in 0..cfg.n_layers {
        let t = layer_norm(ctx, x, &format!("enc{l}.self.ln"));
        let sa = mha(ctx, t, t, &format!("enc{l}.self.attn"), cfg.n_heads, dh);
        x = ctx.tape.add(x, sa);
        let t = layer_norm(ctx, x, &format!("enc{l}.cross.ln"));
        let ca = mha(ctx, t, ge, &format!("enc{l}.cross.attn"), cfg.n_heads, dh);
        x = ctx.tape.add(x, ca);
        let t = layer_norm(ctx, x, &format!("enc{l}.ffn.ln"));
        let ff = ffn(ctx, t, &format!("enc{l}.ffn"));
        x = ctx.tape.add(x, ff);
    }
    let x = layer_norm(ctx, x, "enc.final_ln");
    Ok((x, ge))
}

/// Per-person heatmaps as an N x (H*W) matrix with entries in [0,1].
pub fn decode_heatmaps_t(ctx: &mut NetCtx, tokens: Var, scene: &Scene, cfg: &ModelConfig) -> Var {
    let cells = ctx.tape.leaf(scene.grid.cells());
    let dg = affine(ctx, cells, "dec.grid");
    let pe = ctx.tape.leaf(positional_encoding(
        cfg.heatmap_height,
        cfg.heatmap_width,
        cfg.token_dim,
    ));
    let dg = ctx.tape.add(dg, pe);
    let n = ctx.tape.value(tokens).dim().0;
    let hw = cfg.cells();
    let scale = 1.0 / (cfg.decoder_head_dim as f64).sqrt();
    let mut flat_scores = Vec::with_capacity(cfg.decoder_heads);
    for h in 0..cfg.decoder_heads {
        let wq = ctx.p(&format!("dec.wq{h}"));
        let wk = ctx.p(&format!("dec.wk{h}"));
        let q = ctx.tape.matmul(tokens, wq);
        let k = ctx.tape.matmul(dg, wk);
        let s = ctx.tape.matmul_nt(q, k);
        let s = ctx.tape.scale(s, scale);
        flat_scores.push(ctx.tape.reshape(s, n * hw, 1));
    }
    let mut cat = flat_scores[0];
    for &s in &flat_scores[1..] {
        cat = ctx.tape.concat_cols(cat, s);
    }
    let z = affine(ctx, cat, "dec.mix.l1");
    let z = ctx.tape.tanh(z);
    let z = affine(ctx, z, "dec.mix.l2");
    let z = ctx.tape.reshape(z, n, hw);
    ctx.tape.sigmoid(z)
}

pub struct AuxVars {
    pub gaze_dir: Var,
    pub in_out: Var,
    pub pairwise_social: Var,
}

pub fn predict_aux_t(ctx: &mut NetCtx, tokens: Var, _cfg: &ModelConfig) -> AuxVars {
    let raw = affine(ctx, tokens, "aux.dir");
    // Row-normalize; the tiny floor keeps the derivative defined while
    // leaving norms within 1e-6 of one for any non-degenerate row.
    let sq = ctx.tape.mul(raw, raw);
    let n2 = ctx.tape.row_sum(sq);
    let n2 = ctx.tape.add_const(n2, 1e-24);
    let norm = ctx.tape.sqrt(n2);
    let gaze_dir = ctx.tape.div_col(raw, norm);

    let io_logit = affine(ctx, tokens, "aux.io");
    let in_out = ctx.tape.sigmoid(io_logit);

    let a = affine(ctx, tokens, "aux.soc_a");
    let b = affine(ctx, tokens, "aux.soc_b");
    let logits = ctx.tape.matmul_nt(a, b);
    let logits_t = ctx.tape.transpose(logits);
    let sym = ctx.tape.add(logits, logits_t);
    let sym = ctx.tape.scale(sym, 0.5);
    let pairwise_social = ctx.tape.sigmoid(sym);

    AuxVars {
        gaze_dir,
        in_out,
        pairwise_social,
    }
}

/// Normalized (x, y) center of the strongest heatmap cell; ties resolve to
/// the smallest row-major index.
pub fn peak_coords(map: ndarray::ArrayView2<f64>) -> Result<(f64, f64), ModelError> {
    grid::peak_coords(map).map_err(|_| ModelError::ShapeMismatch("empty heatmap".into()))
}

// ====================== value-level wrapper ======================

pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Network {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = init_full(&cfg, seed);
        Ok(Network { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Network { cfg, params })
    }

    pub fn encode_persons(&self, scene: &Scene) -> Result<PersonTokenSet, ModelError> {
        let mut ctx = NetCtx::new(&self.params);
        let (tokens, _) = encode_persons_t(&mut ctx, scene, &self.cfg)?;
        Ok(PersonTokenSet(ctx.tape.value(tokens).clone()))
    }

    pub fn individual_heatmaps(&self, scene: &Scene) -> Result<IndividualHeatmaps, ModelError> {
        let mut ctx = NetCtx::new(&self.params);
        let (tokens, _) = encode_persons_t(&mut ctx, scene, &self.cfg)?;
        let maps = decode_heatmaps_t(&mut ctx, tokens, scene, &self.cfg);
        let flat = ctx.tape.value(maps);
        let n = flat.dim().0;
        let (h, w) = (self.cfg.heatmap_height, self.cfg.heatmap_width);
        let mut out = Array3::zeros((n, h, w));
        for p in 0..n {
            for i in 0..h {
                for j in 0..w {
                    out[(p, i, j)] = flat[(p, i * w + j)];
                }
            }
        }
        Ok(IndividualHeatmaps(out))
    }

    pub fn predict_aux(&self, scene: &Scene) -> Result<AuxPredictions, ModelError> {
        let mut ctx = NetCtx::new(&self.params);
        let (tokens, _) = encode_persons_t(&mut ctx, scene, &self.cfg)?;
        let aux = predict_aux_t(&mut ctx, tokens, &self.cfg);
        Ok(AuxPredictions {
            gaze_dir: ctx.tape.value(aux.gaze_dir).clone(),
            in_out: ctx.tape.value(aux.in_out).clone(),
            pairwise_social: ctx.tape.value(aux.pairwise_social).clone(),
        })
    }
}
