//! Learnable group queries and membership scoring.
//!
//! A bank of E learnable tokens passes through one self-attention block,
//! then a cross-attention detector reads person evidence out of the
//! augmented person tokens (person token plus its heatmap peak). Membership
//! is the sigmoid of a bilinear comparison between projected group and
//! person tokens. The refinement pass reuses the same machinery under
//! separate parameter prefixes, with peak coordinates of the aggregated
//! maps appended to the group tokens.

use crate::autodiff::{Mat, Var};
use crate::grid;
use crate::model::{affine, ffn, layer_norm, mha, ModelConfig, ModelError, NetCtx};
use crate::params::ParamInit;

/// Prefix for the initial detection pass.
pub const DETECT_INITIAL: &str = "det0";
/// Prefix for the refinement pass (separate parameters throughout).
pub const DETECT_REFINED: &str = "det1";
pub const MEMBERSHIP_INITIAL: &str = "memb0";
pub const MEMBERSHIP_REFINED: &str = "memb1";

pub fn register_group_head(init: &mut ParamInit, cfg: &ModelConfig) {
    let d = cfg.token_dim;
    let dh = cfg.head_dim();
    let key_dim = d + 2;
    init.normal("grp.tokens", cfg.max_group_tokens, d, 0.02);
    for l in 0..cfg.group_encoder_layers {
        register_norm(init, &format!("grp.enc{l}.self.ln"), d);
        register_attn(init, &format!("grp.enc{l}.self.attn"), d, d, cfg.n_heads, dh, d);
        register_norm(init, &format!("grp.enc{l}.ffn.ln"), d);
        register_ffn(init, &format!("grp.enc{l}.ffn"), d, cfg.ffn_dim);
    }
    for (prefix, in_dim) in [(DETECT_INITIAL, d), (DETECT_REFINED, d + 2)] {
        register_affine(init, &format!("{prefix}.in"), in_dim, d);
        for l in 0..cfg.detector_layers {
            register_norm(init, &format!("{prefix}.l{l}.ln"), d);
            register_attn(
                init,
                &format!("{prefix}.l{l}.attn"),
                d,
                key_dim,
                cfg.n_heads,
                dh,
                d,
            );
            register_norm(init, &format!("{prefix}.l{l}.ffn.ln"), d);
            register_ffn(init, &format!("{prefix}.l{l}.ffn"), d, cfg.ffn_dim);
        }
    }
    for prefix in [MEMBERSHIP_INITIAL, MEMBERSHIP_REFINED] {
        register_affine(init, &format!("{prefix}.g"), d, cfg.membership_dim);
        register_affine(init, &format!("{prefix}.f"), d + 2, cfg.membership_dim);
    }
}

fn register_attn(
    init: &mut ParamInit,
    prefix: &str,
    q_dim: usize,
    kv_dim: usize,
    n_heads: usize,
    d_head: usize,
    out_dim: usize,
) {
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

/// Append each person's heatmap peak coordinates to its token.
///
/// The coordinate columns are detached: peaks come from the heatmap values,
/// so no gradient flows through the lookup.
pub fn augment_person_tokens_t(
    ctx: &mut NetCtx,
    tokens: Var,
    heatmaps: &Mat,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let n = ctx.tape.value(tokens).dim().0;
    if heatmaps.dim().0 != n {
        return Err(ModelError::ShapeMismatch(format!(
            "{} heatmaps for {} person tokens",
            heatmaps.dim().0,
            n
        )));
    }
    let (h, w) = (cfg.heatmap_height, cfg.heatmap_width);
    if heatmaps.dim().1 != h * w {
        return Err(ModelError::ShapeMismatch(format!(
            "heatmap row length {} but grid has {} cells",
            heatmaps.dim().1,
            h * w
        )));
    }
    let mut peaks = Mat::zeros((n, 2));
    for p in 0..n {
        let row: Vec<f64> = heatmaps.row(p).to_vec();
        let (x, y) = grid::peak_coords_flat(&row, h, w)
            .map_err(|_| ModelError::ShapeMismatch("empty heatmap".into()))?;
        peaks[(p, 0)] = x;
        peaks[(p, 1)] = y;
    }
    let pk = ctx.tape.leaf(peaks);
    Ok(ctx.tape.concat_cols(tokens, pk))
}

/// Group tokens after their self-attention encoder, E x D.
pub fn group_queries_t(ctx: &mut NetCtx, cfg: &ModelConfig) -> Var {
    let mut x = ctx.p("grp.tokens");
    let dh = cfg.head_dim();
    for l in 0..cfg.group_encoder_layers {
        let t = layer_norm(ctx, x, &format!("grp.enc{l}.self.ln"));
        let sa = mha(ctx, t, t, &format!("grp.enc{l}.self.attn"), cfg.n_heads, dh);
        x = ctx.tape.add(x, sa);
        let t = layer_norm(ctx, x, &format!("grp.enc{l}.ffn.ln"));
        let ff = ffn(ctx, t, &format!("grp.enc{l}.ffn"));
        x = ctx.tape.add(x, ff);
    }
    x
}

/// Cross-attention detector: queries interrogate augmented person tokens.
///
/// Invariant to permutations of the person axis; query order is preserved.
/// Pre-norm residual blocks, no output norm, so zeroing the attention and
/// feed-forward output projections reduces the stack to its input
/// projection.
pub fn detect_groups_t(
    ctx: &mut NetCtx,
    queries: Var,
    augmented: Var,
    prefix: &str,
    cfg: &ModelConfig,
) -> Var {
    let dh = cfg.head_dim();
    let mut x = affine(ctx, queries, &format!("{prefix}.in"));
    for l in 0..cfg.detector_layers {
        let t = layer_norm(ctx, x, &format!("{prefix}.l{l}.ln"));
        let ca = mha(ctx, t, augmented, &format!("{prefix}.l{l}.attn"), cfg.n_heads, dh);
        x = ctx.tape.add(x, ca);
        let t = layer_norm(ctx, x, &format!("{prefix}.l{l}.ffn.ln"));
        let ff = ffn(ctx, t, &format!("{prefix}.l{l}.ffn"));
        x = ctx.tape.add(x, ff);
    }
    x
}

/// Sigmoid of the bilinear comparison between projected group and person
/// tokens: `M[e][n] = sigmoid(g(U_e) . f(P'_n))`, entries strictly in (0,1).
pub fn compute_membership_t(ctx: &mut NetCtx, group_tokens: Var, augmented: Var, prefix: &str) -> Var {
    let gu = affine(ctx, group_tokens, &format!("{prefix}.g"));
    let fp = affine(ctx, augmented, &format!("{prefix}.f"));
    let dots = ctx.tape.matmul_nt(gu, fp);
    ctx.tape.sigmoid(dots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_persons_t, init_full};
    use crate::params::{GradStore, ParamStore};
    use crate::scene::{generate_scene, GeneratorConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            token_dim: 16,
            n_layers: 1,
            n_heads: 2,
            heatmap_height: 8,
            heatmap_width: 8,
            max_group_tokens: 3,
            ffn_dim: 24,
            decoder_heads: 2,
            decoder_head_dim: 8,
            decoder_hidden: 8,
            membership_dim: 16,
            social_dim: 8,
            grid_channels: 4,
            appearance_dim: 6,
            ..ModelConfig::default()
        }
    }

    fn small_gen() -> GeneratorConfig {
        GeneratorConfig {
            grid_height: 8,
            grid_width: 8,
            grid_channels: 4,
            appearance_dim: 6,
            max_persons: 4,
            seed: 23,
            ..GeneratorConfig::default()
        }
    }

    fn rand_aug(n: usize, d: usize, seed: u64) -> Mat {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((n, d + 2), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn membership_matches_sigmoid_of_dot_products() {
        // Hand-built g and f so the bilinear score is the product of the
        // first coordinates: pick rows giving dots of 1 and -2.
        let cfg = small_cfg();
        let d = cfg.token_dim;
        let mut params = ParamStore::new();
        let mut gw = Array2::zeros((d, cfg.membership_dim));
        gw[(0, 0)] = 1.0;
        params.insert("memb0.g.w", gw).unwrap();
        params
            .insert("memb0.g.b", Array2::zeros((1, cfg.membership_dim)))
            .unwrap();
        let mut fw = Array2::zeros((d + 2, cfg.membership_dim));
        fw[(0, 0)] = 1.0;
        params.insert("memb0.f.w", fw).unwrap();
        params
            .insert("memb0.f.b", Array2::zeros((1, cfg.membership_dim)))
            .unwrap();

        let mut ctx = NetCtx::new(&params);
        let mut u = Array2::zeros((1, d));
        u[(0, 0)] = 1.0;
        let mut p = Array2::zeros((2, d + 2));
        p[(0, 0)] = 1.0;
        p[(1, 0)] = -2.0;
        let uv = ctx.tape.leaf(u);
        let pv = ctx.tape.leaf(p);
        let m = compute_membership_t(&mut ctx, uv, pv, MEMBERSHIP_INITIAL);
        let mv = ctx.tape.value(m);
        assert_abs_diff_eq!(mv[(0, 0)], 0.73105858, epsilon = 1e-8);
        assert_abs_diff_eq!(mv[(0, 1)], 0.11920292, epsilon = 1e-8);
    }

    #[test]
    fn orthogonal_projections_give_half_membership() {
        let cfg = small_cfg();
        let d = cfg.token_dim;
        let mut params = ParamStore::new();
        params
            .insert("memb0.g.w", Array2::zeros((d, cfg.membership_dim)))
            .unwrap();
        params
            .insert("memb0.g.b", Array2::zeros((1, cfg.membership_dim)))
            .unwrap();
        params
            .insert("memb0.f.w", Array2::zeros((d + 2, cfg.membership_dim)))
            .unwrap();
        params
            .insert("memb0.f.b", Array2::zeros((1, cfg.membership_dim)))
            .unwrap();
        let mut ctx = NetCtx::new(&params);
        let uv = ctx.tape.leaf(Array2::from_elem((2, d), 0.3));
        let pv = ctx.tape.leaf(rand_aug(3, d, 4));
        let m = compute_membership_t(&mut ctx, uv, pv, MEMBERSHIP_INITIAL);
        assert!(ctx.tape.value(m).iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn detector_is_invariant_to_person_permutation() {
        let cfg = small_cfg();
        let params = init_full(&cfg, 3);
        let aug = rand_aug(4, cfg.token_dim, 9);
        let run = |keys: Mat| {
            let mut ctx = NetCtx::new(&params);
            let q = group_queries_t(&mut ctx, &cfg);
            let kv = ctx.tape.leaf(keys);
            let u = detect_groups_t(&mut ctx, q, kv, DETECT_INITIAL, &cfg);
            ctx.tape.value(u).clone()
        };
        let base = run(aug.clone());
        let mut perm = Mat::zeros(aug.dim());
        let order = [2usize, 0, 3, 1];
        for (to, &from) in order.iter().enumerate() {
            perm.row_mut(to).assign(&aug.row(from));
        }
        let permuted = run(perm);
        for e in 0..cfg.max_group_tokens {
            for k in 0..cfg.token_dim {
                assert_abs_diff_eq!(base[(e, k)], permuted[(e, k)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_person_matches_single_person() {
        let cfg = small_cfg();
        let params = init_full(&cfg, 3);
        let one = rand_aug(1, cfg.token_dim, 2);
        let mut four = Mat::zeros((4, cfg.token_dim + 2));
        for r in 0..4 {
            four.row_mut(r).assign(&one.row(0));
        }
        let run = |keys: Mat| {
            let mut ctx = NetCtx::new(&params);
            let q = group_queries_t(&mut ctx, &cfg);
            let kv = ctx.tape.leaf(keys);
            let u = detect_groups_t(&mut ctx, q, kv, DETECT_INITIAL, &cfg);
            ctx.tape.value(u).clone()
        };
        let a = run(one);
        let b = run(four);
        for e in 0..cfg.max_group_tokens {
            for k in 0..cfg.token_dim {
                assert_abs_diff_eq!(a[(e, k)], b[(e, k)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn swapping_group_tokens_swaps_detector_rows() {
        let cfg = small_cfg();
        let mut params = init_full(&cfg, 3);
        let aug = rand_aug(4, cfg.token_dim, 8);
        let run = |params: &ParamStore| {
            let mut ctx = NetCtx::new(params);
            let q = group_queries_t(&mut ctx, &cfg);
            let kv = ctx.tape.leaf(aug.clone());
            let u = detect_groups_t(&mut ctx, q, kv, DETECT_INITIAL, &cfg);
            ctx.tape.value(u).clone()
        };
        let base = run(&params);
        {
            let toks = params.get_mut("grp.tokens").unwrap();
            let r0 = toks.row(0).to_owned();
            let r1 = toks.row(1).to_owned();
            toks.row_mut(0).assign(&r1);
            toks.row_mut(1).assign(&r0);
        }
        let swapped = run(&params);
        for k in 0..cfg.token_dim {
            assert_abs_diff_eq!(base[(0, k)], swapped[(1, k)], epsilon = 1e-9);
            assert_abs_diff_eq!(base[(1, k)], swapped[(0, k)], epsilon = 1e-9);
        }
    }

    #[test]
    fn augmentation_appends_peak_coordinates() {
        let cfg = small_cfg();
        let params = init_full(&cfg, 3);
        let scene = generate_scene(&small_gen(), 0).unwrap();
        let n = scene.persons.len();
        let mut ctx = NetCtx::new(&params);
        let (tokens, _) = encode_persons_t(&mut ctx, &scene, &cfg).unwrap();
        let mut heat = Mat::from_elem((n, 64), 0.1);
        heat[(0, 5)] = 0.9; // row 0, col 5 of an 8x8 grid
        let aug = augment_person_tokens_t(&mut ctx, tokens, &heat, &cfg).unwrap();
        let av = ctx.tape.value(aug);
        assert_eq!(av.dim(), (n, cfg.token_dim + 2));
        assert_abs_diff_eq!(av[(0, cfg.token_dim)], 5.5 / 8.0);
        assert_abs_diff_eq!(av[(0, cfg.token_dim + 1)], 0.5 / 8.0);

        let bad = Mat::from_elem((n + 1, 64), 0.1);
        assert!(augment_person_tokens_t(&mut ctx, tokens, &bad, &cfg).is_err());
    }

    #[test]
    fn membership_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let params = init_full(&cfg, 13);
        let aug = rand_aug(4, cfg.token_dim, 21);
        fn loss(params: &ParamStore, cfg: &ModelConfig, aug: &Mat) -> (f64, GradStore) {
            let mut ctx = NetCtx::new(params);
            let q = group_queries_t(&mut ctx, cfg);
            let kv = ctx.tape.leaf(aug.clone());
            let u = detect_groups_t(&mut ctx, q, kv, DETECT_INITIAL, cfg);
            let m = compute_membership_t(&mut ctx, u, kv, MEMBERSHIP_INITIAL);
            let sq = ctx.tape.mul(m, m);
            let out = ctx.tape.mean_all(sq);
            let value = ctx.tape.value(out)[(0, 0)];
            let mut grads = GradStore::zeros_like(params);
            ctx.accumulate_grads(out, &mut grads);
            (value, grads)
        }
        let (_, grads) = loss(&params, &cfg, &aug);
        let step = 1e-5;
        for name in ["memb0.g.w", "memb0.f.w", "grp.tokens", "det0.l0.attn.wq0"] {
            let pi = params.idx(name).unwrap();
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[(0, 0)] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[(0, 0)] -= step;
            let fd = (loss(&plus, &cfg, &aug).0 - loss(&minus, &cfg, &aug).0) / (2.0 * step);
            let analytic = grads.get(pi)[(0, 0)];
            assert!(
                (analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()).max(1e-3),
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
