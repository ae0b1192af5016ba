//! Multi-view context encoders.
//!
//! Raw clips come in as per-position patch features. A linear stem projects
//! them to the model width, adaptive average pooling shrinks each frame to a
//! fixed `n x n` patch grid, and then three residual encoders build
//! progressively wider views of the same episode:
//!
//! * intra-frame (IFCE): self-attention plus an MLP over the patches of one
//!   frame, so each patch sees the rest of its frame;
//! * intra-video (IVCE): token- and channel-mixing MLPs across the frames of
//!   one clip, so each frame sees its temporal context;
//! * intra-episode (IECE): the same mixing scheme across clip summaries, with
//!   the result folded back into every frame through a learned 1x1
//!   projection, so each clip sees the whole episode. No positional
//!   embedding here — episode members have no meaningful order.
//!
//! Every encoder is residual, and all weights at zero reduce each one to the
//! identity map; the matchers can therefore be exercised with encoders
//! "switched off" without touching any other code path.

use crate::episode::{Episode, VideoClip};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Scalar};
use crate::training::ModelParams;

/// Linear patch-feature projection applied before everything else.
#[derive(Clone)]
pub struct StemParams<F> {
    /// `c x d` projection.
    pub w: Matrix<F>,
    /// `1 x d` bias.
    pub b: Matrix<F>,
}

/// Intra-frame encoder: patch self-attention (scaled by a learnable gate)
/// followed by a three-layer MLP, both residual.
#[derive(Clone)]
pub struct IfceParams<F> {
    /// `n^2 x d` spatial positional embedding added to the patch grid.
    pub p_spatial: Matrix<F>,
    /// `d x d` attention projections.
    pub w_q: Matrix<F>,
    pub w_k: Matrix<F>,
    pub w_v: Matrix<F>,
    /// Learnable scalar on the attention branch (1x1, initialized to one).
    pub alpha: Matrix<F>,
    /// MLP: `d -> d_mlp -> d_mlp -> d`, ReLU between layers.
    pub mlp_w1: Matrix<F>,
    pub mlp_b1: Matrix<F>,
    pub mlp_w2: Matrix<F>,
    pub mlp_b2: Matrix<F>,
    pub mlp_w3: Matrix<F>,
    pub mlp_b3: Matrix<F>,
}

/// Intra-video encoder: token perception across frames, then channel
/// perception across features, both residual MLPs.
#[derive(Clone)]
pub struct IvceParams<F> {
    /// `t x d` temporal positional embedding.
    pub p_temporal: Matrix<F>,
    /// `t x t` token-mixing weights.
    pub w_t1: Matrix<F>,
    pub w_t2: Matrix<F>,
    /// `d x d` channel-mixing weights.
    pub w_c1: Matrix<F>,
    pub w_c2: Matrix<F>,
}

/// Intra-episode encoder: the mixing scheme applied across clip summaries,
/// plus a 1x1 projection merging the episode context back into each frame.
#[derive(Clone)]
pub struct IeceParams<F> {
    /// `l x l` video-token mixing weights, `l` = clips per forward pass.
    pub w_v1: Matrix<F>,
    pub w_v2: Matrix<F>,
    /// `d x d` channel-mixing weights.
    pub w_e1: Matrix<F>,
    pub w_e2: Matrix<F>,
    /// `2d x d` projection of [frame, episode context] back to width d.
    pub w_ctx: Matrix<F>,
    /// `1 x d` projection bias.
    pub b_ctx: Matrix<F>,
}

/// Which encoders run; a disabled encoder is the identity map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderToggles {
    pub ifce: bool,
    pub ivce: bool,
    pub iece: bool,
}

impl EncoderToggles {
    pub fn all() -> Self {
        EncoderToggles { ifce: true, ivce: true, iece: true }
    }
}

/// The three per-clip views an episode encoder produces. Each list holds
/// `N*K` support entries (class-major) followed by the query, every entry a
/// `t x d` matrix.
pub struct EncodedViews<F> {
    pub instance_view: Vec<Matrix<F>>,
    pub category_view: Vec<Matrix<F>>,
    pub task_view: Vec<Matrix<F>>,
}

// ---------------------------------------------------------------------------
// Adaptive pooling
// ---------------------------------------------------------------------------

/// Averaging matrix that shrinks an `h x w` position grid to `n x n` patches
/// (`n^2` rows by `h*w` columns). Patch `(i, j)` covers input rows
/// `[floor(i*h/n), floor((i+1)*h/n))` and the analogous columns, so uneven
/// bins differ by at most one row or column.
pub fn adaptive_pool_matrix<F: Scalar>(h: usize, w: usize, n: usize) -> Result<Matrix<F>> {
    if n == 0 || n > h.min(w) {
        return Err(Error::BadGrid { n, h, w });
    }
    let mut pool = Matrix::zeros(n * n, h * w);
    for i in 0..n {
        let r0 = i * h / n;
        let r1 = (i + 1) * h / n;
        for j in 0..n {
            let c0 = j * w / n;
            let c1 = (j + 1) * w / n;
            let inv = F::one() / F::from_usize((r1 - r0) * (c1 - c0)).unwrap();
            for r in r0..r1 {
                for c in c0..c1 {
                    pool[(i * n + j, r * w + c)] = inv;
                }
            }
        }
    }
    Ok(pool)
}

/// Mean-pools per-position features `(h*w) x d` down to `n^2 x d`.
pub fn adaptive_pool_spatial<F: Scalar>(
    features: &Matrix<F>,
    h: usize,
    w: usize,
    n: usize,
) -> Result<Matrix<F>> {
    if features.rows() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "pooling expects {}x{}={} rows, got {}",
            h,
            w,
            h * w,
            features.rows()
        )));
    }
    Ok(adaptive_pool_matrix::<F>(h, w, n)?.matmul(features))
}

// ---------------------------------------------------------------------------
// Tape builders — the single implementation of each encoder.
// ---------------------------------------------------------------------------

pub(crate) struct StemVars {
    pub w: Var,
    pub b: Var,
}

pub(crate) struct IfceVars {
    pub p_spatial: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub alpha: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub mlp_w3: Var,
    pub mlp_b3: Var,
}

pub(crate) struct IvceVars {
    pub p_temporal: Var,
    pub w_t1: Var,
    pub w_t2: Var,
    pub w_c1: Var,
    pub w_c2: Var,
}

pub(crate) struct IeceVars {
    pub w_v1: Var,
    pub w_v2: Var,
    pub w_e1: Var,
    pub w_e2: Var,
    pub w_ctx: Var,
    pub b_ctx: Var,
}

pub(crate) fn stem_tape<F: Scalar>(t: &mut Tape<F>, stem: &StemVars, frame: Var) -> Var {
    let proj = t.matmul(frame, stem.w);
    t.add_row_bias(proj, stem.b)
}

pub(crate) fn ifce_tape<F: Scalar>(t: &mut Tape<F>, p: &IfceVars, patches: Var) -> Var {
    let d = t.value(p.w_q).rows();
    let z = t.add(patches, p.p_spatial);
    let q = t.matmul(z, p.w_q);
    let k = t.matmul(z, p.w_k);
    let v = t.matmul(z, p.w_v);
    let kt = t.transpose(k);
    let logits = t.matmul(q, kt);
    let scaled = t.scale(logits, F::one() / F::from_usize(d).unwrap().sqrt());
    let attn = t.softmax_rows(scaled);
    let mixed = t.matmul(attn, v);
    let gated = t.mul_scalar(p.alpha, mixed);
    let z_hat = t.add(gated, z);

    let h1 = t.matmul(z_hat, p.mlp_w1);
    let h1 = t.add_row_bias(h1, p.mlp_b1);
    let h1 = t.relu(h1);
    let h2 = t.matmul(h1, p.mlp_w2);
    let h2 = t.add_row_bias(h2, p.mlp_b2);
    let h2 = t.relu(h2);
    let out = t.matmul(h2, p.mlp_w3);
    let out = t.add_row_bias(out, p.mlp_b3);
    t.add(out, z_hat)
}

pub(crate) fn ivce_tape<F: Scalar>(t: &mut Tape<F>, p: &IvceVars, video: Var) -> Var {
    let v = t.add(video, p.p_temporal);
    let vt = t.transpose(v);
    let h = t.matmul(vt, p.w_t1);
    let h = t.relu(h);
    let mixed = t.matmul(h, p.w_t2);
    let v_hat = t.add(mixed, vt); // d x t

    let vh = t.transpose(v_hat); // t x d
    let h2 = t.matmul(vh, p.w_c1);
    let h2 = t.relu(h2);
    let mixed2 = t.matmul(h2, p.w_c2);
    t.add(mixed2, vh)
}

pub(crate) fn iece_tape<F: Scalar>(
    t: &mut Tape<F>,
    p: &IeceVars,
    clip_frames: &[Var],
) -> Vec<Var> {
    let frames_per_clip = t.value(clip_frames[0]).rows();

    // Clip summaries: temporal mean of each clip, stacked to l x d.
    let means: Vec<Var> = clip_frames.iter().map(|&f| t.mean_rows(f)).collect();
    let e = t.concat_rows(&means);

    // Video-token mixing (no positional embedding), then channel mixing.
    let et = t.transpose(e); // d x l
    let h = t.matmul(et, p.w_v1);
    let h = t.relu(h);
    let mixed = t.matmul(h, p.w_v2);
    let a_hat = t.add(mixed, et);
    let at = t.transpose(a_hat); // l x d
    let h2 = t.matmul(at, p.w_e1);
    let h2 = t.relu(h2);
    let mixed2 = t.matmul(h2, p.w_e2);
    let g = t.add(mixed2, at); // l x d episode context

    // Fold each clip's context row back into its frames via the 1x1
    // projection over [frame, context], residual on the frame.
    clip_frames
        .iter()
        .enumerate()
        .map(|(i, &frames)| {
            let gi = t.slice_rows(g, i, 1);
            let gb = t.broadcast_row(gi, frames_per_clip);
            let cat = t.concat_cols(&[frames, gb]);
            let proj = t.matmul(cat, p.w_ctx);
            let proj = t.add_row_bias(proj, p.b_ctx);
            t.add(proj, frames)
        })
        .collect()
}

/// Stem + pool + intra-frame encoder + spatial squeeze for one clip,
/// producing its `t x d` instance view.
pub(crate) fn encode_clip_tape<F: Scalar>(
    t: &mut Tape<F>,
    stem: &StemVars,
    ifce: Option<&IfceVars>,
    pool: Var,
    clip: &VideoClip,
) -> Var {
    let mut frame_rows = Vec::with_capacity(clip.t);
    for tau in 0..clip.t {
        let raw = t.leaf(clip.frame::<F>(tau));
        let stemmed = stem_tape(t, stem, raw);
        let pooled = t.matmul(pool, stemmed);
        let enriched = match ifce {
            Some(p) => ifce_tape(t, p, pooled),
            None => pooled,
        };
        frame_rows.push(t.mean_rows(enriched));
    }
    t.concat_rows(&frame_rows)
}

pub(crate) struct ViewVars {
    pub instance: Vec<Var>,
    pub category: Vec<Var>,
    pub task: Vec<Var>,
}

pub(crate) struct EncoderVars {
    pub stem: StemVars,
    pub ifce: IfceVars,
    pub ivce: IvceVars,
    pub iece: IeceVars,
}

/// Encodes all support clips plus one query into the three views.
pub(crate) fn encode_episode_tape<F: Scalar>(
    t: &mut Tape<F>,
    vars: &EncoderVars,
    episode: &Episode,
    query_index: usize,
    toggles: EncoderToggles,
) -> Result<ViewVars> {
    let clip = &episode.support[0];
    let pool_rows = t.value(vars.ifce.p_spatial).rows();
    let n = (pool_rows as f64).sqrt().round() as usize;
    let pool = t.leaf(adaptive_pool_matrix::<F>(clip.h, clip.w, n)?);

    let clips: Vec<&VideoClip> = episode
        .support
        .iter()
        .chain(std::iter::once(&episode.query[query_index]))
        .collect();

    let instance: Vec<Var> = clips
        .iter()
        .map(|c| {
            encode_clip_tape(t, &vars.stem, toggles.ifce.then_some(&vars.ifce), pool, c)
        })
        .collect();

    let category: Vec<Var> = if toggles.ivce {
        instance.iter().map(|&v| ivce_tape(t, &vars.ivce, v)).collect()
    } else {
        instance.clone()
    };

    let task: Vec<Var> = if toggles.iece {
        iece_tape(t, &vars.iece, &instance)
    } else {
        instance.clone()
    };

    Ok(ViewVars { instance, category, task })
}

// ---------------------------------------------------------------------------
// Value-level wrappers.
// ---------------------------------------------------------------------------

fn one_shot_tape<F: Scalar, T>(
    build: impl FnOnce(&mut Tape<F>) -> Result<T>,
) -> Result<(Tape<F>, T)> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok((tape, out))
}

/// Projects every frame of a clip with the stem: `t` matrices of `(h*w) x d`.
pub fn stem_forward<F: Scalar>(
    stem: &StemParams<F>,
    clip: &VideoClip,
) -> Result<Vec<Matrix<F>>> {
    if clip.c != stem.w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "stem expects {} channels, clip has {}",
            stem.w.rows(),
            clip.c
        )));
    }
    clip.validate()?;
    let (tape, vars) = one_shot_tape(|t| {
        let sv = StemVars { w: t.leaf(stem.w.clone()), b: t.leaf(stem.b.clone()) };
        Ok((0..clip.t)
            .map(|tau| {
                let raw = t.leaf(clip.frame::<F>(tau));
                stem_tape(t, &sv, raw)
            })
            .collect::<Vec<_>>())
    })?;
    Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Intra-frame encoder over one pooled frame (`n^2 x d`).
pub fn ifce_forward<F: Scalar>(p: &IfceParams<F>, patches: &Matrix<F>) -> Result<Matrix<F>> {
    if patches.shape() != p.p_spatial.shape() {
        return Err(Error::ShapeMismatch(format!(
            "frame encoder built for {:?}, got {:?}",
            p.p_spatial.shape(),
            patches.shape()
        )));
    }
    let (tape, out) = one_shot_tape(|t| {
        let vars = ifce_leaves(t, p);
        let x = t.leaf(patches.clone());
        Ok(ifce_tape(t, &vars, x))
    })?;
    Ok(tape.value(out).clone())
}

/// Mean over patches, per frame: `t` matrices of `n^2 x d` become `t x d`.
pub fn spatial_squeeze<F: Scalar>(frames: &[Matrix<F>]) -> Matrix<F> {
    assert!(!frames.is_empty(), "squeeze of empty clip");
    let mut out = Matrix::zeros(frames.len(), frames[0].cols());
    for (r, f) in frames.iter().enumerate() {
        out.row_mut(r).copy_from_slice(f.mean_rows().row(0));
    }
    out
}

/// Intra-video encoder over one clip's frame embeddings (`t x d`).
pub fn ivce_forward<F: Scalar>(p: &IvceParams<F>, video: &Matrix<F>) -> Result<Matrix<F>> {
    if video.shape() != p.p_temporal.shape() {
        return Err(Error::ShapeMismatch(format!(
            "video encoder built for {:?}, got {:?}",
            p.p_temporal.shape(),
            video.shape()
        )));
    }
    let (tape, out) = one_shot_tape(|t| {
        let vars = ivce_leaves(t, p);
        let x = t.leaf(video.clone());
        Ok(ivce_tape(t, &vars, x))
    })?;
    Ok(tape.value(out).clone())
}

/// Intra-episode encoder over all clips of one forward pass
/// (`l` matrices of `t x d` in, the same shapes out).
pub fn iece_forward<F: Scalar>(
    p: &IeceParams<F>,
    episode_frames: &[Matrix<F>],
) -> Result<Vec<Matrix<F>>> {
    if episode_frames.len() != p.w_v1.rows() {
        return Err(Error::EpisodeSizeMismatch {
            expected: p.w_v1.rows(),
            found: episode_frames.len(),
        });
    }
    let shape = episode_frames[0].shape();
    if episode_frames.iter().any(|f| f.shape() != shape) {
        return Err(Error::ShapeMismatch("episode clips must share one shape".into()));
    }
    let (tape, outs) = one_shot_tape(|t| {
        let vars = iece_leaves(t, p);
        let xs: Vec<Var> = episode_frames.iter().map(|f| t.leaf(f.clone())).collect();
        Ok(iece_tape(t, &vars, &xs))
    })?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Full encoding of an episode for one query: instance, category, and task
/// views for all `N*K` supports plus the query (in that order).
pub fn encode_episode<F: Scalar>(
    params: &ModelParams<F>,
    episode: &Episode,
    query_index: usize,
) -> Result<EncodedViews<F>> {
    params.check_episode(episode)?;
    assert!(query_index < episode.query.len(), "query index in range");
    let (tape, views) = one_shot_tape(|t| {
        let vars = params.encoder_leaves(t);
        encode_episode_tape(t, &vars, episode, query_index, EncoderToggles::all())
    })?;
    let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
    Ok(EncodedViews {
        instance_view: grab(&views.instance),
        category_view: grab(&views.category),
        task_view: grab(&views.task),
    })
}

pub(crate) fn stem_leaves<F: Scalar>(t: &mut Tape<F>, p: &StemParams<F>) -> StemVars {
    StemVars { w: t.leaf(p.w.clone()), b: t.leaf(p.b.clone()) }
}

pub(crate) fn ifce_leaves<F: Scalar>(t: &mut Tape<F>, p: &IfceParams<F>) -> IfceVars {
    IfceVars {
        p_spatial: t.leaf(p.p_spatial.clone()),
        w_q: t.leaf(p.w_q.clone()),
        w_k: t.leaf(p.w_k.clone()),
        w_v: t.leaf(p.w_v.clone()),
        alpha: t.leaf(p.alpha.clone()),
        mlp_w1: t.leaf(p.mlp_w1.clone()),
        mlp_b1: t.leaf(p.mlp_b1.clone()),
        mlp_w2: t.leaf(p.mlp_w2.clone()),
        mlp_b2: t.leaf(p.mlp_b2.clone()),
        mlp_w3: t.leaf(p.mlp_w3.clone()),
        mlp_b3: t.leaf(p.mlp_b3.clone()),
    }
}

pub(crate) fn ivce_leaves<F: Scalar>(t: &mut Tape<F>, p: &IvceParams<F>) -> IvceVars {
    IvceVars {
        p_temporal: t.leaf(p.p_temporal.clone()),
        w_t1: t.leaf(p.w_t1.clone()),
        w_t2: t.leaf(p.w_t2.clone()),
        w_c1: t.leaf(p.w_c1.clone()),
        w_c2: t.leaf(p.w_c2.clone()),
    }
}

pub(crate) fn iece_leaves<F: Scalar>(t: &mut Tape<F>, p: &IeceParams<F>) -> IeceVars {
    IeceVars {
        w_v1: t.leaf(p.w_v1.clone()),
        w_v2: t.leaf(p.w_v2.clone()),
        w_e1: t.leaf(p.w_e1.clone()),
        w_e2: t.leaf(p.w_e2.clone()),
        w_ctx: t.leaf(p.w_ctx.clone()),
        b_ctx: t.leaf(p.b_ctx.clone()),
    }
}
