//! Multi-view episode matchers.
//!
//! Three matchers turn encoded clip views into per-class distances for an
//! N-way episode:
//!
//! * instance matching — frame-by-frame cosine distances warped through a
//!   monotone alignment (dynamic time warping), averaged along the best path;
//! * category matching — bidirectional attention reconstruction against the
//!   stacked support prototype, scored by reconstruction error;
//! * task matching — symmetric chamfer distance between frame sets, so
//!   alignment-free evidence still contributes.
//!
//! Each matcher exists once, as a tape builder, so training and plain
//! evaluation cannot drift apart; the value-level functions here wrap a
//! throwaway tape.

use crate::encoding::EncodedViews;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Matrix, Scalar};

/// Pairwise frame distances between two clips, `t_a` rows by `t_b` columns.
pub type DistanceMatrix<F> = Matrix<F>;

/// Projection weights for category matching, each `d x d_k`. The same three
/// projections serve both reconstruction directions.
#[derive(Clone)]
pub struct CmParams<F> {
    pub w_q: Matrix<F>,
    pub w_k: Matrix<F>,
    pub w_v: Matrix<F>,
}

/// Frame-embedding rows with norm below this are rejected: their cosine
/// direction is undefined.
const ZERO_NORM_EPS: f64 = 1e-12;

pub(crate) fn cosine_matrix_checked<F: Scalar>(
    a: &Matrix<F>,
    b: &Matrix<F>,
) -> Result<Matrix<F>> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "cosine distance needs equal widths, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let eps = F::lit(ZERO_NORM_EPS);
    let row_norms = |m: &Matrix<F>| -> Result<Vec<F>> {
        (0..m.rows())
            .map(|r| {
                let n = norm(m.row(r));
                if n < eps {
                    Err(Error::ZeroNormFrame(r))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for x in 0..a.rows() {
        for y in 0..b.rows() {
            out[(x, y)] = F::one() - dot(a.row(x), b.row(y)) / (na[x] * nb[y]);
        }
    }
    Ok(out)
}

/// Pairwise cosine distance `1 - cos(a_x, b_y)` between frame rows.
/// Entries land in `[0, 2]` up to rounding.
pub fn cosine_distance_matrix<F: Scalar>(
    a: &Matrix<F>,
    b: &Matrix<F>,
) -> Result<DistanceMatrix<F>> {
    cosine_matrix_checked(a, b)
}

/// Minimum-cost monotone alignment through a distance matrix.
///
/// Standard warping recurrence: a path starts at `(0, 0)`, ends at the
/// bottom-right cell, and moves by diagonal, vertical, or horizontal steps.
/// Returns the accumulated cost and one optimal path, recovered by a
/// backtrace that breaks ties in favour of diagonal, then vertical
/// (`x-1, y`), then horizontal steps. Cells are `(row, col)` pairs in
/// ascending path order.
pub fn dtw_min_cost<F: Scalar>(m: &DistanceMatrix<F>) -> (F, Vec<(usize, usize)>) {
    let (ta, tb) = m.shape();
    assert!(ta > 0 && tb > 0, "empty distance matrix");
    let mut dp = Matrix::<F>::zeros(ta, tb);
    for x in 0..ta {
        for y in 0..tb {
            let prev = if x == 0 && y == 0 {
                F::zero()
            } else if x == 0 {
                dp[(0, y - 1)]
            } else if y == 0 {
                dp[(x - 1, 0)]
            } else {
                dp[(x - 1, y - 1)].min(dp[(x - 1, y)]).min(dp[(x, y - 1)])
            };
            dp[(x, y)] = m[(x, y)] + prev;
        }
    }

    let (mut x, mut y) = (ta - 1, tb - 1);
    let mut path = vec![(x, y)];
    while x > 0 || y > 0 {
        if x == 0 {
            y -= 1;
        } else if y == 0 {
            x -= 1;
        } else {
            let diag = dp[(x - 1, y - 1)];
            let vert = dp[(x - 1, y)];
            let horiz = dp[(x, y - 1)];
            if diag <= vert && diag <= horiz {
                x -= 1;
                y -= 1;
            } else if vert <= horiz {
                x -= 1;
            } else {
                y -= 1;
            }
        }
        path.push((x, y));
    }
    path.reverse();
    (dp[(ta - 1, tb - 1)], path)
}

/// Alignment-aware distance between two clips: mean cosine distance along
/// one optimal warping path.
pub fn instance_distance<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> Result<F> {
    let m = cosine_matrix_checked(a, b)?;
    let (_, path) = dtw_min_cost(&m);
    let mut acc = F::zero();
    for &(x, y) in &path {
        acc = acc + m[(x, y)];
    }
    Ok(acc / F::from_usize(path.len()).unwrap())
}

pub(crate) fn chamfer_with_argmins<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> (F, Vec<usize>) {
    assert_eq!(a.cols(), b.cols(), "chamfer widths");
    assert!(a.rows() > 0 && b.rows() > 0, "chamfer on empty set");
    let mut total = F::zero();
    let mut argmins = Vec::with_capacity(a.rows());
    for x in 0..a.rows() {
        let mut best = F::infinity();
        let mut best_y = 0;
        for y in 0..b.rows() {
            let mut sq = F::zero();
            for (&u, &v) in a.row(x).iter().zip(b.row(y)) {
                let d = u - v;
                sq = sq + d * d;
            }
            let n = sq.sqrt();
            if n < best {
                best = n;
                best_y = y;
            }
        }
        total = total + best;
        argmins.push(best_y);
    }
    (total / F::from_usize(a.rows()).unwrap(), argmins)
}

/// Directed chamfer distance: mean over rows of `a` of the euclidean
/// distance to the nearest row of `b`. Ties keep the lowest index.
pub fn chamfer_directed<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>) -> F {
    chamfer_with_argmins(a, b).0
}

// ---------------------------------------------------------------------------
// Tape-level branch builders. The query view sits at index n*k; support
// views are class-major: class c, shot j lives at index c*k + j.
// ---------------------------------------------------------------------------

pub(crate) struct CmVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Attention reconstruction of `target` rows from `source` rows. Returns the
/// reconstruction and the value-projected target it is scored against.
pub(crate) fn cm_reconstruct_tape<F: Scalar>(
    t: &mut Tape<F>,
    cm: &CmVars,
    target: Var,
    source: Var,
) -> (Var, Var) {
    let d_k = t.value(cm.w_q).cols();
    let tq = t.matmul(target, cm.w_q);
    let sk = t.matmul(source, cm.w_k);
    let skt = t.transpose(sk);
    let logits = t.matmul(tq, skt);
    let scaled = t.scale(logits, F::one() / F::from_usize(d_k).unwrap().sqrt());
    let attn = t.softmax_rows(scaled);
    let sv = t.matmul(source, cm.w_v);
    let recon = t.matmul(attn, sv);
    let tv = t.matmul(target, cm.w_v);
    (recon, tv)
}

pub(crate) fn instance_branch_tape<F: Scalar>(
    t: &mut Tape<F>,
    instance_views: &[Var],
    n_way: usize,
    k_shot: usize,
) -> Result<Var> {
    let query = instance_views[n_way * k_shot];
    let inv_k = F::one() / F::from_usize(k_shot).unwrap();
    let mut per_class = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let mut acc: Option<Var> = None;
        for j in 0..k_shot {
            let cos = t.cosine_matrix(query, instance_views[c * k_shot + j])?;
            let (_, path) = dtw_min_cost(t.value(cos));
            let d = t.path_mean(cos, path);
            acc = Some(match acc {
                Some(a) => t.add(a, d),
                None => d,
            });
        }
        per_class.push(t.scale(acc.unwrap(), inv_k));
    }
    Ok(t.concat_cols(&per_class))
}

pub(crate) fn category_branch_tape<F: Scalar>(
    t: &mut Tape<F>,
    cm: &CmVars,
    category_views: &[Var],
    n_way: usize,
    k_shot: usize,
) -> Var {
    let query = category_views[n_way * k_shot];
    let mut per_class = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let shots: Vec<Var> = (0..k_shot).map(|j| category_views[c * k_shot + j]).collect();
        let proto = t.concat_rows(&shots);
        let (recon_q, qv) = cm_reconstruct_tape(t, cm, query, proto);
        let d_qs = t.row_dist_sum(qv, recon_q);
        let (recon_s, pv) = cm_reconstruct_tape(t, cm, proto, query);
        let d_sq = t.row_dist_sum(pv, recon_s);
        per_class.push(t.add(d_qs, d_sq));
    }
    t.concat_cols(&per_class)
}

pub(crate) fn task_branch_tape<F: Scalar>(
    t: &mut Tape<F>,
    task_views: &[Var],
    n_way: usize,
    k_shot: usize,
) -> Var {
    let query = task_views[n_way * k_shot];
    let inv_k = F::one() / F::from_usize(k_shot).unwrap();
    let mut per_class = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let mut acc: Option<Var> = None;
        for j in 0..k_shot {
            let s = task_views[c * k_shot + j];
            let fwd = t.chamfer_directed(query, s);
            let bwd = t.chamfer_directed(s, query);
            let both = t.add(fwd, bwd);
            acc = Some(match acc {
                Some(a) => t.add(a, both),
                None => both,
            });
        }
        per_class.push(t.scale(acc.unwrap(), inv_k));
    }
    t.concat_cols(&per_class)
}

// ---------------------------------------------------------------------------
// Value-level wrappers over the tape builders.
// ---------------------------------------------------------------------------

fn check_views<F: Scalar>(views: &[Matrix<F>], episode: &Episode) -> Result<(usize, usize)> {
    let n = episode.n_way();
    let k = episode.k_shot();
    if views.len() != n * k + 1 {
        return Err(Error::EpisodeSizeMismatch { expected: n * k + 1, found: views.len() });
    }
    Ok((n, k))
}

fn leaves<F: Scalar>(t: &mut Tape<F>, views: &[Matrix<F>]) -> Vec<Var> {
    views.iter().map(|v| t.leaf(v.clone())).collect()
}

/// Per-class instance-matching distances for an episode, query against each
/// class's supports.
pub fn instance_matching<F: Scalar>(
    views: &EncodedViews<F>,
    episode: &Episode,
) -> Result<Vec<F>> {
    let (n, k) = check_views(&views.instance_view, episode)?;
    let mut t = Tape::new();
    let vars = leaves(&mut t, &views.instance_view);
    let d = instance_branch_tape(&mut t, &vars, n, k)?;
    Ok(t.value(d).row(0).to_vec())
}

/// Per-class category-matching distances (bidirectional reconstruction error).
pub fn category_matching<F: Scalar>(
    cm: &CmParams<F>,
    views: &EncodedViews<F>,
    episode: &Episode,
) -> Result<Vec<F>> {
    let (n, k) = check_views(&views.category_view, episode)?;
    let d_feat = views.category_view[0].cols();
    if cm.w_q.rows() != d_feat {
        return Err(Error::ShapeMismatch(format!(
            "category projections expect width {}, views have {}",
            cm.w_q.rows(),
            d_feat
        )));
    }
    let mut t = Tape::new();
    let vars = leaves(&mut t, &views.category_view);
    let cm_vars = CmVars {
        w_q: t.leaf(cm.w_q.clone()),
        w_k: t.leaf(cm.w_k.clone()),
        w_v: t.leaf(cm.w_v.clone()),
    };
    let d = category_branch_tape(&mut t, &cm_vars, &vars, n, k);
    Ok(t.value(d).row(0).to_vec())
}

/// Per-class task-matching distances (symmetric chamfer over frame sets).
pub fn task_matching<F: Scalar>(views: &EncodedViews<F>, episode: &Episode) -> Result<Vec<F>> {
    let (n, k) = check_views(&views.task_view, episode)?;
    let mut t = Tape::new();
    let vars = leaves(&mut t, &views.task_view);
    let d = task_branch_tape(&mut t, &vars, n, k);
    Ok(t.value(d).row(0).to_vec())
}

/// Attention reconstruction of `target` from `source` under the category
/// projections. Exposed mainly for inspection and tests.
pub fn cm_reconstruct<F: Scalar>(
    cm: &CmParams<F>,
    target: &Matrix<F>,
    source: &Matrix<F>,
) -> Result<Matrix<F>> {
    if target.cols() != cm.w_q.rows() || source.cols() != cm.w_q.rows() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction expects width {}, got target {} / source {}",
            cm.w_q.rows(),
            target.cols(),
            source.cols()
        )));
    }
    let mut t = Tape::new();
    let cm_vars = CmVars {
        w_q: t.leaf(cm.w_q.clone()),
        w_k: t.leaf(cm.w_k.clone()),
        w_v: t.leaf(cm.w_v.clone()),
    };
    let target_v = t.leaf(target.clone());
    let source_v = t.leaf(source.clone());
    let (recon, _) = cm_reconstruct_tape(&mut t, &cm_vars, target_v, source_v);
    Ok(t.value(recon).clone())
}
