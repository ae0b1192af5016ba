//! Fixtures shared by the integration suites: independently written oracles
//! (no calls into the code paths they check) and small random builders.
#![allow(dead_code)]

use fewmatch::episode::{Episode, VideoClip};
use fewmatch::tensor::Matrix;
use rand::Rng;

/// Stream tag for test-local draws, distinct from the library's purpose tags.
pub const TEST_TAG: u64 = 0x7E57;

/// Exhaustive minimum alignment cost: walks every monotone path through the
/// matrix (diagonal, down, and right steps from the top-left to the
/// bottom-right cell) and keeps the cheapest total. Exponential in the matrix
/// size, so callers keep it small; for 5x5 that is 8989 paths.
pub fn dtw_exhaustive(m: &Matrix<f64>) -> f64 {
    fn walk(m: &Matrix<f64>, x: usize, y: usize) -> f64 {
        let here = m[(x, y)];
        if x + 1 == m.rows() && y + 1 == m.cols() {
            return here;
        }
        let mut best = f64::INFINITY;
        if x + 1 < m.rows() && y + 1 < m.cols() {
            best = best.min(walk(m, x + 1, y + 1));
        }
        if x + 1 < m.rows() {
            best = best.min(walk(m, x + 1, y));
        }
        if y + 1 < m.cols() {
            best = best.min(walk(m, x, y + 1));
        }
        here + best
    }
    assert!(m.rows() > 0 && m.cols() > 0, "oracle needs a nonempty matrix");
    walk(m, 0, 0)
}

/// Plain softmax, written directly from the definition. No max-shift, so
/// only suitable for moderate inputs.
pub fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = xs.iter().map(|&x| x.exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Attention reconstruction spelled out with index loops: project target
/// rows to queries and source rows to keys/values, softmax the scaled
/// query-key scores per target row, and average the values. Mirrors what the
/// category matcher computes, without sharing any of its code.
pub fn naive_attention_reconstruct(
    w_q: &Matrix<f64>,
    w_k: &Matrix<f64>,
    w_v: &Matrix<f64>,
    target: &Matrix<f64>,
    source: &Matrix<f64>,
) -> Matrix<f64> {
    let d = w_q.rows();
    let d_k = w_q.cols();
    assert_eq!(target.cols(), d);
    assert_eq!(source.cols(), d);

    let project = |m: &Matrix<f64>, w: &Matrix<f64>| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|r| {
                (0..w.cols())
                    .map(|j| (0..d).map(|i| m[(r, i)] * w[(i, j)]).sum())
                    .collect()
            })
            .collect()
    };
    let q = project(target, w_q);
    let k = project(source, w_k);
    let v = project(source, w_v);

    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = Matrix::zeros(target.rows(), d_k);
    for x in 0..target.rows() {
        let scores: Vec<f64> = (0..source.rows())
            .map(|y| scale * (0..d_k).map(|j| q[x][j] * k[y][j]).sum::<f64>())
            .collect();
        let alpha = naive_softmax(&scores);
        for (y, &a) in alpha.iter().enumerate() {
            for j in 0..d_k {
                out[(x, j)] += a * v[y][j];
            }
        }
    }
    out
}

/// Uniform random matrix with entries in `[lo, hi)`.
pub fn rand_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Same, in the parameter precision.
pub fn rand_matrix_f32<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    lo: f32,
    hi: f32,
) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Clip filled with uniform pixels in `[0.1, 1.0)`; bounded away from zero
/// so no frame can come out with a near-zero embedding norm.
pub fn rand_clip<R: Rng>(
    rng: &mut R,
    class_id: u32,
    clip_id: u32,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> VideoClip {
    let data = (0..t * h * w * c).map(|_| rng.random_range(0.1..1.0f32)).collect();
    VideoClip { class_id, clip_id, t, h, w, c, data }
}

/// N-way K-shot episode over random clips, one query per episode,
/// labelled with class index `label`.
pub fn rand_episode<R: Rng>(
    rng: &mut R,
    n: usize,
    k: usize,
    label: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Episode {
    let class_ids: Vec<u32> = (0..n as u32).collect();
    let mut support = Vec::with_capacity(n * k);
    let mut next_id = 0;
    for &cid in &class_ids {
        for _ in 0..k {
            support.push(rand_clip(rng, cid, next_id, t, h, w, c));
            next_id += 1;
        }
    }
    let query = vec![rand_clip(rng, class_ids[label], u32::MAX, t, h, w, c)];
    Episode::from_parts(support, query, class_ids, vec![label]).expect("valid fixture episode")
}
