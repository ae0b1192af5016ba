//! Acceptance gate: the release-blocking checks in one test, one verdict
//! line per numbered criterion. Run with `--nocapture` to watch the lines
//! appear; on failure the panic message repeats every failing verdict.
//!
//! Criteria 4-6 train real models at the advertised operating point and
//! dominate the runtime (minutes, not seconds). They stay in the default
//! suite on purpose: a green run is the claim that the whole pipeline —
//! data synthesis, encoders, matchers, fusion, training loop — works, not
//! just that its pieces type-check against each other.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{dtw_exhaustive, rand_matrix, TEST_TAG};
use fewmatch::archive::{read_archive_bytes, write_archive_bytes, ARCHIVE_MAGIC};
use fewmatch::checkpoint::{read_checkpoint_bytes, write_checkpoint_bytes, CHECKPOINT_MAGIC};
use fewmatch::config::TrainConfig;
use fewmatch::encoding::{ifce_forward, iece_forward, ivce_forward};
use fewmatch::episode::Split;
use fewmatch::error::Error;
use fewmatch::fusion::fuse;
use fewmatch::matching::{
    chamfer_directed, cm_reconstruct, cosine_distance_matrix, dtw_min_cost, instance_distance,
};
use fewmatch::rng::{stream, tags};
use fewmatch::tensor::{softmax_rows, Matrix};
use fewmatch::training::{
    evaluate, grad_check, train, EpisodeSource, ModelDims, ModelParams,
};
use rand::Rng;

// ---------------------------------------------------------------------------
// Criterion 4/5/6 operating point. Every number here is load-bearing: the
// thresholds below were measured against exactly this configuration.
// ---------------------------------------------------------------------------

fn operating_point(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.n_way = 5;
    cfg.k_shot = 1;
    cfg.n_query = 1;
    cfg.frames = 8;
    cfg.patch_grid = 2;
    cfg.d = 32;
    cfg.d_k = 32;
    cfg.d_mlp = 64;
    cfg.learning_rate = 0.01;
    cfg.decay_factor = 0.5;
    cfg.decay_every = 2000;
    cfg.total_episodes = 5000;
    cfg.temperature = 0.05;
    cfg.seed = seed;
    cfg.checkpoint_every = 0;
    cfg.val_every = 0;
    cfg.val_episodes = 0;
    cfg.eval_episodes = 1000;
    cfg.classes_train = 12;
    cfg.classes_val = 3;
    cfg.classes_test = 5;
    cfg.subactions = 4;
    cfg.subactions_per_class = 3;
    cfg.channels = 16;
    cfg.frame_h = 8;
    cfg.frame_w = 8;
    cfg.clips_per_class = 24;
    cfg.noise_sigma = 0.1;
    cfg.warp_strength = 0.3;
    cfg
}

fn model_dims(cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        c: cfg.channels,
        d: cfg.d,
        d_k: cfg.d_k,
        d_mlp: cfg.d_mlp,
        t: cfg.frames,
        grid: cfg.patch_grid,
        l: cfg.clips_per_forward(),
    }
}

/// Leave only one matcher on; `with_encoder` additionally keeps its paired
/// encoder (frame for the alignment branch, video for reconstruction,
/// episode for chamfer).
fn solo_branch(cfg: &mut TrainConfig, branch: usize, with_encoder: bool) {
    cfg.enable_ifce = with_encoder && branch == 0;
    cfg.enable_ivce = with_encoder && branch == 1;
    cfg.enable_iece = with_encoder && branch == 2;
    cfg.enable_im = branch == 0;
    cfg.enable_cm = branch == 1;
    cfg.enable_tm = branch == 2;
}

fn train_and_eval(seed: u64, dir: &Path) -> (f64, [f64; 3]) {
    let cfg = operating_point(seed);
    let source = EpisodeSource::from_config(&cfg).expect("synthetic source");
    let out = dir.join(format!("seed{seed}.m3ck"));
    train(&cfg, &source, &out, |_| {}).expect("training run");
    let (params, _) = ModelParams::load(&out).expect("checkpoint readback");
    let test = source.dataset(Split::NovelTest).expect("test split");
    let rep = evaluate(&params, &cfg, test, 1000, tags::EVAL_TEST, None).expect("evaluation");
    let branches = rep.branch_accuracy.map(|b| b.expect("all branches enabled"));
    (rep.accuracy, branches)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

type Verdict = Result<String, String>;

/// Alignment cost equals brute-force enumeration of monotone paths.
fn dtw_oracle_equivalence() -> Verdict {
    let started = Instant::now();
    let mut rng = stream(2024, TEST_TAG, 1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let t = rng.random_range(1..=5);
        let m = rand_matrix(&mut rng, t, t, 0.0, 5.0);
        let (cost, _) = dtw_min_cost(&m);
        let expected = dtw_exhaustive(&m);
        let diff = (cost - expected).abs();
        if diff > worst {
            worst = diff;
        }
        if diff > 1e-9 {
            return Err(format!(
                "case {case}: dp cost {cost} vs enumerated {expected} (|diff| {diff:.3e})"
            ));
        }
    }
    let elapsed = started.elapsed();
    if elapsed > Duration::from_secs(5) {
        return Err(format!("took {:.2}s, budget 5s", elapsed.as_secs_f64()));
    }
    Ok(format!("200 matrices, worst |diff| {worst:.2e}, {:.2}s", elapsed.as_secs_f64()))
}

/// Reverse-mode gradients match central finite differences everywhere.
fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.d = 8;
    cfg.d_k = 4;
    cfg.d_mlp = 8;
    cfg.frames = 3;
    cfg.patch_grid = 2;
    cfg.n_way = 2;
    cfg.k_shot = 1;
    cfg.n_query = 1;
    cfg.frame_h = 4;
    cfg.frame_w = 4;
    cfg.channels = 3;
    cfg.temperature = 0.5;
    let report = grad_check(&cfg, 0, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    if !report.passed {
        return Err(format!(
            "max rel err {:.3e} in {} (tolerance 1e-4)",
            report.max_rel_err, report.worst
        ));
    }
    // A flat loss would pass vacuously; demand real gradient signal.
    if report.significant * 2 <= report.elements {
        return Err(format!(
            "only {}/{} elements carried gradient signal",
            report.significant, report.elements
        ));
    }
    if elapsed > Duration::from_secs(120) {
        return Err(format!("took {:.1}s, budget 120s", elapsed.as_secs_f64()));
    }
    Ok(format!(
        "{} elements, max rel err {:.2e} ({}), {:.1}s",
        report.elements,
        report.max_rel_err,
        report.worst,
        elapsed.as_secs_f64()
    ))
}

/// Structural invariants over >= 1000 random draws each.
fn invariant_suite() -> Verdict {
    let dims = ModelDims { c: 3, d: 6, d_k: 4, d_mlp: 5, t: 4, grid: 2, l: 5 };
    let mut init_rng = stream(0, TEST_TAG, 2);
    let mut zeroed = ModelParams::<f64>::init(&dims, &mut init_rng);
    zeroed.zero_encoders();
    let mut rng = stream(2024, TEST_TAG, 3);

    // Residual identities: zeroed encoders pass inputs through unchanged.
    for i in 0..1000 {
        let patches = rand_matrix(&mut rng, dims.grid * dims.grid, dims.d, -2.0, 2.0);
        let out = ifce_forward(&zeroed.ifce, &patches).map_err(|e| e.to_string())?;
        if out.data() != patches.data() {
            return Err(format!("draw {i}: frame encoder broke the residual path"));
        }
        let video = rand_matrix(&mut rng, dims.t, dims.d, -2.0, 2.0);
        let out = ivce_forward(&zeroed.ivce, &video).map_err(|e| e.to_string())?;
        if out.data() != video.data() {
            return Err(format!("draw {i}: video encoder broke the residual path"));
        }
        let clips: Vec<Matrix<f64>> =
            (0..dims.l).map(|_| rand_matrix(&mut rng, dims.t, dims.d, -2.0, 2.0)).collect();
        let outs = iece_forward(&zeroed.iece, &clips).map_err(|e| e.to_string())?;
        if outs.iter().zip(&clips).any(|(o, c)| o.data() != c.data()) {
            return Err(format!("draw {i}: episode encoder broke the residual path"));
        }
    }

    // Softmax rows are probability distributions (±1e-6).
    for i in 0..1000 {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(1..=6);
        let m = rand_matrix(&mut rng, rows, cols, -30.0, 30.0);
        let s = softmax_rows(&m);
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 || s.row(r).iter().any(|&p| p < 0.0) {
                return Err(format!("draw {i}: softmax row {r} sums to {sum}"));
            }
        }
    }

    // Cosine distances stay in [0, 2] up to rounding dust.
    for i in 0..1000 {
        let (ra, rb) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let cols = rng.random_range(2..=6);
        let a = rand_matrix(&mut rng, ra, cols, 0.1, 2.0);
        let b = rand_matrix(&mut rng, rb, cols, -2.0, -0.1);
        let m = cosine_distance_matrix(&a, &b).map_err(|e| e.to_string())?;
        if m.data().iter().any(|&v| !(-1e-12..=2.0 + 1e-12).contains(&v)) {
            return Err(format!("draw {i}: cosine distance left [0, 2]"));
        }
    }

    // Self-distance is zero for alignment and chamfer matching.
    for i in 0..1000 {
        let t = rng.random_range(1..=6);
        let a = rand_matrix(&mut rng, t, 5, 0.1, 2.0);
        let d = instance_distance(&a, &a).map_err(|e| e.to_string())?;
        if d.abs() > 1e-12 {
            return Err(format!("draw {i}: self alignment distance {d:.3e}"));
        }
        let ch = chamfer_directed(&a, &a);
        if ch != 0.0 {
            return Err(format!("draw {i}: self chamfer distance {ch:.3e}"));
        }
    }

    // Chamfer matching ignores frame order; reconstruction ignores the
    // order of prototype frames.
    for i in 0..1000 {
        let (ta, tb) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a = rand_matrix(&mut rng, ta, 5, 0.1, 2.0);
        let b = rand_matrix(&mut rng, tb, 5, 0.1, 2.0);
        let base = chamfer_directed(&a, &b) + chamfer_directed(&b, &a);
        let ap = permute_rows(&a, &mut rng);
        let perm = chamfer_directed(&ap, &b) + chamfer_directed(&b, &ap);
        if (base - perm).abs() > 1e-12 {
            return Err(format!("draw {i}: chamfer moved {:.3e} under frame shuffle",
                (base - perm).abs()));
        }

        let proto = rand_matrix(&mut rng, tb.max(2), 4, -1.0, 1.0);
        let target = rand_matrix(&mut rng, ta, 4, -1.0, 1.0);
        let cm = random_cm_params(&mut rng, 4, 3);
        let base = cm_reconstruct(&cm, &target, &proto).map_err(|e| e.to_string())?;
        let pp = permute_rows(&proto, &mut rng);
        let perm = cm_reconstruct(&cm, &target, &pp).map_err(|e| e.to_string())?;
        let drift = base
            .data()
            .iter()
            .zip(perm.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        if drift > 1e-9 {
            return Err(format!("draw {i}: reconstruction moved {drift:.3e} under prototype shuffle"));
        }
    }

    // Fusion: per-branch constant shifts cancel; relabeling classes permutes
    // the fused scores the same way.
    for i in 0..1000 {
        let n = rng.random_range(2..=6);
        let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(0.0..3.0)).collect()
        };
        let (d1, d2, d3) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let base = fuse(&d1, &d2, &d3, 0.7).map_err(|e| e.to_string())?;

        let shift = |v: &[f64], c: f64| -> Vec<f64> { v.iter().map(|x| x + c).collect() };
        let shifted = fuse(&shift(&d1, 1.3), &shift(&d2, -0.4), &shift(&d3, 2.9), 0.7)
            .map_err(|e| e.to_string())?;
        let drift = base
            .y
            .iter()
            .zip(&shifted.y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if drift > 1e-9 {
            return Err(format!("draw {i}: fused scores moved {drift:.3e} under constant shifts"));
        }

        // order[j] names the old class placed at slot j.
        let order = {
            let mut o: Vec<usize> = (0..n).collect();
            for j in (1..n).rev() {
                o.swap(j, rng.random_range(0..=j));
            }
            o
        };
        let apply = |v: &[f64]| -> Vec<f64> { order.iter().map(|&j| v[j]).collect() };
        let perm = fuse(&apply(&d1), &apply(&d2), &apply(&d3), 0.7).map_err(|e| e.to_string())?;
        for (slot, &old) in order.iter().enumerate() {
            if (perm.y[slot] - base.y[old]).abs() > 1e-12 {
                return Err(format!("draw {i}: fused scores did not follow the relabeling"));
            }
        }
        if order[perm.predicted_class] != base.predicted_class {
            // Ties may legitimately resolve either way; only flag clear ones.
            let mut sorted = base.y.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 1e-9 {
                return Err(format!("draw {i}: prediction did not follow the relabeling"));
            }
        }
    }

    Ok("6 invariant families, 1000 draws each".into())
}

fn permute_rows<R: Rng>(m: &Matrix<f64>, rng: &mut R) -> Matrix<f64> {
    let mut idx: Vec<usize> = (0..m.rows()).collect();
    for j in (1..idx.len()).rev() {
        idx.swap(j, rng.random_range(0..=j));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (r, &src) in idx.iter().enumerate() {
        for c in 0..m.cols() {
            out[(r, c)] = m[(src, c)];
        }
    }
    out
}

fn random_cm_params<R: Rng>(
    rng: &mut R,
    d: usize,
    d_k: usize,
) -> fewmatch::matching::CmParams<f64> {
    fewmatch::matching::CmParams {
        w_q: rand_matrix(rng, d, d_k, -0.5, 0.5),
        w_k: rand_matrix(rng, d, d_k, -0.5, 0.5),
        w_v: rand_matrix(rng, d, d, -0.5, 0.5),
    }
}

/// Criterion 4: the operating point reaches 0.90 fused accuracy on one core.
fn synthetic_learnability(dir: &Path) -> (Verdict, (f64, [f64; 3])) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let started = Instant::now();
    let result = pool.install(|| train_and_eval(0, dir));
    let elapsed = started.elapsed();
    let (fused, _) = result;
    let verdict = if fused < 0.90 {
        Err(format!("fused accuracy {fused:.4} < 0.90"))
    } else if elapsed > Duration::from_secs(900) {
        Err(format!("took {:.0}s on one core, budget 900s", elapsed.as_secs_f64()))
    } else {
        Ok(format!(
            "fused accuracy {fused:.4} after 5000 episodes, {:.0}s on one core",
            elapsed.as_secs_f64()
        ))
    };
    (verdict, result)
}

/// Criterion 5: fusion keeps up with the best branch across seeds.
fn fusion_benefit(runs: &[(f64, [f64; 3])]) -> Verdict {
    let n = runs.len() as f64;
    let mean_fused = runs.iter().map(|(f, _)| f).sum::<f64>() / n;
    let mut detail = String::new();
    for (i, (fused, branches)) in runs.iter().enumerate() {
        detail.push_str(&format!(
            "s{i} {fused:.4}/[{:.4} {:.4} {:.4}] ",
            branches[0], branches[1], branches[2]
        ));
    }
    for b in 0..3 {
        let mean_branch = runs.iter().map(|(_, br)| br[b]).sum::<f64>() / n;
        if mean_fused < mean_branch - 0.02 {
            return Err(format!(
                "mean fused {mean_fused:.4} trails branch {b} mean {mean_branch:.4} by more than 0.02; {detail}"
            ));
        }
    }
    let wins = runs
        .iter()
        .filter(|(fused, br)| *fused >= br.iter().cloned().fold(f64::MIN, f64::max))
        .count();
    if wins < 2 {
        return Err(format!("fused >= best branch on {wins}/3 seeds, need 2; {detail}"));
    }
    Ok(format!("mean fused {mean_fused:.4}, best-branch wins {wins}/3; {detail}"))
}

/// Criterion 6: raw matcher floors sit above chance, and pairing each
/// matcher with its encoder buys a real improvement.
fn ablation_structure(floors: &[f64; 3], trained: &[f64; 3]) -> Verdict {
    const NAMES: [&str; 3] = ["alignment", "reconstruction", "chamfer"];
    let mut detail = String::new();
    for b in 0..3 {
        detail.push_str(&format!("{} {:.4}->{:.4} ", NAMES[b], floors[b], trained[b]));
        if floors[b] < 0.30 {
            return Err(format!(
                "{} floor {:.4} below 0.30 on the noiseless bank; {detail}",
                NAMES[b], floors[b]
            ));
        }
        if trained[b] - floors[b] < 0.05 {
            return Err(format!(
                "{} trained solo {:.4} improves floor {:.4} by less than 0.05; {detail}",
                NAMES[b], trained[b], floors[b]
            ));
        }
    }
    Ok(detail.trim_end().to_string())
}

fn branch_floor(branch: usize) -> f64 {
    let mut cfg = operating_point(0);
    cfg.noise_sigma = 0.0;
    let source = EpisodeSource::from_config(&cfg).expect("synthetic source");
    let test = source.dataset(Split::NovelTest).expect("test split");
    let mut init_rng = stream(cfg.seed, tags::INIT, 0);
    let mut params = ModelParams::<f32>::init(&model_dims(&cfg), &mut init_rng);
    params.zero_encoders();
    solo_branch(&mut cfg, branch, false);
    evaluate(&params, &cfg, test, 1000, tags::EVAL_TEST, None)
        .expect("floor evaluation")
        .accuracy
}

fn branch_trained_solo(branch: usize, dir: &Path) -> f64 {
    let mut cfg = operating_point(0);
    cfg.noise_sigma = 0.0;
    cfg.total_episodes = 2000;
    solo_branch(&mut cfg, branch, true);
    let source = EpisodeSource::from_config(&cfg).expect("synthetic source");
    let out = dir.join(format!("solo{branch}.m3ck"));
    train(&cfg, &source, &out, |_| {}).expect("solo training");
    let (params, _) = ModelParams::load(&out).expect("checkpoint readback");
    let test = source.dataset(Split::NovelTest).expect("test split");
    evaluate(&params, &cfg, test, 1000, tags::EVAL_TEST, None)
        .expect("solo evaluation")
        .accuracy
}

/// Criterion 7: reruns are bit-identical, round-trips are bit-exact, and
/// corrupted headers fail with the documented errors.
fn determinism_and_formats(dir: &Path) -> Verdict {
    let mut cfg = TrainConfig::default();
    cfg.n_way = 2;
    cfg.k_shot = 1;
    cfg.n_query = 1;
    cfg.frames = 3;
    cfg.patch_grid = 2;
    cfg.d = 8;
    cfg.d_k = 4;
    cfg.d_mlp = 8;
    cfg.learning_rate = 0.01;
    cfg.total_episodes = 40;
    cfg.temperature = 0.5;
    cfg.seed = 99;
    cfg.checkpoint_every = 0;
    cfg.val_every = 0;
    cfg.val_episodes = 0;
    cfg.classes_train = 4;
    cfg.classes_val = 2;
    cfg.classes_test = 2;
    cfg.subactions = 3;
    cfg.subactions_per_class = 2;
    cfg.channels = 3;
    cfg.frame_h = 4;
    cfg.frame_w = 4;
    cfg.clips_per_class = 6;
    cfg.noise_sigma = 0.05;
    cfg.warp_strength = 0.2;

    let source = EpisodeSource::from_config(&cfg).map_err(|e| e.to_string())?;
    let first = dir.join("retrain-a.m3ck");
    let second = dir.join("retrain-b.m3ck");
    train(&cfg, &source, &first, |_| {}).map_err(|e| e.to_string())?;
    train(&cfg, &source, &second, |_| {}).map_err(|e| e.to_string())?;
    let bytes_a = std::fs::read(&first).map_err(|e| e.to_string())?;
    let bytes_b = std::fs::read(&second).map_err(|e| e.to_string())?;
    if bytes_a != bytes_b {
        return Err("retraining with the same config produced different checkpoints".into());
    }

    // Checkpoint round-trip: parse and re-serialize without losing a bit.
    let tensors = read_checkpoint_bytes(&bytes_a).map_err(|e| e.to_string())?;
    let rewritten = write_checkpoint_bytes(&tensors).map_err(|e| e.to_string())?;
    if rewritten != bytes_a {
        return Err("checkpoint round-trip changed the byte stream".into());
    }

    // Archive round-trip over real rendered clips.
    let clips = source.dataset(Split::Base).map_err(|e| e.to_string())?.clips().to_vec();
    let archive = write_archive_bytes(&clips).map_err(|e| e.to_string())?;
    let back = read_archive_bytes(&archive).map_err(|e| e.to_string())?;
    let same = back.len() == clips.len()
        && back.iter().zip(&clips).all(|(x, y)| {
            x.class_id == y.class_id
                && x.clip_id == y.clip_id
                && x.data.len() == y.data.len()
                && x.data.iter().zip(&y.data).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    if !same {
        return Err("archive round-trip changed clip contents".into());
    }
    let rewritten = write_archive_bytes(&back).map_err(|e| e.to_string())?;
    if rewritten != archive {
        return Err("archive round-trip changed the byte stream".into());
    }

    // Corrupted headers: wrong magic, unknown version, truncation.
    let mut bad = archive.clone();
    bad[..4].copy_from_slice(b"NOPE");
    match read_archive_bytes(&bad) {
        Err(Error::BadMagic { expected, found }) => {
            if expected != ARCHIVE_MAGIC || &found != b"NOPE" {
                return Err("archive magic error carried the wrong bytes".into());
            }
        }
        other => return Err(format!("bad archive magic not rejected: {other:?}")),
    }
    let mut bad = archive.clone();
    bad[4..8].copy_from_slice(&99u32.to_le_bytes());
    match read_archive_bytes(&bad) {
        Err(Error::UnsupportedVersion(99)) => {}
        other => return Err(format!("future archive version not rejected: {other:?}")),
    }
    match read_archive_bytes(&archive[..6]) {
        Err(Error::TruncatedRecord(_)) => {}
        other => return Err(format!("truncated archive header not rejected: {other:?}")),
    }

    let mut bad = bytes_a.clone();
    bad[..4].copy_from_slice(b"XXXX");
    match read_checkpoint_bytes(&bad) {
        Err(Error::BadMagic { expected, found }) => {
            if expected != CHECKPOINT_MAGIC || &found != b"XXXX" {
                return Err("checkpoint magic error carried the wrong bytes".into());
            }
        }
        other => return Err(format!("bad checkpoint magic not rejected: {other:?}")),
    }
    let mut bad = bytes_a.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    match read_checkpoint_bytes(&bad) {
        Err(Error::UnsupportedVersion(7)) => {}
        other => return Err(format!("future checkpoint version not rejected: {other:?}")),
    }
    match read_checkpoint_bytes(&bytes_a[..5]) {
        Err(Error::TruncatedRecord(_)) => {}
        other => return Err(format!("truncated checkpoint header not rejected: {other:?}")),
    }

    Ok(format!(
        "retrain identical ({} bytes), round-trips exact, 6 corruptions rejected",
        bytes_a.len()
    ))
}

// ---------------------------------------------------------------------------
// The gate
// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().expect("scratch dir");
    let scratch: &Path = dir.path();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, verdict: Verdict| match verdict {
        Ok(detail) => lines.push(format!("ACCEPTANCE {n} {name}: PASS ({detail})")),
        Err(why) => {
            lines.push(format!("ACCEPTANCE {n} {name}: FAIL ({why})"));
            failed.push(n);
        }
    };

    record(1, "dtw-oracle-equivalence", dtw_oracle_equivalence());
    record(2, "gradient-correctness", gradient_correctness());
    record(3, "invariant-suite", invariant_suite());

    // Criterion 4 runs alone on a pinned single-thread pool so its timing
    // means what it claims. The remaining training runs are independent
    // single-threaded jobs; spread them over threads to keep the suite quick.
    let (verdict4, run0) = synthetic_learnability(scratch);
    record(4, "synthetic-learnability", verdict4);

    let (run1, run2, floors_and_solos) = std::thread::scope(|scope| {
        let h1 = scope.spawn(move || train_and_eval(1, scratch));
        let h2 = scope.spawn(move || train_and_eval(2, scratch));
        let h6: Vec<_> = (0..3)
            .map(|b| scope.spawn(move || (branch_floor(b), branch_trained_solo(b, scratch))))
            .collect();
        (
            h1.join().expect("seed 1 run"),
            h2.join().expect("seed 2 run"),
            h6.into_iter()
                .map(|h| h.join().expect("ablation run"))
                .collect::<Vec<(f64, f64)>>(),
        )
    });
    record(5, "fusion-benefit", fusion_benefit(&[run0, run1, run2]));

    let floors = [floors_and_solos[0].0, floors_and_solos[1].0, floors_and_solos[2].0];
    let solos = [floors_and_solos[0].1, floors_and_solos[1].1, floors_and_solos[2].1];
    record(6, "ablation-structure", ablation_structure(&floors, &solos));

    record(7, "determinism-and-formats", determinism_and_formats(scratch));

    for line in &lines {
        println!("{line}");
    }
    assert!(
        failed.is_empty(),
        "acceptance criteria failed: {failed:?}\n{}",
        lines.join("\n")
    );
}
