//! Synthetic clip bank: procedurally generated few-shot video data.
//!
//! A class is an ordered sequence of shared subactions plus a pacing profile
//! (relative duration weights for the segments), so two classes can contain
//! exactly the same poses and differ only in order — or only in timing. Every
//! fourth class comes with a twin: same subaction order, different pacing.
//! That keeps duration a first-class cue rather than an accident of warping:
//! order-sensitive matching alone cannot separate a twin pair, while anything
//! that tracks where in the clip a pose happens can. A clip renders its
//! class's subaction sequence into feature frames: a clip-specific static
//! background everywhere, the active subaction's prototype added inside a
//! contiguous spatial block, Gaussian noise on top.
//!
//! Prototypes are deliberately *not* orthogonal: they share a common
//! component, which keeps per-frame evidence weak. The background is drawn
//! fresh per clip and held constant over its frames and pixels, which is the
//! other source of difficulty: raw frame comparisons see mostly background,
//! while an encoder with temporal or episodic context can learn to cancel a
//! component that never changes within a clip. The constants below set that
//! difficulty and were chosen so an untrained model is clearly above chance
//! on clean data while trained encoders still have room to improve.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::episode::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How far each prototype strays from the shared component: prototypes are
/// `normalize(shared + PROTO_SPREAD * own)`. Smaller means more confusable.
const PROTO_SPREAD: f64 = 1.25;

/// Norm of the static background vector drawn per clip and added to every
/// spatial position. Comparable to the block signal, so clips of one class
/// look different until something learns to ignore the static component.
const BG_SIGMA: f64 = 0.10;

/// Side of the active block as a fraction of the frame side.
const BLOCK_FRAC: f64 = 0.5;

/// Every `TWIN_STRIDE`-th class is paired with its successor: same subaction
/// order, different pacing profile.
const TWIN_STRIDE: usize = 4;

/// Relative weight of the emphasized segment in a boosted pacing profile
/// (all other segments keep weight 1). Large enough that two profiles
/// boosting different segments stay separable under full timing jitter.
const PACE_BOOST: u32 = 3;

/// Procedural data source: everything needed to render clips of any class.
pub struct SyntheticBank {
    /// Unit-norm subaction prototypes, one row per subaction (`P x c`).
    pub subaction_protos: Matrix<f64>,
    /// Per class, the ordered subaction indices it performs (`n_classes x m`).
    /// Twin classes repeat an ordering; the pair differs in `class_paces`.
    pub class_defs: Vec<Vec<usize>>,
    /// Per class, relative duration weights for its segments (`n_classes x m`).
    pub class_paces: Vec<Vec<u32>>,
    /// Per-entry Gaussian noise level used at render time.
    pub noise_sigma: f64,
    /// Timing jitter in `[0, 1]`: each clip scales its class's duration
    /// weights by independent `1 + warp * U(-1, 1)` factors before rounding,
    /// so 0 renders the nominal schedule every time.
    pub warp_strength: f64,
}

impl SyntheticBank {
    pub fn n_classes(&self) -> usize {
        self.class_defs.len()
    }

    pub fn n_subactions(&self) -> usize {
        self.subaction_protos.rows()
    }

    /// Subactions per class.
    pub fn class_len(&self) -> usize {
        self.class_defs[0].len()
    }

    pub fn channels(&self) -> usize {
        self.subaction_protos.cols()
    }
}

fn unit_vector<R: Rng>(c: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds a bank: prototypes, distinct ordered subaction tuples drawn
/// uniformly from the `P^m` possibilities, and a pacing profile per class.
/// Classes at indices `4i` and `4i + 1` are twins sharing a tuple (when `m`
/// allows pacing to differ, i.e. `m >= 2`); all other classes get their own.
pub fn generate_synthetic_bank<R: Rng>(
    n_classes: usize,
    n_subactions: usize,
    m: usize,
    c: usize,
    noise_sigma: f64,
    warp_strength: f64,
    rng: &mut R,
) -> Result<SyntheticBank> {
    if n_classes == 0 || n_subactions < 2 || m == 0 || c == 0 {
        return Err(Error::Config(format!(
            "bank needs n_classes >= 1, n_subactions >= 2, m >= 1, c >= 1 \
             (got {n_classes}, {n_subactions}, {m}, {c})"
        )));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    if !(0.0..=1.0).contains(&warp_strength) {
        return Err(Error::Config(format!(
            "warp_strength must be in [0, 1], got {warp_strength}"
        )));
    }

    // Twins share a tuple, so the number of distinct orderings needed is the
    // class count minus the number of twin pairs.
    let twin_lead = |i: usize| m >= 2 && i % TWIN_STRIDE == 0 && i + 1 < n_classes;
    let n_pairs = (0..n_classes).filter(|&i| twin_lead(i)).count();
    let tuples_needed = n_classes - n_pairs;

    let available = (n_subactions as u128)
        .checked_pow(m as u32)
        .unwrap_or(u128::MAX);
    if available < tuples_needed as u128 {
        return Err(Error::TooFewDistinctOrderings { available, requested: tuples_needed });
    }

    // Shared component plus a per-prototype direction, renormalized: the
    // prototypes are similar on purpose (see module docs).
    let shared = unit_vector(c, rng);
    let mut protos = Matrix::zeros(n_subactions, c);
    for p in 0..n_subactions {
        let own = unit_vector(c, rng);
        let mixed: Vec<f64> =
            shared.iter().zip(&own).map(|(&s, &o)| s + PROTO_SPREAD * o).collect();
        let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (k, x) in mixed.into_iter().enumerate() {
            protos[(p, k)] = x / n;
        }
    }

    // Distinct ordered tuples. Small spaces get an exact shuffle; huge ones
    // rejection-sample, which stays cheap because tuples_needed << available.
    let decode = |code: u128| -> Vec<usize> {
        let mut digits = vec![0usize; m];
        let mut rest = code;
        for d in (0..m).rev() {
            digits[d] = (rest % n_subactions as u128) as usize;
            rest /= n_subactions as u128;
        }
        digits
    };
    let tuples: Vec<Vec<usize>> = if available <= 1 << 22 {
        let mut codes: Vec<u128> = (0..available).collect();
        use rand::seq::SliceRandom;
        codes.shuffle(rng);
        codes.into_iter().take(tuples_needed).map(decode).collect()
    } else {
        let mut seen = std::collections::BTreeSet::new();
        let mut defs = Vec::with_capacity(tuples_needed);
        while defs.len() < tuples_needed {
            let code = (0..m).fold(0u128, |acc, _| {
                acc * n_subactions as u128 + rng.random_range(0..n_subactions) as u128
            });
            if seen.insert(code) {
                defs.push(decode(code));
            }
        }
        defs
    };

    // Pacing profiles: weight 1 everywhere, or PACE_BOOST on one segment.
    // Twins get two different boost positions so their nominal schedules are
    // guaranteed to disagree; standalone classes draw any profile.
    let boosted = |pos: usize| -> Vec<u32> {
        let mut w = vec![1u32; m];
        w[pos] = PACE_BOOST;
        w
    };
    let mut class_defs = Vec::with_capacity(n_classes);
    let mut class_paces = Vec::with_capacity(n_classes);
    let mut next_tuple = tuples.into_iter();
    let mut i = 0;
    while i < n_classes {
        let tuple = next_tuple.next().expect("tuple budget covers all classes");
        if twin_lead(i) {
            let a = rng.random_range(0..m);
            let b = loop {
                let b = rng.random_range(0..m);
                if b != a {
                    break b;
                }
            };
            class_defs.push(tuple.clone());
            class_paces.push(boosted(a));
            class_defs.push(tuple);
            class_paces.push(boosted(b));
            i += 2;
        } else {
            // Profile 0 is uniform, profile p+1 boosts segment p.
            let profile = rng.random_range(0..=m);
            class_defs.push(tuple);
            class_paces.push(if profile == 0 { vec![1; m] } else { boosted(profile - 1) });
            i += 1;
        }
    }

    Ok(SyntheticBank { subaction_protos: protos, class_defs, class_paces, noise_sigma, warp_strength })
}

/// Splits `t` frames across ordered segments with the given relative duration
/// weights, rounded by largest remainder. `warp = 0` renders the nominal
/// schedule; otherwise each weight is scaled by an independent
/// `1 + warp * U(-1, 1)` factor first, so clips of one class agree in order
/// and rough pacing but not in exact timing. Every segment gets at least one
/// frame.
pub fn segment_lengths<R: Rng>(
    weights: &[u32],
    t: usize,
    warp: f64,
    rng: &mut R,
) -> Vec<usize> {
    let m = weights.len();
    assert!(m >= 1 && t >= m, "need t >= m segments");
    assert!(weights.iter().all(|&w| w >= 1), "weights must be positive");
    let jittered: Vec<f64> = if warp <= 1e-12 {
        weights.iter().map(|&w| w as f64).collect()
    } else {
        weights
            .iter()
            .map(|&w| w as f64 * (1.0 + warp * rng.random_range(-1.0..1.0)))
            .collect()
    };
    let total: f64 = jittered.iter().sum();
    let fracs: Vec<f64> = jittered.into_iter().map(|x| x / total).collect();

    let mut lens: Vec<usize> = fracs.iter().map(|f| (f * t as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let fa = fracs[a] * t as f64 - lens[a] as f64;
        let fb = fracs[b] * t as f64 - lens[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = lens.iter().sum();
    let mut cursor = 0;
    while assigned < t {
        lens[order[cursor % m]] += 1;
        cursor += 1;
        assigned += 1;
    }

    // Lift zero-length segments by taking frames from the longest one.
    while let Some(zero) = lens.iter().position(|&l| l == 0) {
        let donor = (0..m).max_by_key(|&i| (lens[i], std::cmp::Reverse(i))).unwrap();
        debug_assert!(lens[donor] >= 2);
        lens[donor] -= 1;
        lens[zero] += 1;
    }
    lens
}

/// Renders one clip of the given class: draw its static background, schedule
/// the segments from the class's pacing profile, place each subaction's
/// block, lay down background + prototype + noise.
pub fn render_synthetic_video<R: Rng>(
    bank: &SyntheticBank,
    class_id: u32,
    t: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<VideoClip> {
    let def = bank
        .class_defs
        .get(class_id as usize)
        .ok_or(Error::UnknownClass(class_id))?;
    let m = def.len();
    if t < m {
        return Err(Error::Config(format!(
            "clip length {t} cannot fit {m} ordered segments"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("frame must be non-empty, got {h}x{w}")));
    }
    let c = bank.channels();

    let background: Vec<f64> =
        unit_vector(c, rng).into_iter().map(|x| x * BG_SIGMA).collect();
    let lens =
        segment_lengths(&bank.class_paces[class_id as usize], t, bank.warp_strength, rng);
    let bh = ((h as f64 * BLOCK_FRAC).round() as usize).clamp(1, h);
    let bw = ((w as f64 * BLOCK_FRAC).round() as usize).clamp(1, w);
    let blocks: Vec<(usize, usize)> = (0..m)
        .map(|_| (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw)))
        .collect();

    let mut data = Vec::with_capacity(t * h * w * c);
    let mut seg = 0;
    let mut into_seg = 0;
    for _tau in 0..t {
        if into_seg == lens[seg] {
            seg += 1;
            into_seg = 0;
        }
        let proto = seg_row(bank, def[seg]);
        let (r0, c0) = blocks[seg];
        for r in 0..h {
            for col in 0..w {
                let active = r >= r0 && r < r0 + bh && col >= c0 && col < c0 + bw;
                for ch in 0..c {
                    let mut v = background[ch];
                    if active {
                        v += proto[ch];
                    }
                    if bank.noise_sigma > 0.0 {
                        v += bank.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                    data.push(v as f32);
                }
            }
        }
        into_seg += 1;
    }

    Ok(VideoClip {
        class_id,
        // The caller (pool builder or archive writer) assigns stable ids.
        clip_id: 0,
        t,
        h,
        w,
        c,
        data,
    })
}

fn seg_row<'a>(bank: &'a SyntheticBank, proto: usize) -> &'a [f64] {
    bank.subaction_protos.row(proto)
}
