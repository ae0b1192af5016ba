//! Model parameters, episodic SGD training, evaluation, and the gradient
//! checker.
//!
//! The parameter set is small enough (27 named tensors) to manage by hand:
//! one canonical order drives initialization, checkpoint layout, gradient
//! packing, and the SGD update, so every consumer agrees on which tensor is
//! which. Training is plain SGD over episodes. Each episode contributes the
//! mean gradient of its per-query losses; queries within an episode are
//! evaluated in parallel but reduced in index order, which keeps runs
//! bit-for-bit reproducible for a given config and seed.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::archive::load_feature_archive;
use crate::checkpoint::{self, RawTensor};
use crate::config::{Source, TrainConfig};
use crate::encoding::{
    self, encode_episode_tape, EncoderToggles, EncoderVars, IeceParams, IfceParams, IvceParams,
    StemParams,
};
use crate::episode::{sample_episode, Dataset, Episode, EpisodeSpec, Split, VideoClip};
use crate::error::{Error, Result};
use crate::fusion::distances_to_probs;
use crate::matching::{
    category_branch_tape, instance_branch_tape, task_branch_tape, CmParams, CmVars,
};
use crate::rng::{self, tags};
use crate::synth::{generate_synthetic_bank, render_synthetic_video};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Scalar};

/// Model dimensions implied by a config plus the data it runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Input feature channels per spatial position.
    pub c: usize,
    /// Model width.
    pub d: usize,
    /// Attention width of the category matcher.
    pub d_k: usize,
    /// Hidden width of the intra-frame MLP.
    pub d_mlp: usize,
    /// Frames per clip.
    pub t: usize,
    /// Patch grid side after pooling.
    pub grid: usize,
    /// Clips per forward pass: all supports plus one query.
    pub l: usize,
}

/// All learnable tensors.
#[derive(Clone)]
pub struct ModelParams<F> {
    pub stem: StemParams<F>,
    pub ifce: IfceParams<F>,
    pub ivce: IvceParams<F>,
    pub iece: IeceParams<F>,
    pub cm: CmParams<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    /// Uniform in ±1/sqrt(fan_in), fan_in = rows.
    Weight,
    /// Zeros.
    Bias,
    /// Gaussian with standard deviation 0.02 (positional embeddings).
    Pos,
    /// The scalar attention gate, initialized to one.
    AlphaOne,
}

pub(crate) struct TensorSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
}

/// Canonical tensor table. Everything that enumerates parameters — init,
/// checkpoints, gradient packing, SGD — walks this order.
pub(crate) fn tensor_specs(d: &ModelDims) -> Vec<TensorSpec> {
    use ParamKind::*;
    let s = |name, kind, rows, cols| TensorSpec { name, kind, rows, cols };
    vec![
        s("stem.W_stem", Weight, d.c, d.d),
        s("stem.b_stem", Bias, 1, d.d),
        s("ifce.W_Q", Weight, d.d, d.d),
        s("ifce.W_K", Weight, d.d, d.d),
        s("ifce.W_V", Weight, d.d, d.d),
        s("ifce.alpha", AlphaOne, 1, 1),
        s("ifce.P_spatial", Pos, d.grid * d.grid, d.d),
        s("ifce.mlp.W1", Weight, d.d, d.d_mlp),
        s("ifce.mlp.b1", Bias, 1, d.d_mlp),
        s("ifce.mlp.W2", Weight, d.d_mlp, d.d_mlp),
        s("ifce.mlp.b2", Bias, 1, d.d_mlp),
        s("ifce.mlp.W3", Weight, d.d_mlp, d.d),
        s("ifce.mlp.b3", Bias, 1, d.d),
        s("ivce.W_t1", Weight, d.t, d.t),
        s("ivce.W_t2", Weight, d.t, d.t),
        s("ivce.W_c1", Weight, d.d, d.d),
        s("ivce.W_c2", Weight, d.d, d.d),
        s("ivce.P_temporal", Pos, d.t, d.d),
        s("iece.W_v1", Weight, d.l, d.l),
        s("iece.W_v2", Weight, d.l, d.l),
        s("iece.W_e1", Weight, d.d, d.d),
        s("iece.W_e2", Weight, d.d, d.d),
        s("iece.W_ctx", Weight, 2 * d.d, d.d),
        s("iece.b_ctx", Bias, 1, d.d),
        s("cm.W_Q", Weight, d.d, d.d_k),
        s("cm.W_K", Weight, d.d, d.d_k),
        s("cm.W_V", Weight, d.d, d.d_k),
    ]
}

/// Visits fields in the same canonical order as [`tensor_specs`].
macro_rules! each_param_field {
    ($self_:ident, $f:ident) => {
        $f!($self_.stem.w);
        $f!($self_.stem.b);
        $f!($self_.ifce.w_q);
        $f!($self_.ifce.w_k);
        $f!($self_.ifce.w_v);
        $f!($self_.ifce.alpha);
        $f!($self_.ifce.p_spatial);
        $f!($self_.ifce.mlp_w1);
        $f!($self_.ifce.mlp_b1);
        $f!($self_.ifce.mlp_w2);
        $f!($self_.ifce.mlp_b2);
        $f!($self_.ifce.mlp_w3);
        $f!($self_.ifce.mlp_b3);
        $f!($self_.ivce.w_t1);
        $f!($self_.ivce.w_t2);
        $f!($self_.ivce.w_c1);
        $f!($self_.ivce.w_c2);
        $f!($self_.ivce.p_temporal);
        $f!($self_.iece.w_v1);
        $f!($self_.iece.w_v2);
        $f!($self_.iece.w_e1);
        $f!($self_.iece.w_e2);
        $f!($self_.iece.w_ctx);
        $f!($self_.iece.b_ctx);
        $f!($self_.cm.w_q);
        $f!($self_.cm.w_k);
        $f!($self_.cm.w_v);
    };
}

impl<F: Scalar> ModelParams<F> {
    pub const PARAM_COUNT: usize = 27;

    fn zeros(d: &ModelDims) -> Self {
        ModelParams {
            stem: StemParams { w: Matrix::zeros(d.c, d.d), b: Matrix::zeros(1, d.d) },
            ifce: IfceParams {
                p_spatial: Matrix::zeros(d.grid * d.grid, d.d),
                w_q: Matrix::zeros(d.d, d.d),
                w_k: Matrix::zeros(d.d, d.d),
                w_v: Matrix::zeros(d.d, d.d),
                alpha: Matrix::zeros(1, 1),
                mlp_w1: Matrix::zeros(d.d, d.d_mlp),
                mlp_b1: Matrix::zeros(1, d.d_mlp),
                mlp_w2: Matrix::zeros(d.d_mlp, d.d_mlp),
                mlp_b2: Matrix::zeros(1, d.d_mlp),
                mlp_w3: Matrix::zeros(d.d_mlp, d.d),
                mlp_b3: Matrix::zeros(1, d.d),
            },
            ivce: IvceParams {
                p_temporal: Matrix::zeros(d.t, d.d),
                w_t1: Matrix::zeros(d.t, d.t),
                w_t2: Matrix::zeros(d.t, d.t),
                w_c1: Matrix::zeros(d.d, d.d),
                w_c2: Matrix::zeros(d.d, d.d),
            },
            iece: IeceParams {
                w_v1: Matrix::zeros(d.l, d.l),
                w_v2: Matrix::zeros(d.l, d.l),
                w_e1: Matrix::zeros(d.d, d.d),
                w_e2: Matrix::zeros(d.d, d.d),
                w_ctx: Matrix::zeros(2 * d.d, d.d),
                b_ctx: Matrix::zeros(1, d.d),
            },
            cm: CmParams {
                w_q: Matrix::zeros(d.d, d.d_k),
                w_k: Matrix::zeros(d.d, d.d_k),
                w_v: Matrix::zeros(d.d, d.d_k),
            },
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&Matrix<F>)) {
        macro_rules! go {
            ($e:expr) => {
                f(&$e)
            };
        }
        each_param_field!(self, go);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Matrix<F>)) {
        macro_rules! go {
            ($e:expr) => {
                f(&mut $e)
            };
        }
        each_param_field!(self, go);
    }

    /// Dimensions read back from the tensors themselves.
    pub fn dims(&self) -> ModelDims {
        let n2 = self.ifce.p_spatial.rows();
        let grid = (n2 as f64).sqrt().round() as usize;
        ModelDims {
            c: self.stem.w.rows(),
            d: self.stem.w.cols(),
            d_k: self.cm.w_q.cols(),
            d_mlp: self.ifce.mlp_w1.cols(),
            t: self.ivce.p_temporal.rows(),
            grid,
            l: self.iece.w_v1.rows(),
        }
    }

    /// Fresh parameters; the element draw order is fixed by the canonical
    /// tensor table, so one seed always yields the same model.
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> ModelParams<F> {
        let specs = tensor_specs(dims);
        let mut p = Self::zeros(dims);
        let mut i = 0;
        p.for_each_mut(|m| {
            let spec = &specs[i];
            i += 1;
            match spec.kind {
                ParamKind::Weight => {
                    let bound = 1.0 / (spec.rows as f64).sqrt();
                    for v in m.data_mut() {
                        *v = F::lit(rng.random_range(-bound..bound));
                    }
                }
                ParamKind::Pos => {
                    for v in m.data_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = F::lit(0.02 * z);
                    }
                }
                ParamKind::Bias => {}
                ParamKind::AlphaOne => *m = Matrix::scalar(F::one()),
            }
        });
        p
    }

    /// Zeros every encoder tensor, turning all three encoders into identity
    /// maps while leaving the stem and the category matcher untouched.
    pub fn zero_encoders(&mut self) {
        let z = |m: &mut Matrix<F>| *m = Matrix::zeros(m.rows(), m.cols());
        z(&mut self.ifce.p_spatial);
        z(&mut self.ifce.w_q);
        z(&mut self.ifce.w_k);
        z(&mut self.ifce.w_v);
        z(&mut self.ifce.alpha);
        z(&mut self.ifce.mlp_w1);
        z(&mut self.ifce.mlp_b1);
        z(&mut self.ifce.mlp_w2);
        z(&mut self.ifce.mlp_b2);
        z(&mut self.ifce.mlp_w3);
        z(&mut self.ifce.mlp_b3);
        z(&mut self.ivce.p_temporal);
        z(&mut self.ivce.w_t1);
        z(&mut self.ivce.w_t2);
        z(&mut self.ivce.w_c1);
        z(&mut self.ivce.w_c2);
        z(&mut self.iece.w_v1);
        z(&mut self.iece.w_v2);
        z(&mut self.iece.w_e1);
        z(&mut self.iece.w_e2);
        z(&mut self.iece.w_ctx);
        z(&mut self.iece.b_ctx);
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            stem: StemParams { w: self.stem.w.cast(), b: self.stem.b.cast() },
            ifce: IfceParams {
                p_spatial: self.ifce.p_spatial.cast(),
                w_q: self.ifce.w_q.cast(),
                w_k: self.ifce.w_k.cast(),
                w_v: self.ifce.w_v.cast(),
                alpha: self.ifce.alpha.cast(),
                mlp_w1: self.ifce.mlp_w1.cast(),
                mlp_b1: self.ifce.mlp_b1.cast(),
                mlp_w2: self.ifce.mlp_w2.cast(),
                mlp_b2: self.ifce.mlp_b2.cast(),
                mlp_w3: self.ifce.mlp_w3.cast(),
                mlp_b3: self.ifce.mlp_b3.cast(),
            },
            ivce: IvceParams {
                p_temporal: self.ivce.p_temporal.cast(),
                w_t1: self.ivce.w_t1.cast(),
                w_t2: self.ivce.w_t2.cast(),
                w_c1: self.ivce.w_c1.cast(),
                w_c2: self.ivce.w_c2.cast(),
            },
            iece: IeceParams {
                w_v1: self.iece.w_v1.cast(),
                w_v2: self.iece.w_v2.cast(),
                w_e1: self.iece.w_e1.cast(),
                w_e2: self.iece.w_e2.cast(),
                w_ctx: self.iece.w_ctx.cast(),
                b_ctx: self.iece.b_ctx.cast(),
            },
            cm: CmParams {
                w_q: self.cm.w_q.cast(),
                w_k: self.cm.w_k.cast(),
                w_v: self.cm.w_v.cast(),
            },
        }
    }

    /// Checks that an episode is compatible with these parameters.
    pub fn check_episode(&self, episode: &Episode) -> Result<()> {
        let dims = self.dims();
        let clip = &episode.support[0];
        if clip.t != dims.t {
            return Err(Error::ShapeMismatch(format!(
                "model built for {} frames per clip, data has {}",
                dims.t, clip.t
            )));
        }
        if clip.c != dims.c {
            return Err(Error::ShapeMismatch(format!(
                "model built for {} channels, data has {}",
                dims.c, clip.c
            )));
        }
        if dims.grid > clip.h.min(clip.w) {
            return Err(Error::BadGrid { n: dims.grid, h: clip.h, w: clip.w });
        }
        if episode.clips_per_forward() != dims.l {
            return Err(Error::EpisodeSizeMismatch {
                expected: dims.l,
                found: episode.clips_per_forward(),
            });
        }
        Ok(())
    }

    pub(crate) fn encoder_leaves(&self, t: &mut Tape<F>) -> EncoderVars {
        EncoderVars {
            stem: encoding::stem_leaves(t, &self.stem),
            ifce: encoding::ifce_leaves(t, &self.ifce),
            ivce: encoding::ivce_leaves(t, &self.ivce),
            iece: encoding::iece_leaves(t, &self.iece),
        }
    }

    pub(crate) fn leaves(&self, t: &mut Tape<F>) -> ParamVars {
        let enc = self.encoder_leaves(t);
        let cm = CmVars {
            w_q: t.leaf(self.cm.w_q.clone()),
            w_k: t.leaf(self.cm.w_k.clone()),
            w_v: t.leaf(self.cm.w_v.clone()),
        };
        ParamVars { enc, cm }
    }
}

impl ModelParams<f32> {
    /// Flattens to named tensors in canonical order.
    pub fn to_raw_tensors(&self) -> Vec<RawTensor> {
        let specs = tensor_specs(&self.dims());
        let mut out = Vec::with_capacity(specs.len());
        let mut i = 0;
        self.for_each(|m| {
            let spec = &specs[i];
            i += 1;
            let dims = match spec.kind {
                ParamKind::AlphaOne => vec![],
                ParamKind::Bias => vec![m.cols() as u32],
                _ => vec![m.rows() as u32, m.cols() as u32],
            };
            out.push(RawTensor { name: spec.name.into(), dims, data: m.data().to_vec() });
        });
        out
    }

    /// Rebuilds parameters from named tensors, checking that exactly the
    /// canonical set is present with consistent shapes.
    pub fn from_raw_tensors(tensors: &[RawTensor]) -> Result<(ModelParams<f32>, ModelDims)> {
        let mut map = std::collections::BTreeMap::new();
        for t in tensors {
            if map.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {:?}", t.name)));
            }
        }
        let get = |name: &str| -> Result<&&RawTensor> {
            map.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
        };
        let rank2 = |t: &RawTensor| -> Result<(usize, usize)> {
            if t.dims.len() != 2 {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: expected a matrix, got rank {}",
                    t.name,
                    t.dims.len()
                )));
            }
            Ok((t.dims[0] as usize, t.dims[1] as usize))
        };
        let (c, d) = rank2(get("stem.W_stem")?)?;
        let d_k = rank2(get("cm.W_Q")?)?.1;
        let d_mlp = rank2(get("ifce.mlp.W1")?)?.1;
        let t_frames = rank2(get("ivce.P_temporal")?)?.0;
        let l = rank2(get("iece.W_v1")?)?.0;
        let n2 = rank2(get("ifce.P_spatial")?)?.0;
        let grid = (n2 as f64).sqrt().round() as usize;
        if grid * grid != n2 || grid == 0 {
            return Err(Error::Checkpoint(format!(
                "ifce.P_spatial has {n2} rows, not a positive square"
            )));
        }
        let dims = ModelDims { c, d, d_k, d_mlp, t: t_frames, grid, l };
        let specs = tensor_specs(&dims);

        for name in map.keys() {
            if !specs.iter().any(|s| s.name == *name) {
                return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
            }
        }

        let mut mats = Vec::with_capacity(specs.len());
        for spec in &specs {
            let raw = get(spec.name)?;
            let expect: Vec<u32> = match spec.kind {
                ParamKind::AlphaOne => vec![],
                ParamKind::Bias => vec![spec.cols as u32],
                _ => vec![spec.rows as u32, spec.cols as u32],
            };
            if raw.dims != expect {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: dims {:?}, expected {:?}",
                    spec.name, raw.dims, expect
                )));
            }
            if raw.data.len() != spec.rows * spec.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: {} values for a {}x{} matrix",
                    spec.name,
                    raw.data.len(),
                    spec.rows,
                    spec.cols
                )));
            }
            mats.push(Matrix::from_vec(spec.rows, spec.cols, raw.data.clone()));
        }

        let mut p = ModelParams::zeros(&dims);
        let mut it = mats.into_iter();
        p.for_each_mut(|m| *m = it.next().expect("spec count matches field count"));
        Ok((p, dims))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        checkpoint::save_checkpoint(&self.to_raw_tensors(), path)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<(ModelParams<f32>, ModelDims)> {
        Self::from_raw_tensors(&checkpoint::load_checkpoint(path)?)
    }
}

pub(crate) struct ParamVars {
    pub enc: EncoderVars,
    pub cm: CmVars,
}

impl ParamVars {
    /// Leaf variables in canonical tensor order.
    pub(crate) fn ordered(&self) -> Vec<Var> {
        vec![
            self.enc.stem.w,
            self.enc.stem.b,
            self.enc.ifce.w_q,
            self.enc.ifce.w_k,
            self.enc.ifce.w_v,
            self.enc.ifce.alpha,
            self.enc.ifce.p_spatial,
            self.enc.ifce.mlp_w1,
            self.enc.ifce.mlp_b1,
            self.enc.ifce.mlp_w2,
            self.enc.ifce.mlp_b2,
            self.enc.ifce.mlp_w3,
            self.enc.ifce.mlp_b3,
            self.enc.ivce.w_t1,
            self.enc.ivce.w_t2,
            self.enc.ivce.w_c1,
            self.enc.ivce.w_c2,
            self.enc.ivce.p_temporal,
            self.enc.iece.w_v1,
            self.enc.iece.w_v2,
            self.enc.iece.w_e1,
            self.enc.iece.w_e2,
            self.enc.iece.w_ctx,
            self.enc.iece.b_ctx,
            self.cm.w_q,
            self.cm.w_k,
            self.cm.w_v,
        ]
    }
}

/// Which encoders and matchers participate in a run.
#[derive(Clone, Copy, Debug)]
pub struct Toggles {
    pub encoders: EncoderToggles,
    pub im: bool,
    pub cm: bool,
    pub tm: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Toggles { encoders: EncoderToggles::all(), im: true, cm: true, tm: true }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Toggles {
            encoders: EncoderToggles {
                ifce: cfg.enable_ifce,
                ivce: cfg.enable_ivce,
                iece: cfg.enable_iece,
            },
            im: cfg.enable_im,
            cm: cfg.enable_cm,
            tm: cfg.enable_tm,
        }
    }
}

struct QueryTapeOut {
    total: Var,
    losses: [Option<Var>; 3],
    distances: [Option<Var>; 3],
}

/// Builds the full per-query graph: encode, match on each enabled branch,
/// convert distances to a per-branch negative log-likelihood, sum.
fn query_loss_tape<F: Scalar>(
    t: &mut Tape<F>,
    pv: &ParamVars,
    episode: &Episode,
    query_index: usize,
    toggles: &Toggles,
    temperature: F,
) -> Result<QueryTapeOut> {
    let views = encode_episode_tape(t, &pv.enc, episode, query_index, toggles.encoders)?;
    let n = episode.n_way();
    let k = episode.k_shot();
    let label = episode.query_labels[query_index];

    let d1 = if toggles.im {
        Some(instance_branch_tape(t, &views.instance, n, k)?)
    } else {
        None
    };
    let d2 = if toggles.cm {
        Some(category_branch_tape(t, &pv.cm, &views.category, n, k))
    } else {
        None
    };
    let d3 = if toggles.tm {
        Some(task_branch_tape(t, &views.task, n, k))
    } else {
        None
    };

    let mut losses = [None, None, None];
    let mut total: Option<Var> = None;
    for (slot, dist) in [d1, d2, d3].into_iter().enumerate() {
        if let Some(dv) = dist {
            let scaled = t.scale(dv, -F::one() / temperature);
            let probs = t.softmax_rows(scaled);
            let nll = t.neg_log_entry(probs, label);
            losses[slot] = Some(nll);
            total = Some(match total {
                Some(acc) => t.add(acc, nll),
                None => nll,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("no matcher enabled".into()))?;
    Ok(QueryTapeOut { total, losses, distances: [d1, d2, d3] })
}

/// Everything measured for one query at evaluation time.
#[derive(Clone, Debug)]
pub struct QueryEval<F> {
    pub label: usize,
    /// Per-branch distances to each candidate class (None when disabled).
    pub distances: [Option<Vec<F>>; 3],
    /// Per-branch probabilities.
    pub branch_probs: [Option<Vec<F>>; 3],
    /// Per-branch argmin-distance predictions.
    pub branch_predicted: [Option<usize>; 3],
    /// Sum of enabled branch probabilities.
    pub fused: Vec<F>,
    /// Argmax of `fused`, ties to the lowest class index.
    pub predicted: usize,
    pub losses: [Option<F>; 3],
    pub total_loss: F,
}

fn argmin_lowest<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn argmax_lowest<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs one query forward and reads off distances, probabilities, and loss.
pub fn forward_query<F: Scalar>(
    params: &ModelParams<F>,
    episode: &Episode,
    query_index: usize,
    toggles: &Toggles,
    temperature: F,
) -> Result<QueryEval<F>> {
    params.check_episode(episode)?;
    let mut tape = Tape::new();
    let pv = params.leaves(&mut tape);
    let out = query_loss_tape(&mut tape, &pv, episode, query_index, toggles, temperature)?;

    let mut distances: [Option<Vec<F>>; 3] = [None, None, None];
    let mut branch_probs: [Option<Vec<F>>; 3] = [None, None, None];
    let mut branch_predicted = [None, None, None];
    let mut losses = [None, None, None];
    let n = episode.n_way();
    let mut fused = vec![F::zero(); n];
    for slot in 0..3 {
        if let Some(dv) = out.distances[slot] {
            let d = tape.value(dv).data().to_vec();
            let probs = distances_to_probs(&d, temperature)?;
            for (acc, &p) in fused.iter_mut().zip(&probs) {
                *acc = *acc + p;
            }
            branch_predicted[slot] = Some(argmin_lowest(&d));
            distances[slot] = Some(d);
            branch_probs[slot] = Some(probs);
            losses[slot] = Some(tape.value(out.losses[slot].unwrap()).item());
        }
    }
    let predicted = argmax_lowest(&fused);
    Ok(QueryEval {
        label: episode.query_labels[query_index],
        distances,
        branch_probs,
        branch_predicted,
        fused,
        predicted,
        losses,
        total_loss: tape.value(out.total).item(),
    })
}

/// Mean per-branch losses over an episode's queries (f64 for reporting).
#[derive(Clone, Copy, Debug, Default)]
pub struct EpisodeLoss {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// Mean of the episode's per-query total losses; the quantity whose
/// gradient [`episode_gradients`] computes.
pub fn episode_loss_value<F: Scalar>(
    params: &ModelParams<F>,
    episode: &Episode,
    toggles: &Toggles,
    temperature: F,
) -> Result<F> {
    let per_query: Vec<Result<F>> = (0..episode.query.len())
        .into_par_iter()
        .map(|qi| Ok(forward_query(params, episode, qi, toggles, temperature)?.total_loss))
        .collect();
    let mut sum = F::zero();
    for r in per_query {
        sum = sum + r?;
    }
    Ok(sum / F::from_usize(episode.query.len()).unwrap())
}

/// Gradients of the episode loss with respect to every parameter, packed in
/// canonical tensor order. Queries run in parallel; the reduction is
/// sequential in query order so results don't depend on scheduling.
pub fn episode_gradients<F: Scalar>(
    params: &ModelParams<F>,
    episode: &Episode,
    toggles: &Toggles,
    temperature: F,
) -> Result<(Vec<Matrix<F>>, EpisodeLoss)> {
    params.check_episode(episode)?;
    let n_queries = episode.query.len();
    let per_query: Vec<Result<(Vec<Matrix<F>>, EpisodeLoss)>> = (0..n_queries)
        .into_par_iter()
        .map(|qi| {
            let mut tape = Tape::new();
            let pv = params.leaves(&mut tape);
            let out = query_loss_tape(&mut tape, &pv, episode, qi, toggles, temperature)?;
            let grads = tape.backward(out.total);
            let packed: Vec<Matrix<F>> = pv
                .ordered()
                .into_iter()
                .map(|v| grads.wrt(&tape, v))
                .collect();
            let val = |ov: Option<Var>| {
                ov.map(|v| tape.value(v).item().to_f64().unwrap()).unwrap_or(0.0)
            };
            let loss = EpisodeLoss {
                l1: val(out.losses[0]),
                l2: val(out.losses[1]),
                l3: val(out.losses[2]),
                total: tape.value(out.total).item().to_f64().unwrap(),
            };
            Ok((packed, loss))
        })
        .collect();

    let mut acc: Option<Vec<Matrix<F>>> = None;
    let mut loss = EpisodeLoss::default();
    for r in per_query {
        let (packed, l) = r?;
        loss.l1 += l.l1;
        loss.l2 += l.l2;
        loss.l3 += l.l3;
        loss.total += l.total;
        match &mut acc {
            None => acc = Some(packed),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(&packed) {
                    dst.add_assign(src);
                }
            }
        }
    }
    let mut grads = acc.expect("episode has at least one query");
    let inv = F::one() / F::from_usize(n_queries).unwrap();
    for g in &mut grads {
        *g = g.scale(inv);
    }
    let nq = n_queries as f64;
    loss.l1 /= nq;
    loss.l2 /= nq;
    loss.l3 /= nq;
    loss.total /= nq;
    Ok((grads, loss))
}

/// One plain SGD step: `p <- p - lr * g`, grads in canonical order.
pub fn sgd_step<F: Scalar>(params: &mut ModelParams<F>, grads: &[Matrix<F>], lr: F) {
    assert_eq!(grads.len(), ModelParams::<F>::PARAM_COUNT);
    let mut i = 0;
    params.for_each_mut(|m| {
        m.add_scaled_assign(&grads[i], -lr);
        i += 1;
    });
}

/// Step-decayed learning rate for a given episode index.
pub fn lr_at(cfg: &TrainConfig, episode_index: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((episode_index / cfg.decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Data sources
// ---------------------------------------------------------------------------

/// Renders every clip described by a synthetic config: all classes across
/// the three splits, `clips_per_class` each. Each clip draws from its own
/// seeded stream, so the set is reproducible clip-by-clip.
pub fn synthesize_clips(cfg: &TrainConfig) -> Result<Vec<VideoClip>> {
    let n_classes = cfg.classes_train + cfg.classes_val + cfg.classes_test;
    let mut bank_rng = rng::stream(cfg.seed, tags::BANK, 0);
    let bank = generate_synthetic_bank(
        n_classes,
        cfg.subactions,
        cfg.subactions_per_class,
        cfg.channels,
        cfg.noise_sigma,
        cfg.warp_strength,
        &mut bank_rng,
    )?;
    let mut clips = Vec::with_capacity(n_classes * cfg.clips_per_class);
    for class in 0..n_classes as u32 {
        for k in 0..cfg.clips_per_class as u64 {
            let mut clip_rng =
                rng::stream(cfg.seed, tags::POOL, ((class as u64) << 20) | k);
            let mut clip = render_synthetic_video(
                &bank,
                class,
                cfg.frames,
                cfg.frame_h,
                cfg.frame_w,
                &mut clip_rng,
            )?;
            clip.clip_id = clips.len() as u32;
            clips.push(clip);
        }
    }
    Ok(clips)
}

/// Episode data for all three splits, from either source.
pub struct EpisodeSource {
    base: Dataset,
    val: Option<Dataset>,
    test: Option<Dataset>,
}

impl EpisodeSource {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let clips = match cfg.source {
            Source::Synthetic => synthesize_clips(cfg)?,
            Source::Archive => {
                load_feature_archive(&cfg.archive_path)?.clips().to_vec()
            }
        };
        Self::partition(cfg, clips)
    }

    /// Splits clips into train/val/test by ascending class id: the first
    /// `classes_train` classes are the base split, the next `classes_val`
    /// the validation split, the rest the test split.
    pub fn partition(cfg: &TrainConfig, clips: Vec<VideoClip>) -> Result<Self> {
        if cfg.classes_train == 0 {
            return Err(Error::Config("classes_train must be at least 1".into()));
        }
        let mut classes: Vec<u32> = clips.iter().map(|c| c.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        let want = cfg.classes_train + cfg.classes_val + cfg.classes_test;
        if classes.len() != want {
            return Err(Error::Config(format!(
                "data has {} classes, config wants {} (train {} + val {} + test {})",
                classes.len(),
                want,
                cfg.classes_train,
                cfg.classes_val,
                cfg.classes_test
            )));
        }
        let val_start = cfg.classes_train;
        let test_start = cfg.classes_train + cfg.classes_val;
        let split_of = |class_id: u32| {
            let idx = classes.binary_search(&class_id).expect("id from this list");
            if idx < val_start {
                Split::Base
            } else if idx < test_start {
                Split::NovelVal
            } else {
                Split::NovelTest
            }
        };
        let mut base = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for clip in clips {
            match split_of(clip.class_id) {
                Split::Base => base.push(clip),
                Split::NovelVal => val.push(clip),
                Split::NovelTest => test.push(clip),
            }
        }
        let build = |split, v: Vec<VideoClip>| -> Result<Option<Dataset>> {
            if v.is_empty() {
                Ok(None)
            } else {
                Ok(Some(Dataset::new(v, split)?))
            }
        };
        let base = Dataset::new(base, Split::Base)?;
        Ok(EpisodeSource {
            base,
            val: build(Split::NovelVal, val)?,
            test: build(Split::NovelTest, test)?,
        })
    }

    pub fn dataset(&self, split: Split) -> Result<&Dataset> {
        let ds = match split {
            Split::Base => Some(&self.base),
            Split::NovelVal => self.val.as_ref(),
            Split::NovelTest => self.test.as_ref(),
        };
        ds.ok_or_else(|| Error::Config(format!("{split:?} split is empty")))
    }

    pub fn clip_shape(&self) -> (usize, usize, usize, usize) {
        self.base.clip_shape().expect("base split is never empty")
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum TrainEvent {
    Episode { index: usize, lr: f64, loss: EpisodeLoss },
    Validation { index: usize, accuracy: f64, is_best: bool },
    CheckpointSaved { index: usize, path: PathBuf },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub episodes: usize,
    pub final_loss: f64,
    /// `(episode, accuracy)` of the checkpoint that won validation, when
    /// validation ran.
    pub best_val: Option<(usize, f64)>,
    pub saved_to: PathBuf,
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs episodic SGD per the config and writes the resulting checkpoint to
/// `out_path` (the best validation checkpoint when validation is enabled,
/// otherwise the final parameters). A per-episode loss trace goes to
/// `<out_path>.trace`, intermediate checkpoints to `<out_path>.ep<N>`.
pub fn train(
    cfg: &TrainConfig,
    source: &EpisodeSource,
    out_path: &Path,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainReport> {
    cfg.validate()?;
    let (t, h, w, c) = source.clip_shape();
    if cfg.patch_grid > h.min(w) {
        return Err(Error::BadGrid { n: cfg.patch_grid, h, w });
    }
    let dims = ModelDims {
        c,
        d: cfg.d,
        d_k: cfg.d_k,
        d_mlp: cfg.d_mlp,
        t,
        grid: cfg.patch_grid,
        l: cfg.clips_per_forward(),
    };
    let toggles = Toggles::from_config(cfg);
    let temperature = cfg.temperature as f32;
    let spec = EpisodeSpec {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        n_query: cfg.n_query,
        seed: cfg.seed,
    };

    let mut init_rng = rng::stream(cfg.seed, tags::INIT, 0);
    let mut params = ModelParams::<f32>::init(&dims, &mut init_rng);

    let trace_path = suffixed(out_path, ".trace");
    let mut trace = BufWriter::new(fs::File::create(&trace_path)?);
    writeln!(trace, "episode,lr,l1,l2,l3,total")?;

    let base = source.dataset(Split::Base)?;
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut last_loss = 0.0;

    for ep in 0..cfg.total_episodes {
        let mut ep_rng = rng::stream(cfg.seed, tags::TRAIN_EPISODE, ep as u64);
        let episode = sample_episode(base, &spec, &mut ep_rng)?;
        let lr = lr_at(cfg, ep);
        let (grads, loss) = episode_gradients(&params, &episode, &toggles, temperature)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteValue(format!(
                "training loss diverged at episode {ep}"
            )));
        }
        sgd_step(&mut params, &grads, lr as f32);
        last_loss = loss.total;
        writeln!(
            trace,
            "{ep},{lr},{},{},{},{}",
            loss.l1, loss.l2, loss.l3, loss.total
        )?;
        on_event(&TrainEvent::Episode { index: ep, lr, loss });

        let done = ep + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let path = suffixed(out_path, &format!(".ep{done}"));
            params.save(&path)?;
            on_event(&TrainEvent::CheckpointSaved { index: done, path });
        }
        if cfg.val_every > 0 && done % cfg.val_every == 0 {
            let val_ds = source.dataset(Split::NovelVal)?;
            let report =
                evaluate(&params, cfg, val_ds, cfg.val_episodes, tags::EVAL_VAL, None)?;
            let is_best = best.as_ref().map_or(true, |(_, acc, _)| report.accuracy > *acc);
            if is_best {
                best = Some((done, report.accuracy, params.clone()));
            }
            on_event(&TrainEvent::Validation {
                index: done,
                accuracy: report.accuracy,
                is_best,
            });
        }
    }
    trace.flush()?;

    let (best_val, chosen) = match best {
        Some((ep, acc, p)) => (Some((ep, acc)), p),
        None => (None, params),
    };
    chosen.save(out_path)?;
    Ok(TrainReport {
        episodes: cfg.total_episodes,
        final_loss: last_loss,
        best_val,
        saved_to: out_path.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub n_queries: usize,
    /// Fraction of queries whose fused prediction matched the label.
    pub accuracy: f64,
    /// Half-width of the 95% normal-approximation interval on `accuracy`.
    pub ci95: f64,
    /// Argmin-distance accuracy per branch (None when disabled).
    pub branch_accuracy: [Option<f64>; 3],
}

/// One row of per-query evaluation output.
#[derive(Clone, Debug)]
pub struct QueryRecord {
    pub episode: usize,
    pub query: usize,
    pub label: usize,
    pub predicted: usize,
    pub eval: QueryEval<f32>,
}

/// Evaluates on freshly sampled episodes from `dataset`. Episode `i` draws
/// from the stream `(cfg.seed, tag, i)`, so a given tag always replays the
/// same episode sequence. Episodes run in parallel with an ordered reduce.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    dataset: &Dataset,
    n_episodes: usize,
    tag: u64,
    mut on_query: Option<&mut dyn FnMut(&QueryRecord)>,
) -> Result<EvalReport> {
    let toggles = Toggles::from_config(cfg);
    let temperature = cfg.temperature as f32;
    let spec = EpisodeSpec {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        n_query: cfg.n_query,
        seed: cfg.seed,
    };
    let per_episode: Vec<Result<Vec<QueryEval<f32>>>> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, tag, i as u64);
            let episode = sample_episode(dataset, &spec, &mut rng)?;
            (0..episode.query.len())
                .map(|qi| forward_query(params, &episode, qi, &toggles, temperature))
                .collect()
        })
        .collect();

    let mut n_queries = 0usize;
    let mut correct = 0usize;
    let mut branch_correct = [0usize; 3];
    for (i, ep) in per_episode.into_iter().enumerate() {
        for (qi, eval) in ep?.into_iter().enumerate() {
            n_queries += 1;
            if eval.predicted == eval.label {
                correct += 1;
            }
            for slot in 0..3 {
                if eval.branch_predicted[slot] == Some(eval.label) {
                    branch_correct[slot] += 1;
                }
            }
            if let Some(cb) = on_query.as_deref_mut() {
                cb(&QueryRecord {
                    episode: i,
                    query: qi,
                    label: eval.label,
                    predicted: eval.predicted,
                    eval,
                });
            }
        }
    }
    let p = correct as f64 / n_queries as f64;
    let ci95 = 1.96 * (p * (1.0 - p) / n_queries as f64).sqrt();
    let enabled = [toggles.im, toggles.cm, toggles.tm];
    let mut branch_accuracy = [None, None, None];
    for slot in 0..3 {
        if enabled[slot] {
            branch_accuracy[slot] = Some(branch_correct[slot] as f64 / n_queries as f64);
        }
    }
    Ok(EvalReport { n_episodes, n_queries, accuracy: p, ci95, branch_accuracy })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per tensor, canonical order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
    /// Total elements compared.
    pub elements: usize,
    /// Elements where either side was distinguishable from zero; a check
    /// with none of these saw a flat loss and proves nothing.
    pub significant: usize,
}

/// Builds an episode of Gaussian-noise clips with the config's geometry.
fn random_episode(cfg: &TrainConfig, seed: u64) -> Result<Episode> {
    let mut rng = rng::stream(seed, tags::GRAD_CHECK, 0);
    let mut mk = |class_id: u32, clip_id: u32| -> VideoClip {
        let len = cfg.frames * cfg.frame_h * cfg.frame_w * cfg.channels;
        let data = (0..len)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z as f32
            })
            .collect();
        VideoClip {
            class_id,
            clip_id,
            t: cfg.frames,
            h: cfg.frame_h,
            w: cfg.frame_w,
            c: cfg.channels,
            data,
        }
    };
    let mut support = Vec::new();
    let mut next_id = 0;
    for class in 0..cfg.n_way as u32 {
        for _ in 0..cfg.k_shot {
            support.push(mk(class, next_id));
            next_id += 1;
        }
    }
    let mut query = Vec::new();
    let mut labels = Vec::new();
    for class in 0..cfg.n_way as u32 {
        for _ in 0..cfg.n_query {
            query.push(mk(class, next_id));
            next_id += 1;
            labels.push(class as usize);
        }
    }
    let class_ids = (0..cfg.n_way as u32).collect();
    Episode::from_parts(support, query, class_ids, labels)
}

/// Compares reverse-mode gradients against central finite differences in
/// f64 over one random episode. An element passes when the absolute error
/// is below `1e-8` or the relative error (against the larger magnitude) is
/// below `tolerance`.
pub fn grad_check(cfg: &TrainConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let episode = random_episode(cfg, seed)?;
    let dims = ModelDims {
        c: cfg.channels,
        d: cfg.d,
        d_k: cfg.d_k,
        d_mlp: cfg.d_mlp,
        t: cfg.frames,
        grid: cfg.patch_grid,
        l: cfg.clips_per_forward(),
    };
    let toggles = Toggles::from_config(cfg);
    let temperature = cfg.temperature;
    let mut init_rng = rng::stream(seed, tags::INIT, 0);
    let params32 = ModelParams::<f32>::init(&dims, &mut init_rng);
    let mut params = params32.cast::<f64>();

    let (analytic, _) = episode_gradients(&params, &episode, &toggles, temperature)?;

    let eps = 1e-5;
    let specs = tensor_specs(&dims);
    let mut per_param = Vec::with_capacity(specs.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    // Count elements per tensor up front; the nudge helper then visits by
    // (tensor index, element index) without holding a long-lived borrow.
    let mut sizes = Vec::new();
    params.for_each(|m| sizes.push(m.rows() * m.cols()));

    fn nudge(p: &mut ModelParams<f64>, target: usize, elem: usize, delta: f64) {
        let mut i = 0;
        p.for_each_mut(|m| {
            if i == target {
                m.data_mut()[elem] += delta;
            }
            i += 1;
        });
    }

    let mut elements = 0usize;
    let mut significant = 0usize;
    for (pi, spec) in specs.iter().enumerate() {
        let mut tensor_rel = 0.0f64;
        for e in 0..sizes[pi] {
            nudge(&mut params, pi, e, eps);
            let up = episode_loss_value(&params, &episode, &toggles, temperature)?;
            nudge(&mut params, pi, e, -2.0 * eps);
            let down = episode_loss_value(&params, &episode, &toggles, temperature)?;
            nudge(&mut params, pi, e, eps);
            let fd = (up - down) / (2.0 * eps);
            let ga = analytic[pi].data()[e];
            elements += 1;
            if ga.abs() >= 1e-8 || fd.abs() >= 1e-8 {
                significant += 1;
            }
            let err = (ga - fd).abs();
            let rel = if err < 1e-8 { 0.0 } else { err / ga.abs().max(fd.abs()) };
            if rel > tensor_rel {
                tensor_rel = rel;
            }
        }
        per_param.push((spec.name.to_string(), tensor_rel));
        if tensor_rel >= max_rel {
            max_rel = tensor_rel;
            worst = spec.name.to_string();
        }
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        worst,
        tolerance,
        passed: max_rel < tolerance,
        elements,
        significant,
    })
}
