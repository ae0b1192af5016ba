//! Clips, datasets, and episode sampling.
//!
//! An episode is the unit the whole pipeline consumes: N classes, K support
//! clips per class, Q query clips per class, all drawn from one dataset
//! split. Support clips are kept class-major (class c, shot j at `c*K + j`)
//! and `class_ids` is sorted ascending, so an episode's layout is a pure
//! function of what was sampled — nothing downstream depends on draw order.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// A video clip as pre-extracted patch features: `t` frames of `h x w`
/// spatial positions with `c` channels, row-major `(t, h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub class_id: u32,
    pub clip_id: u32,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    /// Dimension sanity: everything at least 1, buffer length consistent,
    /// all entries finite.
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "clip {} has zero dimension (t={}, h={}, w={}, c={})",
                self.clip_id, self.t, self.h, self.w, self.c
            )));
        }
        let expect = self.t * self.h * self.w * self.c;
        if self.data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "clip {} holds {} values, dims say {}",
                self.clip_id,
                self.data.len(),
                expect
            )));
        }
        if !self.data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteValue(format!("clip {}", self.clip_id)));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    /// Frame `tau` as an `(h*w) x c` matrix, in the requested precision.
    pub fn frame<F: Scalar>(&self, tau: usize) -> Matrix<F> {
        assert!(tau < self.t, "frame index");
        let len = self.h * self.w * self.c;
        let slice = &self.data[tau * len..(tau + 1) * len];
        Matrix::from_vec(
            self.h * self.w,
            self.c,
            slice.iter().map(|&x| F::lit(x as f64)).collect(),
        )
    }
}

/// Which meta-learning split a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Training classes; episodes here drive gradient steps.
    Base,
    /// Held-out classes used only to pick the best checkpoint.
    NovelVal,
    /// Held-out classes used only for final evaluation.
    NovelTest,
}

/// A set of clips sharing one shape, indexed by class.
pub struct Dataset {
    pub split: Split,
    clips: Vec<VideoClip>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    /// Validates every clip and the uniform-shape requirement.
    pub fn new(clips: Vec<VideoClip>, split: Split) -> Result<Self> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut shape = None;
        for (i, clip) in clips.iter().enumerate() {
            clip.validate()?;
            match shape {
                None => shape = Some(clip.shape()),
                Some(s) if s != clip.shape() => {
                    return Err(Error::ShapeMismatch(format!(
                        "clip {} is {:?}, dataset is {:?}",
                        clip.clip_id,
                        clip.shape(),
                        s
                    )))
                }
                _ => {}
            }
            by_class.entry(clip.class_id).or_default().push(i);
        }
        Ok(Dataset { split, clips, by_class })
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Class ids, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    /// Indices of the clips belonging to one class.
    pub fn class_clips(&self, class_id: u32) -> Option<&[usize]> {
        self.by_class.get(&class_id).map(|v| v.as_slice())
    }

    /// Shared clip shape, if the dataset is non-empty.
    pub fn clip_shape(&self) -> Option<(usize, usize, usize, usize)> {
        self.clips.first().map(|c| c.shape())
    }
}

/// Episode layout: N-way classification with K support and Q query clips
/// per class. `seed` is the base for episode-sampling streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

/// One sampled episode. Support and query lists are class-major; labels
/// index into the ascending `class_ids`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<VideoClip>,
    pub query: Vec<VideoClip>,
    pub class_ids: Vec<u32>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    /// Assembles an episode from explicit parts, enforcing the layout that
    /// [`sample_episode`] guarantees: class ids ascending and distinct,
    /// support class-major with equal shots per class, labels in range and
    /// consistent with the query clips, all shapes uniform.
    pub fn from_parts(
        support: Vec<VideoClip>,
        query: Vec<VideoClip>,
        class_ids: Vec<u32>,
        query_labels: Vec<usize>,
    ) -> Result<Episode> {
        let n = class_ids.len();
        if n < 2 {
            return Err(Error::Config(format!("an episode needs at least 2 classes, got {n}")));
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("episode class ids must be ascending and distinct".into()));
        }
        if support.is_empty() || support.len() % n != 0 {
            return Err(Error::EpisodeSizeMismatch {
                expected: n.max(1),
                found: support.len(),
            });
        }
        let k = support.len() / n;
        for (c, &cid) in class_ids.iter().enumerate() {
            for j in 0..k {
                let clip = &support[c * k + j];
                if clip.class_id != cid {
                    return Err(Error::Config(format!(
                        "support slot {} holds class {}, expected class {}",
                        c * k + j,
                        clip.class_id,
                        cid
                    )));
                }
            }
        }
        if query.is_empty() || query.len() != query_labels.len() {
            return Err(Error::EpisodeSizeMismatch {
                expected: query_labels.len().max(1),
                found: query.len(),
            });
        }
        for (qi, &label) in query_labels.iter().enumerate() {
            if label >= n {
                return Err(Error::LabelOutOfRange { label, n_way: n });
            }
            if query[qi].class_id != class_ids[label] {
                return Err(Error::Config(format!(
                    "query {} holds class {}, label {} says class {}",
                    qi, query[qi].class_id, label, class_ids[label]
                )));
            }
        }
        let shape = support[0].shape();
        for clip in support.iter().chain(&query) {
            clip.validate()?;
            if clip.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "clip {} is {:?}, episode is {:?}",
                    clip.clip_id,
                    clip.shape(),
                    shape
                )));
            }
        }
        Ok(Episode { support, query, class_ids, query_labels })
    }

    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.len() / self.class_ids.len()
    }

    pub fn n_queries(&self) -> usize {
        self.query.len()
    }

    /// Clips entering one forward pass: all supports plus one query.
    pub fn clips_per_forward(&self) -> usize {
        self.support.len() + 1
    }
}

/// Draws an episode from the dataset. Class choice and clip choice both come
/// from `rng`, so the caller controls determinism by keying the stream.
///
/// Every class in the split must be able to fill an episode slot (at least
/// `K + Q` clips); the check runs up front so failures do not depend on the
/// draw.
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    let classes = dataset.classes();
    if classes.len() < spec.n_way {
        return Err(Error::InsufficientClasses { have: classes.len(), need: spec.n_way });
    }
    let per_class = spec.k_shot + spec.n_query;
    for &cid in &classes {
        let have = dataset.class_clips(cid).map(|v| v.len()).unwrap_or(0);
        if have < per_class {
            return Err(Error::InsufficientClipsPerClass {
                class_id: cid,
                have,
                need: per_class,
            });
        }
    }

    let mut class_ids: Vec<u32> = rand::seq::index::sample(rng, classes.len(), spec.n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    class_ids.sort_unstable();

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    let mut query_labels = Vec::with_capacity(spec.n_way * spec.n_query);
    for (label, &cid) in class_ids.iter().enumerate() {
        let pool = dataset.class_clips(cid).unwrap();
        let picks = rand::seq::index::sample(rng, pool.len(), per_class);
        for (slot, pick) in picks.into_iter().enumerate() {
            let clip = dataset.clips[pool[pick]].clone();
            if slot < spec.k_shot {
                support.push(clip);
            } else {
                query.push(clip);
                query_labels.push(label);
            }
        }
    }

    Ok(Episode { support, query, class_ids, query_labels })
}
