//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` lines are comments. Unknown keys and
//! repeated keys are errors — silently ignoring a typo like `n_wey = 10`
//! would change an experiment without anyone noticing. Every key has a
//! default, so the empty string parses to the default configuration, and
//! serialization writes keys in one canonical order so that
//! parse → serialize → parse is the identity.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where training data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Procedurally generated clip banks, reproducible from `seed`.
    Synthetic,
    /// A feature archive on disk at `archive_path`.
    Archive,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Synthetic => "synthetic",
            Source::Archive => "archive",
        })
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Source::Synthetic),
            "archive" => Ok(Source::Archive),
            other => Err(Error::Config(format!(
                "source must be \"synthetic\" or \"archive\", got {other:?}"
            ))),
        }
    }
}

/// Full description of a run: episode geometry, model dimensions,
/// optimization schedule, branch toggles, and the data source.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // Episode geometry.
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,

    // Model dimensions.
    pub frames: usize,
    pub patch_grid: usize,
    pub d: usize,
    pub d_k: usize,
    pub d_mlp: usize,

    // Optimization.
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_episodes: usize,
    pub temperature: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub val_episodes: usize,
    pub eval_episodes: usize,

    // Component toggles (a disabled encoder is the identity; a disabled
    // matcher drops out of the loss and the fused score).
    pub enable_ifce: bool,
    pub enable_ivce: bool,
    pub enable_iece: bool,
    pub enable_im: bool,
    pub enable_cm: bool,
    pub enable_tm: bool,

    // Data source.
    pub source: Source,
    pub archive_path: String,
    pub classes_train: usize,
    pub classes_val: usize,
    pub classes_test: usize,
    pub subactions: usize,
    pub subactions_per_class: usize,
    pub channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub clips_per_class: usize,
    pub noise_sigma: f64,
    pub warp_strength: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 1,
            frames: 8,
            patch_grid: 4,
            d: 64,
            d_k: 64,
            d_mlp: 128,
            learning_rate: 1e-4,
            decay_factor: 0.5,
            decay_every: 2000,
            total_episodes: 5000,
            temperature: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            val_every: 500,
            val_episodes: 100,
            eval_episodes: 1000,
            enable_ifce: true,
            enable_ivce: true,
            enable_iece: true,
            enable_im: true,
            enable_cm: true,
            enable_tm: true,
            source: Source::Synthetic,
            archive_path: String::new(),
            classes_train: 61,
            classes_val: 12,
            classes_test: 26,
            subactions: 8,
            subactions_per_class: 3,
            channels: 16,
            frame_h: 8,
            frame_w: 8,
            clips_per_class: 12,
            noise_sigma: 0.1,
            warp_strength: 0.3,
        }
    }
}

/// Key table: name, section comment (on the first key of a section), and
/// the accessor pair used by both the parser and the serializer.
macro_rules! config_keys {
    ($m:ident) => {
        $m!(n_way, usize, "Episode geometry");
        $m!(k_shot, usize, "");
        $m!(n_query, usize, "");
        $m!(frames, usize, "Model dimensions");
        $m!(patch_grid, usize, "");
        $m!(d, usize, "");
        $m!(d_k, usize, "");
        $m!(d_mlp, usize, "");
        $m!(learning_rate, f64, "Optimization");
        $m!(decay_factor, f64, "");
        $m!(decay_every, usize, "");
        $m!(total_episodes, usize, "");
        $m!(temperature, f64, "");
        $m!(seed, u64, "");
        $m!(checkpoint_every, usize, "");
        $m!(val_every, usize, "");
        $m!(val_episodes, usize, "");
        $m!(eval_episodes, usize, "");
        $m!(enable_ifce, bool, "Component toggles");
        $m!(enable_ivce, bool, "");
        $m!(enable_iece, bool, "");
        $m!(enable_im, bool, "");
        $m!(enable_cm, bool, "");
        $m!(enable_tm, bool, "");
        $m!(source, Source, "Data source");
        $m!(archive_path, String, "");
        $m!(classes_train, usize, "");
        $m!(classes_val, usize, "");
        $m!(classes_test, usize, "");
        $m!(subactions, usize, "");
        $m!(subactions_per_class, usize, "");
        $m!(channels, usize, "");
        $m!(frame_h, usize, "");
        $m!(frame_w, usize, "");
        $m!(clips_per_class, usize, "");
        $m!(noise_sigma, f64, "");
        $m!(warp_strength, f64, "");
    };
}

trait ConfigValue: Sized {
    fn parse_value(key: &str, raw: &str) -> Result<Self>;
    fn write_value(&self, out: &mut String);
}

macro_rules! via_fromstr {
    ($ty:ty, $desc:literal) => {
        impl ConfigValue for $ty {
            fn parse_value(key: &str, raw: &str) -> Result<Self> {
                raw.parse().map_err(|_| {
                    Error::Config(format!("{key}: expected {}, got {raw:?}", $desc))
                })
            }
            fn write_value(&self, out: &mut String) {
                out.push_str(&self.to_string());
            }
        }
    };
}

via_fromstr!(usize, "a non-negative integer");
via_fromstr!(u64, "a non-negative integer");
via_fromstr!(bool, "true or false");

impl ConfigValue for f64 {
    fn parse_value(key: &str, raw: &str) -> Result<Self> {
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::Config(format!("{key}: expected a number, got {raw:?}")))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key}: must be finite, got {raw}")));
        }
        Ok(v)
    }
    fn write_value(&self, out: &mut String) {
        // Shortest representation that parses back to the same f64.
        out.push_str(&self.to_string());
    }
}

impl ConfigValue for String {
    fn parse_value(_key: &str, raw: &str) -> Result<Self> {
        Ok(raw.to_owned())
    }
    fn write_value(&self, out: &mut String) {
        out.push_str(self);
    }
}

impl ConfigValue for Source {
    fn parse_value(_key: &str, raw: &str) -> Result<Self> {
        raw.parse()
    }
    fn write_value(&self, out: &mut String) {
        out.push_str(&self.to_string());
    }
}

impl TrainConfig {
    /// Parses a config text. Missing keys keep their defaults; unknown or
    /// repeated keys and malformed values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`, got {trimmed:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value, line_no, &mut seen)?;
        }
        Ok(cfg)
    }

    fn apply(
        &mut self,
        key: &str,
        value: &str,
        line_no: usize,
        seen: &mut BTreeSet<&str>,
    ) -> Result<()> {
        macro_rules! set_key {
            ($field:ident, $ty:ty, $section:literal) => {
                if key == stringify!($field) {
                    if !seen.insert(stringify!($field)) {
                        return Err(Error::Config(format!(
                            "line {line_no}: key {key:?} set twice"
                        )));
                    }
                    self.$field = <$ty as ConfigValue>::parse_value(key, value)?;
                    return Ok(());
                }
            };
        }
        config_keys!(set_key);
        Err(Error::Config(format!("line {line_no}: unknown key {key:?}")))
    }

    /// Serializes every key in canonical order, grouped by section.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        macro_rules! emit_key {
            ($field:ident, $ty:ty, $section:literal) => {
                if !$section.is_empty() {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(concat!("# ", $section, "\n"));
                }
                out.push_str(stringify!($field));
                out.push_str(" = ");
                ConfigValue::write_value(&self.$field, &mut out);
                out.push('\n');
            };
        }
        config_keys!(emit_key);
        out
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let cfg = Self::parse(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Cross-field checks. Values that only matter at data-build or
    /// episode-sampling time (e.g. clip counts versus shots) are rechecked
    /// there with more specific errors.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot == 0 || self.n_query == 0 {
            return bad("k_shot and n_query must be positive".into());
        }
        if self.frames == 0 || self.d == 0 || self.d_k == 0 || self.d_mlp == 0 {
            return bad("frames, d, d_k, d_mlp must be positive".into());
        }
        if self.patch_grid == 0 {
            return bad("patch_grid must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            ));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        if self.total_episodes == 0 {
            return bad("total_episodes must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if self.val_every > 0 && self.val_episodes == 0 {
            return bad("val_episodes must be positive when validation runs".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        if !(self.enable_im || self.enable_cm || self.enable_tm) {
            return bad("at least one matcher must be enabled".into());
        }
        match self.source {
            Source::Archive => {
                if self.archive_path.is_empty() {
                    return bad("archive_path required when source = archive".into());
                }
            }
            Source::Synthetic => {
                if self.subactions == 0 || self.subactions_per_class == 0 {
                    return bad("subactions and subactions_per_class must be positive".into());
                }
                if self.subactions_per_class > self.frames {
                    return bad(format!(
                        "subactions_per_class = {} cannot exceed frames = {}",
                        self.subactions_per_class, self.frames
                    ));
                }
                if self.channels == 0 || self.frame_h == 0 || self.frame_w == 0 {
                    return bad("channels, frame_h, frame_w must be positive".into());
                }
                if self.patch_grid > self.frame_h.min(self.frame_w) {
                    return Err(Error::BadGrid {
                        n: self.patch_grid,
                        h: self.frame_h,
                        w: self.frame_w,
                    });
                }
                if self.clips_per_class < self.k_shot + self.n_query {
                    return bad(format!(
                        "clips_per_class = {} cannot cover k_shot + n_query = {}",
                        self.clips_per_class,
                        self.k_shot + self.n_query
                    ));
                }
                if self.classes_train < self.n_way || self.classes_test < self.n_way {
                    return bad(format!(
                        "train and test splits need at least n_way = {} classes (got {} train, {} test)",
                        self.n_way, self.classes_train, self.classes_test
                    ));
                }
                if self.val_every > 0 && self.classes_val < self.n_way {
                    return bad(format!(
                        "validation runs every {} episodes but classes_val = {} < n_way = {}",
                        self.val_every, self.classes_val, self.n_way
                    ));
                }
                if self.noise_sigma < 0.0 {
                    return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
                }
                if !(0.0..=1.0).contains(&self.warp_strength) {
                    return bad(format!(
                        "warp_strength must be in [0, 1], got {}",
                        self.warp_strength
                    ));
                }
            }
        }
        Ok(())
    }

    /// Clips every forward pass sees: all supports plus one query.
    pub fn clips_per_forward(&self) -> usize {
        self.n_way * self.k_shot + 1
    }
}
