//! Command-line front end: generate data, train, evaluate, match single
//! clips, check gradients, and inspect the on-disk formats.
//!
//! Exit codes: 0 success, 1 usage or configuration problem, 2 bad or missing
//! data, 3 a requested check failed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fewmatch::archive::{load_feature_archive, read_archive_bytes, save_feature_archive};
use fewmatch::checkpoint::read_checkpoint_bytes;
use fewmatch::config::{Source, TrainConfig};
use fewmatch::episode::{Dataset, Episode, Split, VideoClip};
use fewmatch::rng::tags;
use fewmatch::training::{
    evaluate, forward_query, grad_check, synthesize_clips, EpisodeSource, ModelParams,
    Toggles, TrainEvent,
};
use fewmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "fewmatch", version, about = "Few-shot video action matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip archive
    GenData(GenDataArgs),
    /// Train on episodes and write the best checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly sampled episodes
    Eval(EvalArgs),
    /// Score one query clip against an explicit support set
    Match(MatchArgs),
    /// Compare analytic gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Summarize an archive or checkpoint file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Config file; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the archive
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the trained checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Train from this archive instead of the config's data source
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's episode budget
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config file; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on this archive instead of the config's data source
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to sample episodes from
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Override the config's evaluation episode count
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Write one CSV row per query here
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Archive holding the clips
    #[arg(long)]
    data: PathBuf,
    /// Support clip ids, comma separated; every class needs the same count
    #[arg(long, value_delimiter = ',', required = true)]
    support: Vec<u32>,
    /// Query clip id
    #[arg(long)]
    query: u32,
    /// Softmax temperature for the per-branch probabilities
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    d_k: usize,
    /// Hidden width of the frame encoder's MLP; defaults to 2*d
    #[arg(long)]
    d_mlp: Option<usize>,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    patch_grid: usize,
    #[arg(long, default_value_t = 2)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 4)]
    frame_h: usize,
    #[arg(long, default_value_t = 4)]
    frame_w: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest tolerated relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    /// An .m3fa archive or .m3ck checkpoint
    path: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "base" | "train" => Ok(Split::Base),
        "val" => Ok(Split::NovelVal),
        "test" => Ok(Split::NovelTest),
        other => Err(format!("unknown split {other:?}, expected base, val or test")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(if e.is_usage() { 1 } else { 2 });
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Match(args) => match_clip(args),
        Command::GradCheck(args) => check_gradients(args),
        Command::Inspect(args) => inspect(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let clips = synthesize_clips(&cfg)?;
    let n_clips = clips.len();
    let dataset = Dataset::new(clips, Split::Base)?;
    let (t, h, w, c) = dataset.clip_shape().expect("generated archive is never empty");
    save_feature_archive(&dataset, &args.out)?;
    let bytes = fs::metadata(&args.out)?.len();
    println!(
        "wrote {}: {} clips, {} classes, {} per class, shape {}x{}x{}x{}, {} bytes",
        args.out.display(),
        n_clips,
        dataset.classes().len(),
        cfg.clips_per_class,
        t,
        h,
        w,
        c,
        bytes
    );
    Ok(0)
}

fn train(args: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&args.config)?;
    if let Some(data) = &args.data {
        cfg.source = Source::Archive;
        cfg.archive_path = data.display().to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(episodes) = args.episodes {
        cfg.total_episodes = episodes;
    }
    cfg.validate()?;
    let source = EpisodeSource::from_config(&cfg)?;
    let report = fewmatch::training::train(&cfg, &source, &args.out, |event| match event {
        TrainEvent::Episode { index, lr, loss } => {
            if (index + 1) % 100 == 0 || index + 1 == cfg.total_episodes {
                println!(
                    "episode {}/{}  lr {:.3e}  loss {:.4} (im {:.4} cm {:.4} tm {:.4})",
                    index + 1,
                    cfg.total_episodes,
                    lr,
                    loss.total,
                    loss.l1,
                    loss.l2,
                    loss.l3
                );
            }
        }
        TrainEvent::Validation { index, accuracy, is_best } => {
            let marker = if *is_best { "  (new best)" } else { "" };
            println!("validation @ {}: accuracy {:.4}{}", index + 1, accuracy, marker);
        }
        TrainEvent::CheckpointSaved { path, .. } => {
            println!("checkpoint saved: {}", path.display());
        }
    })?;
    match report.best_val {
        Some((ep, acc)) => println!(
            "done: kept episode-{} weights (val accuracy {:.4}) in {}",
            ep + 1,
            acc,
            report.saved_to.display()
        ),
        None => println!(
            "done: final loss {:.4}, weights in {}",
            report.final_loss,
            report.saved_to.display()
        ),
    }
    Ok(0)
}

fn eval(args: EvalArgs) -> Result<i32> {
    let mut cfg = load_config(&args.config)?;
    if let Some(data) = &args.data {
        cfg.source = Source::Archive;
        cfg.archive_path = data.display().to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    cfg.validate()?;
    let (params, _) = ModelParams::load(&args.checkpoint)?;
    let source = EpisodeSource::from_config(&cfg)?;
    let dataset = source.dataset(args.split)?;
    let tag = match args.split {
        Split::NovelVal => tags::EVAL_VAL,
        _ => tags::EVAL_TEST,
    };

    let mut csv = match &args.records {
        Some(path) => {
            let mut f = fs::File::create(path)?;
            let mut header = String::from("episode,query,label,predicted,correct");
            for branch in ["y1", "y2", "y3", "y"] {
                for c in 0..cfg.n_way {
                    header.push_str(&format!(",{branch}_{c}"));
                }
            }
            writeln!(f, "{header}")?;
            Some(f)
        }
        None => None,
    };
    let mut write_err = None;
    let report = {
        let mut on_query = |rec: &fewmatch::training::QueryRecord| {
            if let (Some(f), None) = (csv.as_mut(), write_err.as_ref()) {
                let mut line = format!(
                    "{},{},{},{},{}",
                    rec.episode,
                    rec.query,
                    rec.label,
                    rec.predicted,
                    (rec.predicted == rec.label) as u8
                );
                for branch in 0..3 {
                    match &rec.eval.branch_probs[branch] {
                        Some(probs) => {
                            for p in probs {
                                line.push_str(&format!(",{p}"));
                            }
                        }
                        None => line.push_str(&",".repeat(cfg.n_way)),
                    }
                }
                for p in &rec.eval.fused {
                    line.push_str(&format!(",{p}"));
                }
                if let Err(e) = writeln!(f, "{line}") {
                    write_err = Some(Error::Io(e));
                }
            }
        };
        evaluate(&params, &cfg, dataset, episodes, tag, Some(&mut on_query))?
    };
    if let Some(e) = write_err {
        return Err(e);
    }

    println!(
        "{:?} split: {} episodes, {} queries",
        args.split, report.n_episodes, report.n_queries
    );
    println!("fused accuracy {:.4} +/- {:.4}", report.accuracy, report.ci95);
    for (name, acc) in ["instance", "category", "task"].iter().zip(report.branch_accuracy) {
        match acc {
            Some(a) => println!("{name:>9} branch accuracy {a:.4}"),
            None => println!("{name:>9} branch disabled"),
        }
    }
    if let Some(path) = &args.records {
        println!("per-query records in {}", path.display());
    }
    Ok(0)
}

fn match_clip(args: MatchArgs) -> Result<i32> {
    let (params, _) = ModelParams::load(&args.checkpoint)?;
    let dataset = load_feature_archive(&args.data)?;
    let by_id: BTreeMap<u32, &VideoClip> =
        dataset.clips().iter().map(|c| (c.clip_id, c)).collect();
    let find = |id: u32| by_id.get(&id).copied().cloned().ok_or(Error::UnknownClip(id));

    // Group the chosen supports per class and lay them out class-major in
    // ascending class order, the layout every matcher expects.
    let mut per_class: BTreeMap<u32, Vec<VideoClip>> = BTreeMap::new();
    for &id in &args.support {
        let clip = find(id)?;
        per_class.entry(clip.class_id).or_default().push(clip);
    }
    let class_ids: Vec<u32> = per_class.keys().copied().collect();
    let k = per_class.values().next().map_or(0, |v| v.len());
    if per_class.values().any(|v| v.len() != k) {
        let counts: Vec<String> = per_class
            .iter()
            .map(|(cid, v)| format!("class {} has {}", cid, v.len()))
            .collect();
        return Err(Error::Config(format!(
            "support set needs the same number of clips per class ({})",
            counts.join(", ")
        )));
    }
    let support: Vec<VideoClip> = per_class.into_values().flatten().collect();

    let query_clip = find(args.query)?;
    let true_class = query_clip.class_id;
    // The episode layout wants a label; for a query from outside the support
    // classes any slot will do, the distances don't depend on it.
    let (label, known) = match class_ids.iter().position(|&c| c == true_class) {
        Some(pos) => (pos, true),
        None => (0, false),
    };
    let mut query_clip = query_clip;
    if !known {
        query_clip.class_id = class_ids[0];
    }
    let episode = Episode::from_parts(support, vec![query_clip], class_ids.clone(), vec![label])?;

    let temperature = args.temperature as f32;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(args.temperature));
    }
    let eval = forward_query(&params, &episode, 0, &Toggles::all(), temperature)?;

    println!(
        "{}-way {}-shot match of clip {} at temperature {}",
        episode.n_way(),
        episode.k_shot(),
        args.query,
        args.temperature
    );
    println!("{:>8}  {:>10}  {:>10}  {:>10}  {:>8}", "class", "D1", "D2", "D3", "Y");
    for (c, &cid) in episode.class_ids.iter().enumerate() {
        let d = |b: usize| eval.distances[b].as_ref().map(|v| v[c]).unwrap_or(f32::NAN);
        println!(
            "{:>8}  {:>10.4}  {:>10.4}  {:>10.4}  {:>8.4}",
            cid,
            d(0),
            d(1),
            d(2),
            eval.fused[c]
        );
    }
    println!("predicted class: {}", episode.class_ids[eval.predicted]);
    if known {
        let verdict = if eval.predicted == label { "correct" } else { "wrong" };
        println!("true class: {true_class} ({verdict})");
    } else {
        println!("true class: {true_class} (not in the support set)");
    }
    Ok(0)
}

fn check_gradients(args: GradCheckArgs) -> Result<i32> {
    let cfg = TrainConfig {
        d: args.d,
        d_k: args.d_k,
        d_mlp: args.d_mlp.unwrap_or(2 * args.d),
        frames: args.frames,
        patch_grid: args.patch_grid,
        n_way: args.n_way,
        k_shot: args.k_shot,
        n_query: 1,
        frame_h: args.frame_h,
        frame_w: args.frame_w,
        channels: args.channels,
        ..TrainConfig::default()
    };
    let report = grad_check(&cfg, args.seed, args.tolerance)?;
    for (name, err) in &report.per_param {
        println!("{name:<16} max rel err {err:.3e}");
    }
    println!(
        "{} of {} elements carried gradient signal",
        report.significant, report.elements
    );
    println!(
        "worst {} at {:.3e}, tolerance {:.1e}: {}",
        report.worst,
        report.max_rel_err,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed { 0 } else { 3 })
}

fn inspect(args: InspectArgs) -> Result<i32> {
    let bytes = fs::read(&args.path)?;
    let magic: [u8; 4] = bytes.get(..4).and_then(|m| m.try_into().ok()).unwrap_or([0; 4]);
    match &magic {
        b"M3FA" => {
            let clips = read_archive_bytes(&bytes)?;
            let n = clips.len();
            let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
            for clip in &clips {
                *per_class.entry(clip.class_id).or_default() += 1;
            }
            println!("{}: clip archive, {} clips", args.path.display(), n);
            if let Some(first) = clips.first() {
                let (t, h, w, c) = first.shape();
                println!("clip shape {t}x{h}x{w}x{c} (frames x height x width x channels)");
            }
            println!("{} classes:", per_class.len());
            for (cid, count) in per_class {
                println!("  class {cid}: {count} clips");
            }
        }
        b"M3CK" => {
            let tensors = read_checkpoint_bytes(&bytes)?;
            println!("{}: checkpoint, {} tensors", args.path.display(), tensors.len());
            let mut total = 0usize;
            for t in &tensors {
                let n = t.element_count();
                total += n;
                let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
                println!("  {:<16} [{}] ({} values)", t.name, dims.join(", "), n);
            }
            println!("{total} parameters");
        }
        found => {
            return Err(Error::BadMagic { expected: *b"M3FA", found: *found });
        }
    }
    Ok(0)
}
