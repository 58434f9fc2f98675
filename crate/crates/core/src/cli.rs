//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::io::{read_features, read_sequence, write_features, write_sequence, FeatureTrack};
use crate::data::motion::{MotionKind, MotionSequence, DEFAULT_FPS};
use crate::data::toy::{gen_toy_corpus, lip_region, ToyCorpusSpec};
use crate::denoiser::audio::resample_features;
use crate::denoiser::{
    load_checkpoint, save_checkpoint, ArchConfig, ConditionSet, DenoiserModel, Style, Variant,
};
use crate::diffusion::{GuidanceConfig, ScheduleKind};
use crate::metrics::{self, MetricReport, ReportMeta, DEFAULT_SIGMA};
use crate::sampling::{
    edit_facial, make_inbetween_mask, make_keyframe_mask, sample_facial, sample_head_sgdiff,
    EditOptions, HeadOptions, ImputationMode, ImputationSpec, SampleRequest,
};
use crate::service::{self, AppState, JobRegistry, Store};
use crate::tensor::Tensor;
use crate::training::{
    finetune_personalize, train_facial, train_head_sgdiff, Clip, GuidanceMaskSampler, MaskFamily,
    TrainConfig, TrainOutcome,
};

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "MOTIONDIFF_RUN_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "motiondiff",
    version,
    about = "Audio-driven face and head motion diffusion"
)]
pub struct Cli {
    /// Root for models, outputs and job records.
    #[arg(long, global = true, env = RUN_DIR_ENV)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus of face, head and feature files.
    GenCorpus(GenCorpusArgs),
    /// Train a facial or head model.
    Train(TrainArgs),
    /// Adapt a facial model to a new subject.
    Finetune(FinetuneArgs),
    /// Draw new sequences.
    Sample(SampleArgs),
    /// Regenerate parts of a sequence around known frames.
    Edit(EditArgs),
    /// Compute lip-sync, diversity and beat-alignment metrics.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub sequences_per_subject: usize,
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub vertices: usize,
    #[arg(long, default_value_t = 0.35)]
    pub noise: f32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskArg {
    Mixed,
    Inbetween,
    Keyframe,
    Zeros,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "facial")]
    pub variant: Variant,
    /// Corpus directory, or `toy` for the built-in synthetic corpus.
    #[arg(long)]
    pub corpus: String,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Crop length; 30 for facial and 300 for head when absent.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Level widths as `a,b,c`.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    pub widths: Vec<usize>,
    /// Guidance mask family for head training.
    #[arg(long, value_enum, default_value = "mixed")]
    pub masks: MaskArg,
    /// Checkpoint path; `<run-dir>/models/<variant>.ckpt` when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Subject whose face sequences form the reference set.
    #[arg(long)]
    pub subject: String,
    /// Longest reference duration used, in seconds.
    #[arg(long)]
    pub seconds: Option<f32>,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Audio features; unconditional without.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Length; the feature length when absent.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GuidanceConfig::DIVERSE)]
    pub scale: f64,
    #[arg(long)]
    pub subject: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Guided,
    Replacement,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sequence whose known frames are kept.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Keep leading and trailing fractions, as `head,tail`.
    #[arg(long, value_delimiter = ',')]
    pub inbetween: Option<Vec<f64>>,
    /// Text file with one keyframe per line: `frame [values...]`.
    #[arg(long)]
    pub keyframes: Option<PathBuf>,
    /// Random keyframes per second.
    #[arg(long)]
    pub keyframe_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GuidanceConfig::DIVERSE)]
    pub scale: f64,
    #[arg(long)]
    pub subject: Option<String>,
    /// Head only.
    #[arg(long, value_enum, default_value = "guided")]
    pub mode: ModeArg,
    /// Facial only: leave the model's estimate at known frames.
    #[arg(long)]
    pub no_final_replacement: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; `<out>.report.json` when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// `lip`, `all`, or a file of channel indices.
    #[arg(long, default_value = "lip")]
    pub region: String,
    /// Extra samples for the diversity metric.
    #[arg(long, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Checkpoint directory; `<run-dir>/models` when absent.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Sequence and feature directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let run_dir = cli.run_dir;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Train(a) => train(&a, run_dir.as_deref()),
        Command::Finetune(a) => finetune(&a, run_dir.as_deref()),
        Command::Sample(a) => sample(&a, run_dir.as_deref()),
        Command::Edit(a) => edit(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(&a, run_dir),
    }
}

fn require_path(p: &Path, flag: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: no such path `{}`", p.display())))
    }
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        sequences_per_subject: a.sequences_per_subject,
        frames: a.frames,
        vertices: a.vertices,
        seed: a.seed,
        noise: a.noise,
        ..ToyCorpusSpec::default()
    };
    let corpus = gen_toy_corpus(&spec).map_err(usage)?;
    fs::create_dir_all(&a.out).map_err(rt)?;
    let mut per_subject = vec![0usize; spec.subjects.len()];
    for item in &corpus.items {
        let k = per_subject[item.subject];
        per_subject[item.subject] += 1;
        let stem = format!("{}_{k:03}", spec.subjects[item.subject].name);
        write_sequence(a.out.join(format!("{stem}.face.mseq")), &item.face).map_err(rt)?;
        write_sequence(a.out.join(format!("{stem}.head.mseq")), &item.head).map_err(rt)?;
        write_features(a.out.join(format!("{stem}.feat")), &item.features).map_err(rt)?;
    }
    let manifest = serde_json::to_string_pretty(&spec).expect("spec serializes");
    fs::write(a.out.join("corpus.json"), manifest).map_err(rt)?;
    println!(
        "wrote {} sequences to {}",
        corpus.items.len(),
        a.out.display()
    );
    Ok(())
}

/// Face or head sequences with aligned audio, read from a corpus directory.
struct DiskCorpus {
    subjects: Vec<String>,
    /// `(subject index, motion, audio)` with audio at the motion rate.
    items: Vec<(usize, MotionSequence, Tensor)>,
}

fn align(seq: &MotionSequence, track: &FeatureTrack) -> Result<(MotionSequence, Tensor)> {
    let audio = resample_features(&track.data, track.fps, seq.fps).map_err(rt)?;
    let n = seq.frames().min(audio.dim(0));
    let a = audio.dim(1);
    let audio = Tensor::new(vec![n, a], audio.data()[..n * a].to_vec()).map_err(rt)?;
    Ok((seq.window(0, n), audio))
}

fn load_corpus(arg: &str, kind: MotionKind, flag: &str) -> Result<DiskCorpus> {
    if arg == "toy" {
        let corpus = gen_toy_corpus(&ToyCorpusSpec::default()).map_err(rt)?;
        let items = corpus
            .items
            .iter()
            .map(|it| {
                let seq = if kind == MotionKind::Face {
                    &it.face
                } else {
                    &it.head
                };
                (it.subject, seq.clone(), it.features.data.clone())
            })
            .collect();
        return Ok(DiskCorpus {
            subjects: corpus.subject_names(),
            items,
        });
    }
    let dir = Path::new(arg);
    require_path(dir, flag)?;
    let suffix = match kind {
        MotionKind::Face => ".face.mseq",
        MotionKind::Head => ".head.mseq",
    };
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(rt)?
        .flatten()
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n.ends_with(suffix))
        .collect();
    names.sort();
    let mut subjects: Vec<String> = Vec::new();
    let mut items = Vec::new();
    for name in names {
        let stem = &name[..name.len() - suffix.len()];
        let feat = dir.join(format!("{stem}.feat"));
        if !feat.exists() {
            continue;
        }
        let seq = read_sequence(dir.join(&name)).map_err(rt)?;
        let track = read_features(&feat).map_err(rt)?;
        let idx = match subjects.iter().position(|s| *s == seq.subject) {
            Some(i) => i,
            None => {
                subjects.push(seq.subject.clone());
                subjects.len() - 1
            }
        };
        let (seq, audio) = align(&seq, &track)?;
        items.push((idx, seq, audio));
    }
    if items.is_empty() {
        return Err(usage(format!(
            "{flag}: no `*{suffix}` files with features in `{arg}`"
        )));
    }
    Ok(DiskCorpus { subjects, items })
}

fn default_out(run_dir: Option<&Path>, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    match (explicit, run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("models").join(name),
        (None, None) => PathBuf::from(name),
    }
}

fn write_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(rt)?;
    }
    save_checkpoint(out, &outcome.model).map_err(rt)?;
    let history = out.with_extension("loss.txt");
    outcome.history.write(&history).map_err(rt)?;
    let (first, last) = (outcome.history.initial(50), outcome.history.last(50));
    println!(
        "wrote {} ({} iterations, loss {first:.4} -> {last:.4}) and {}",
        out.display(),
        outcome.history.records.len(),
        history.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, run_dir: Option<&Path>) -> Result<()> {
    let kind = match a.variant {
        Variant::Facial => MotionKind::Face,
        Variant::Head => MotionKind::Head,
    };
    let corpus = load_corpus(&a.corpus, kind, "--corpus")?;
    let widths: [usize; 3] = a
        .widths
        .clone()
        .try_into()
        .map_err(|_| usage("--widths takes three values"))?;
    let audio_in = corpus.items[0].2.dim(1);
    let mut arch = match a.variant {
        Variant::Facial => {
            let c = corpus.items[0].1.channels();
            ArchConfig::facial(c / 3, corpus.subjects.clone())
        }
        Variant::Head => ArchConfig::head(),
    }
    .with_widths(widths);
    arch.audio_in = audio_in;
    let model = DenoiserModel::new(arch, a.seed).map_err(usage)?;
    let mut cfg = match a.variant {
        Variant::Facial => TrainConfig::facial(),
        Variant::Head => TrainConfig::head(),
    };
    cfg.iterations = a.iters;
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    cfg.steps = a.steps;
    cfg.schedule = ScheduleKind::Cosine;
    cfg.seed = a.seed;
    if let Some(w) = a.window {
        cfg.window = w;
    }
    let clips: Vec<Clip> = corpus
        .items
        .iter()
        .map(|(s, seq, audio)| Clip {
            motion: seq.data().clone(),
            audio: audio.clone(),
            style: match a.variant {
                Variant::Facial => Style::Subject(*s),
                Variant::Head => Style::Mean,
            },
        })
        .collect();
    let outcome = match a.variant {
        Variant::Facial => train_facial(&clips, model, &cfg),
        Variant::Head => {
            let family = match a.masks {
                MaskArg::Mixed => MaskFamily::Mixed,
                MaskArg::Inbetween => MaskFamily::Inbetween,
                MaskArg::Keyframe => MaskFamily::Keyframe,
                MaskArg::Zeros => MaskFamily::Zeros,
            };
            let fps = corpus.items[0].1.fps;
            train_head_sgdiff(&clips, model, &cfg, GuidanceMaskSampler::new(family, fps))
        }
    }
    .map_err(rt)?;
    let out = default_out(run_dir, &a.out, &format!("{}.ckpt", a.variant.name()));
    write_outcome(&out, &outcome)
}

fn finetune(a: &FinetuneArgs, run_dir: Option<&Path>) -> Result<()> {
    require_path(&a.model, "--model")?;
    let model = load_checkpoint(&a.model).map_err(rt)?;
    let corpus = load_corpus(
        a.corpus.to_str().unwrap_or_default(),
        MotionKind::Face,
        "--corpus",
    )?;
    let mut budget = a.seconds.map(|s| s.max(0.0));
    let mut reference = Vec::new();
    for (_, seq, audio) in corpus
        .items
        .iter()
        .filter(|(_, s, _)| s.subject == a.subject)
    {
        let mut n = seq.frames();
        if let Some(left) = budget.as_mut() {
            n = n.min((*left * seq.fps).round() as usize);
            *left -= n as f32 / seq.fps;
        }
        if n == 0 {
            break;
        }
        let c = seq.channels();
        let motion = Tensor::new(vec![n, c], seq.data().data()[..n * c].to_vec()).map_err(rt)?;
        let ad = audio.dim(1);
        let audio = Tensor::new(vec![n, ad], audio.data()[..n * ad].to_vec()).map_err(rt)?;
        reference.push((motion, audio));
    }
    if reference.is_empty() {
        return Err(usage(format!(
            "--subject: no face sequences of `{}` in the corpus",
            a.subject
        )));
    }
    let mut cfg = TrainConfig::finetune();
    cfg.iterations = a.iters;
    cfg.seed = a.seed;
    cfg.batch_size = a.batch;
    cfg.steps = model.arch().diffusion.steps;
    cfg.schedule = model.arch().diffusion.schedule;
    let outcome = finetune_personalize(&model, &reference, &a.subject, &cfg).map_err(rt)?;
    let out = default_out(run_dir, &a.out, &format!("facial-{}.ckpt", a.subject));
    write_outcome(&out, &outcome)
}

/// Audio for `n` frames from a feature file, zeros when absent.
fn audio_for(
    model: &DenoiserModel,
    features: &Option<PathBuf>,
    n: Option<usize>,
) -> Result<(Option<Tensor>, usize)> {
    let Some(path) = features else {
        let n = n.ok_or_else(|| usage("--frames is required without --features"))?;
        return Ok((None, n));
    };
    require_path(path, "--features")?;
    let track = read_features(path).map_err(rt)?;
    let audio = resample_features(&track.data, track.fps, DEFAULT_FPS).map_err(rt)?;
    let n = n.unwrap_or(audio.dim(0));
    if audio.dim(0) < n {
        return Err(usage(format!(
            "--frames: features cover only {} frames",
            audio.dim(0)
        )));
    }
    let a = audio.dim(1);
    if a != model.arch().audio_in {
        return Err(rt(format!(
            "model reads {} audio channels, features have {a}",
            model.arch().audio_in
        )));
    }
    Ok((
        Some(Tensor::new(vec![n, a], audio.data()[..n * a].to_vec()).map_err(rt)?),
        n,
    ))
}

fn style_of(model: &DenoiserModel, subject: &Option<String>) -> Result<Style> {
    match subject {
        None => Ok(Style::Mean),
        Some(s) => model
            .subject_index(s)
            .map(Style::Subject)
            .ok_or_else(|| usage(format!("--subject: model has no subject `{s}`"))),
    }
}

fn sample(a: &SampleArgs, run_dir: Option<&Path>) -> Result<()> {
    require_path(&a.model, "--model")?;
    let model = load_checkpoint(&a.model).map_err(rt)?;
    let (audio, n) = audio_for(&model, &a.features, a.frames)?;
    let schedule = model.schedule().map_err(rt)?;
    let guidance = GuidanceConfig::new(a.scale).map_err(usage)?;
    let out = match (&a.out, run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("outputs"),
        (None, None) => PathBuf::from("."),
    };
    fs::create_dir_all(&out).map_err(rt)?;
    let zeros = || Tensor::zeros(&[n, model.arch().audio_in]);
    let seqs: Vec<MotionSequence> = match model.variant() {
        Variant::Facial => {
            let style = style_of(&model, &a.subject)?;
            let cond = match audio {
                Some(x) => ConditionSet::new(x, style),
                None => ConditionSet::new(zeros(), style).null(),
            };
            let mut req = SampleRequest::new(cond, a.seed, a.count);
            req.guidance = guidance;
            sample_facial(&model, &schedule, &req, Default::default()).map_err(rt)?
        }
        Variant::Head => {
            let audio = audio.unwrap_or_else(zeros);
            let spec = ImputationSpec::empty(n, 3);
            (0..a.count)
                .map(|i| {
                    sample_head_sgdiff(
                        &model,
                        &schedule,
                        &audio,
                        &spec,
                        guidance,
                        a.seed.wrapping_add(i as u64),
                        &HeadOptions::default(),
                    )
                    .map(|o| o.sequence)
                    .map_err(rt)
                })
                .collect::<Result<_>>()?
        }
    };
    for (i, s) in seqs.iter().enumerate() {
        let p = out.join(format!("sample-{i:03}.mseq"));
        write_sequence(&p, s).map_err(rt)?;
        println!("{}", p.display());
    }
    Ok(())
}

/// Lines of `frame [values...]`; `#` starts a comment.
fn read_keyframes(path: &Path, base: &MotionSequence) -> Result<Vec<(usize, Vec<f32>)>> {
    let text = fs::read_to_string(path).map_err(rt)?;
    let mut keys = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            usage(format!(
                "--keyframes: line {} is not `frame [values...]`",
                ln + 1
            ))
        };
        let mut parts = line.split_whitespace();
        let frame: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let values: Vec<f32> = parts
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if frame >= base.frames() {
            return Err(usage(format!(
                "--keyframes: frame {frame} beyond {} frames",
                base.frames()
            )));
        }
        let values = if values.is_empty() {
            base.frame(frame).to_vec()
        } else {
            values
        };
        if values.len() != base.channels() {
            return Err(bad());
        }
        keys.push((frame, values));
    }
    Ok(keys)
}

fn edit(a: &EditArgs) -> Result<()> {
    require_path(&a.model, "--model")?;
    require_path(&a.base, "--base")?;
    let model = load_checkpoint(&a.model).map_err(rt)?;
    let base = read_sequence(&a.base).map_err(rt)?;
    let n = base.frames();
    let expected = match model.variant() {
        Variant::Facial => MotionKind::Face,
        Variant::Head => MotionKind::Head,
    };
    if base.kind != expected {
        return Err(rt(format!(
            "base is {:?} motion but the model is {}",
            base.kind,
            model.variant().name()
        )));
    }
    let spec = match (&a.inbetween, &a.keyframes, a.keyframe_rate) {
        (Some(f), None, None) => {
            if f.len() != 2 {
                return Err(usage("--inbetween takes `head,tail`"));
            }
            ImputationSpec::from_sequence(&base, make_inbetween_mask(n, f[0], f[1]).map_err(usage)?)
                .map_err(rt)?
        }
        (None, Some(file), None) => {
            require_path(file, "--keyframes")?;
            let keys = read_keyframes(file, &base)?;
            ImputationSpec::from_keyframes(n, base.channels(), &keys).map_err(usage)?
        }
        (None, None, Some(r)) => {
            let mask = make_keyframe_mask(n, base.fps, r, a.seed).map_err(usage)?;
            ImputationSpec::from_sequence(&base, mask).map_err(rt)?
        }
        _ => {
            return Err(usage(
                "give exactly one of --inbetween, --keyframes, --keyframe-rate",
            ))
        }
    };
    let (audio, _) = audio_for(&model, &a.features, Some(n))?;
    let schedule = model.schedule().map_err(rt)?;
    let guidance = GuidanceConfig::new(a.scale).map_err(usage)?;
    let zeros = || Tensor::zeros(&[n, model.arch().audio_in]);
    let (seq, boundary) = match model.variant() {
        Variant::Facial => {
            let style = style_of(&model, &a.subject)?;
            let cond = match audio {
                Some(x) => ConditionSet::new(x, style),
                None => ConditionSet::new(zeros(), style).null(),
            };
            let opts = EditOptions {
                final_replacement: !a.no_final_replacement,
                fps: base.fps,
                ..EditOptions::default()
            };
            let o = edit_facial(&model, &schedule, &spec, &cond, guidance, a.seed, &opts)
                .map_err(rt)?;
            (o.sequence, o.boundary)
        }
        Variant::Head => {
            let opts = HeadOptions {
                mode: match a.mode {
                    ModeArg::Guided => ImputationMode::Guided,
                    ModeArg::Replacement => ImputationMode::Replacement,
                },
                fps: base.fps,
                ..HeadOptions::default()
            };
            let audio = audio.unwrap_or_else(zeros);
            let o = sample_head_sgdiff(&model, &schedule, &audio, &spec, guidance, a.seed, &opts)
                .map_err(rt)?;
            (o.sequence, o.boundary)
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(rt)?;
    }
    write_sequence(&a.out, &seq).map_err(rt)?;
    let known: Vec<usize> = (0..n).filter(|&i| spec.mask()[i] == 1.0).collect();
    let report = json!({
        "output": a.out.display().to_string(),
        "frames": n,
        "known_frames": known.len(),
        "keyframes": known,
        "seed": a.seed,
        "scale": a.scale,
        "boundary": boundary,
    });
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.out.with_extension("report.json"));
    fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap()).map_err(rt)?;
    if boundary.warning {
        eprintln!(
            "warning: boundary step is {:.2}x the median generated step",
            boundary.ratio.unwrap_or(f64::NAN)
        );
    }
    println!("wrote {} and {}", a.out.display(), report_path.display());
    Ok(())
}

fn region_for(arg: &str, seq: &MotionSequence) -> Result<Vec<usize>> {
    match arg {
        "all" => Ok((0..seq.channels()).collect()),
        "lip" if seq.kind == MotionKind::Face => Ok(lip_region(seq.channels() / 3)),
        "lip" => Ok((0..seq.channels()).collect()),
        file => {
            let p = Path::new(file);
            require_path(p, "--region")?;
            fs::read_to_string(p)
                .map_err(rt)?
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| usage(format!("--region: `{t}` is not a channel index")))
                })
                .collect()
        }
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    require_path(&a.pred, "--pred")?;
    require_path(&a.gt, "--gt")?;
    let pred = read_sequence(&a.pred).map_err(rt)?;
    let gt = read_sequence(&a.gt).map_err(rt)?;
    let region = region_for(&a.region, &gt)?;
    let lip = metrics::lip_sync_dtw(&pred, &gt, &region).map_err(rt)?;
    let beat_align = if gt.kind == MotionKind::Head && pred.kind == MotionKind::Head {
        let bg = metrics::detect_beats(&gt).map_err(rt)?;
        let bp = metrics::detect_beats(&pred).map_err(rt)?;
        if bg.is_empty() {
            None
        } else {
            Some(metrics::beat_align(&bp, &bg, a.sigma).map_err(rt)?)
        }
    } else {
        None
    };
    let div = if a.samples.is_empty() {
        None
    } else {
        let mut set = vec![pred.clone()];
        for p in &a.samples {
            require_path(p, "--samples")?;
            set.push(read_sequence(p).map_err(rt)?);
        }
        Some(metrics::diversity(&set).map_err(rt)?)
    };
    let report = MetricReport {
        lip_sync: Some(lip),
        div,
        beat_align,
        metadata: ReportMeta {
            sigma: a.sigma,
            region,
            samples: if a.samples.is_empty() {
                0
            } else {
                a.samples.len() + 1
            },
            frames: gt.frames(),
        },
    };
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()).map_err(rt)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs, run_dir: Option<PathBuf>) -> Result<()> {
    let models = match (&a.models, &run_dir) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join("models"),
        (None, None) => return Err(usage("--models is required without a run directory")),
    };
    require_path(&models, "--models")?;
    if let Some(d) = &a.data {
        require_path(d, "--data")?;
    }
    let store = Store::scan(&models, a.data.as_deref()).map_err(rt)?;
    let state = AppState::new(store, JobRegistry::new(run_dir));
    let runtime = tokio::runtime::Runtime::new().map_err(rt)?;
    eprintln!("listening on {}", a.addr);
    runtime.block_on(service::serve(a.addr, state)).map_err(rt)
}
