// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch front end: calibrate → rank-heads → generate / eval.
//!
//! Every stage reads and enriches one JSON profile. Calibration builds the
//! model from the dimension flags; later stages rebuild it from the config
//! stored in the profile, so a profile is self-describing.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hijacklens::eval::{run_ab, EvalKnobs};
use hijacklens::habi::{
    calibrate, identify_inert, write_histogram_csv, CalibrationKnobs, HijackProfile, TauSource,
};
use hijacklens::havae::{build_hook, InterventionSpec, Mode};
use hijacklens::heads::{har, nhar, rank_heads, write_head_csv, HeadId, HeadTableKnobs};
use hijacklens::lens::write_trace_csv;
use hijacklens::model::{
    make_battery, ForwardCapture, ModelConfig, SceneParams, TokenId, ToyScene, ToyTransformer,
};
use hijacklens::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PROFILE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Scene stream used by calibration and head ranking.
pub const CALIBRATION_STREAM: &str = "calibration";
/// Scene stream used by generation and evaluation.
pub const EVAL_STREAM: &str = "eval";

#[derive(Debug, Parser)]
#[command(name = "hijacklens", version, about = "Vocabulary-hijacking analysis on a toy multimodal decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Find hijacking anchors and thresholds; write a fresh profile.
    Calibrate,
    /// Score heads by non-hijacked visual attention; fill the profile's target heads.
    RankHeads,
    /// Decode scenes with and without the intervention; dump the tokens.
    Generate,
    /// Run the baseline-vs-intervention battery; write JSON and CSV reports.
    Eval,
    /// Write a scene battery as JSON documents into `--scene-dir`.
    MakeScenes,
}

impl Command {
    fn scene_stream(self) -> &'static str {
        match self {
            Command::Calibrate | Command::RankHeads => CALIBRATION_STREAM,
            _ => EVAL_STREAM,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Number of generated scenes (ignored with --scene-dir).
    #[arg(long, global = true, default_value_t = 50)]
    pub scenes: usize,
    #[arg(long, global = true, env = "HIJACKLENS_SEED", default_value_t = 42)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, global = true, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, global = true, default_value_t = 32)]
    pub dmodel: usize,
    #[arg(long, global = true, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, global = true, default_value_t = 16)]
    pub nvision: usize,
    #[arg(long, global = true, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, global = true, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long, global = true, default_value_t = 8)]
    pub k: usize,
    #[arg(long = "iqr-mult", global = true, default_value_t = 1.5)]
    pub iqr_mult: f64,
    #[arg(long = "salient-frac", global = true, default_value_t = 0.05)]
    pub salient_frac: f64,
    #[arg(long = "skip-salient", global = true)]
    pub skip_salient: bool,
    #[arg(long, global = true)]
    pub renormalize: bool,
    /// Rank heads over every generated object, not just true ones.
    #[arg(long = "no-gt", global = true)]
    pub no_gt: bool,
    /// Steps of the persistent attention set.
    #[arg(long, global = true, default_value_t = hijacklens::heads::DEFAULT_T)]
    pub t: usize,
    /// Per-step top-K of the persistent attention set.
    #[arg(long, global = true, default_value_t = hijacklens::heads::DEFAULT_K_TOP)]
    pub ktop: usize,
    /// Also dump lens traces (calibrate) or per-step HAR/NHAR (generate).
    #[arg(long, global = true)]
    pub trace: bool,
    /// Directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Profile path; defaults to `<out>/profile.json`.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    /// Intervention: compose, enhance, penalize or zero_ablate.
    #[arg(long, global = true, default_value = "compose")]
    pub mode: String,
    #[arg(long = "max-new", global = true, default_value_t = 10)]
    pub max_new: usize,
    /// Compare HABI against the persistent attention set in eval.
    #[arg(long = "compare-persist", global = true)]
    pub compare_persist: bool,
    /// Population for the anchor threshold: all_scores or anchor_means.
    #[arg(long = "tau-source", global = true, default_value = "all_scores")]
    pub tau_source: String,
    /// Read scenes from (or, for make-scenes, write them to) this directory.
    #[arg(long = "scene-dir", global = true)]
    pub scene_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn profile_path(&self) -> PathBuf {
        self.profile.clone().unwrap_or_else(|| self.out.join("profile.json"))
    }

    pub fn model_config(&self) -> hijacklens::Result<ModelConfig> {
        ModelConfig::with_dims(self.layers, self.heads, self.dmodel, self.vocab, self.nvision, self.seed)
    }

    fn mode(&self) -> hijacklens::Result<Mode> {
        self.mode.parse()
    }

    fn tau_source(&self) -> hijacklens::Result<TauSource> {
        match self.tau_source.as_str() {
            "all_scores" => Ok(TauSource::AllScores),
            "anchor_means" => Ok(TauSource::AnchorMeans),
            other => Err(Error::Config(format!("unknown tau source {other:?}"))),
        }
    }

    fn eval_knobs(&self) -> hijacklens::Result<EvalKnobs> {
        Ok(EvalKnobs {
            mode: self.mode()?,
            alpha: self.alpha,
            beta: self.beta,
            renormalize: self.renormalize,
            max_new: self.max_new,
            compare_persist: self.compare_persist,
            t: self.t,
            k_top: self.ktop,
        })
    }
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code of a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ProfileIncomplete(_) => EXIT_PROFILE,
        Error::Numeric(_) | Error::Degenerate(_) | Error::UndefinedRatio(_) | Error::DegenerateRow { .. } => {
            EXIT_NUMERIC
        }
        _ => EXIT_USAGE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Load a profile; a malformed or unknown-schema file is a profile error.
pub fn load_profile(path: &Path) -> CliResult<HijackProfile> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    HijackProfile::from_json(&text).map_err(|e| CliError {
        code: match e {
            Error::Json(_) | Error::Validation(_) => EXIT_PROFILE,
            ref other => exit_code(other),
        },
        message: format!("{}: {e}", path.display()),
    })
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> hijacklens::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    let text = String::from_utf8(buf).expect("CSV writers emit UTF-8");
    write_file(path, &text)
}

fn read_scene_dir(dir: &Path) -> CliResult<Vec<ToyScene>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError {
            code: EXIT_USAGE,
            message: format!("{}: no scene files", dir.display()),
        });
    }
    paths
        .iter()
        .map(|p| {
            ToyScene::load(p).map_err(|e| CliError {
                code: EXIT_USAGE,
                message: format!("{}: {e}", p.display()),
            })
        })
        .collect()
}

fn check_scenes(scenes: &[ToyScene], cfg: &ModelConfig) -> CliResult<()> {
    for s in scenes {
        if s.embeddings.dim() != (cfg.n_vision, cfg.d_model) {
            return Err(CliError {
                code: EXIT_USAGE,
                message: format!(
                    "scene {} has shape {:?}, model expects ({}, {})",
                    s.id,
                    s.embeddings.dim(),
                    cfg.n_vision,
                    cfg.d_model
                ),
            });
        }
    }
    Ok(())
}

fn load_scenes(run: &RunConfig, model: &ToyTransformer, stream: &str) -> CliResult<Vec<ToyScene>> {
    let scenes = match &run.scene_dir {
        Some(dir) => read_scene_dir(dir)?,
        None => {
            if run.scenes == 0 {
                return Err(Error::Config("--scenes must be >= 1".into()).into());
            }
            make_battery(model, &SceneParams::default(), run.scenes, run.seed, stream)?
        }
    };
    check_scenes(&scenes, model.config())?;
    Ok(scenes)
}

fn model_from_profile(profile: &HijackProfile) -> CliResult<ToyTransformer> {
    Ok(ToyTransformer::new(profile.meta.model)?)
}

/// What a command produced, for the one-line summary on stdout.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub summary: String,
    pub warning: Option<String>,
}

pub fn run(command: Command, run: &RunConfig) -> CliResult<Outcome> {
    match command {
        Command::Calibrate => cmd_calibrate(run),
        Command::RankHeads => cmd_rank_heads(run),
        Command::Generate => cmd_generate(run),
        Command::Eval => cmd_eval(run),
        Command::MakeScenes => cmd_make_scenes(run),
    }
}

pub fn cmd_calibrate(run: &RunConfig) -> CliResult<Outcome> {
    let model = ToyTransformer::new(run.model_config()?)?;
    let knobs = CalibrationKnobs {
        iqr_multiplier: run.iqr_mult,
        salient_fraction: run.salient_frac,
        skip_salient_filter: run.skip_salient,
        tau_s_source: run.tau_source()?,
        max_new: run.max_new,
        alpha: run.alpha,
        ..CalibrationKnobs::default()
    };
    knobs.validate()?;
    let scenes = load_scenes(run, &model, Command::Calibrate.scene_stream())?;
    let cal = calibrate(&scenes, &model, &knobs, run.seed)?;

    let profile_path = run.profile_path();
    write_file(&profile_path, &cal.profile.to_json()?)?;
    let hist = run.out.join("histogram.csv");
    write_with(&hist, |w| write_histogram_csv(w, &cal, knobs.otsu_bins))?;
    let mut written = vec![profile_path, hist];
    if run.trace {
        let rows: Vec<(u64, _)> = cal
            .observations
            .iter()
            .flat_map(|o| o.traces.iter().map(move |t| (o.scene_id, t.clone())))
            .collect();
        let path = run.out.join("traces.csv");
        write_with(&path, |w| write_trace_csv(w, &rows))?;
        written.push(path);
    }
    let p = &cal.profile;
    Ok(Outcome {
        summary: format!(
            "calibrated on {} scenes: {} anchors, tau_s {:.4}, tau_r {:.4}",
            scenes.len(),
            p.anchors.len(),
            p.tau_s.unwrap_or(f64::NAN),
            p.tau_r.unwrap_or(f64::NAN)
        ),
        warning: p.meta.warning.clone(),
        written,
    })
}

pub fn cmd_rank_heads(run: &RunConfig) -> CliResult<Outcome> {
    let profile_path = run.profile_path();
    let profile = load_profile(&profile_path)?;
    let model = model_from_profile(&profile)?;
    let scenes = load_scenes(run, &model, Command::RankHeads.scene_stream())?;
    let knobs = HeadTableKnobs {
        no_gt: run.no_gt,
        ..HeadTableKnobs::default()
    };
    let (ranked, table) = rank_heads(&scenes, &model, &profile, run.k, run.max_new, knobs)?;
    write_file(&profile_path, &ranked.to_json()?)?;
    let csv = run.out.join("heads.csv");
    write_with(&csv, |w| write_head_csv(w, &table))?;
    let heads: Vec<String> = ranked.h_target.iter().map(|(l, h)| format!("L{l}H{h}")).collect();
    Ok(Outcome {
        summary: format!("ranked {} heads, targets {}", table.scores.len(), heads.join(" ")),
        written: vec![profile_path, csv],
        warning: None,
    })
}

#[derive(Debug, Serialize)]
struct StepTrace {
    token: TokenId,
    /// Mean HAR over heads where it is defined.
    har: Option<f64>,
    /// Mean NHAR over the target heads.
    nhar: f64,
}

#[derive(Debug, Serialize)]
struct SceneGeneration {
    scene_id: u64,
    true_objects: Vec<TokenId>,
    inert: Vec<usize>,
    baseline: Vec<TokenId>,
    intervened: Vec<TokenId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_steps: Option<Vec<StepTrace>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intervened_steps: Option<Vec<StepTrace>>,
}

#[derive(Debug, Serialize)]
struct GenerationDump {
    seed: u64,
    mode: Mode,
    alpha: f64,
    beta: f64,
    renormalize: bool,
    h_target: Vec<(usize, usize)>,
    scenes: Vec<SceneGeneration>,
}

fn step_traces(
    captures: &[ForwardCapture],
    tokens: &[TokenId],
    targets: &[HeadId],
    inert: &BTreeSet<usize>,
) -> hijacklens::Result<Vec<StepTrace>> {
    captures
        .iter()
        .zip(tokens)
        .map(|(cap, &token)| {
            let all = HeadId::all(cap.n_layers(), cap.n_heads());
            let mut hars = Vec::new();
            for &h in &all {
                match har(cap, h, inert) {
                    Ok(v) => hars.push(v),
                    Err(Error::UndefinedRatio(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let heads = if targets.is_empty() { &all } else { targets };
            let nh = heads.iter().map(|&h| nhar(cap, h, inert)).sum::<f64>() / heads.len() as f64;
            Ok(StepTrace {
                token,
                har: (!hars.is_empty()).then(|| hars.iter().sum::<f64>() / hars.len() as f64),
                nhar: nh,
            })
        })
        .collect()
}

pub fn cmd_generate(run: &RunConfig) -> CliResult<Outcome> {
    let profile = load_profile(&run.profile_path())?;
    let model = model_from_profile(&profile)?;
    let mode = run.mode()?;
    let scenes = load_scenes(run, &model, Command::Generate.scene_stream())?;
    let mut out = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let input = scene.input(&model);
        let vision = Some(scene.embeddings.view());
        let base = model.generate_greedy(&input, vision, run.max_new, None)?;
        let inert = identify_inert(&base.captures, &model, &profile)?;
        let mut spec = InterventionSpec::from_profile(&profile, mode, run.beta, run.renormalize)
            .with_inert(inert.clone());
        spec.alpha = run.alpha;
        let hook = build_hook(&spec, &profile)?;
        let int = model.generate_greedy(&input, vision, run.max_new, Some(hook.as_ref()))?;
        let (baseline_steps, intervened_steps) = if run.trace {
            let set: BTreeSet<usize> = inert.iter().copied().collect();
            (
                Some(step_traces(&base.captures, &base.tokens, &spec.h_target, &set)?),
                Some(step_traces(&int.captures, &int.tokens, &spec.h_target, &set)?),
            )
        } else {
            (None, None)
        };
        out.push(SceneGeneration {
            scene_id: scene.id,
            true_objects: scene.true_objects.clone(),
            inert,
            baseline: base.tokens,
            intervened: int.tokens,
            baseline_steps,
            intervened_steps,
        });
    }
    let changed = out.iter().filter(|s| s.baseline != s.intervened).count();
    let dump = GenerationDump {
        seed: run.seed,
        mode,
        alpha: run.alpha,
        beta: run.beta,
        renormalize: run.renormalize,
        h_target: profile.h_target.clone(),
        scenes: out,
    };
    let path = run.out.join("generations.json");
    let mut text = serde_json::to_string_pretty(&dump).map_err(Error::from)?;
    text.push('\n');
    write_file(&path, &text)?;
    Ok(Outcome {
        summary: format!("{mode}: {changed}/{} scenes changed", dump.scenes.len()),
        written: vec![path],
        warning: None,
    })
}

pub fn cmd_eval(run: &RunConfig) -> CliResult<Outcome> {
    let profile = load_profile(&run.profile_path())?;
    let model = model_from_profile(&profile)?;
    let knobs = run.eval_knobs()?;
    let scenes = load_scenes(run, &model, Command::Eval.scene_stream())?;
    let report = run_ab(&scenes, &model, &profile, &knobs, run.seed)?;
    let json = run.out.join("eval.json");
    write_file(&json, &report.to_json()?)?;
    let csv = run.out.join("eval.csv");
    write_with(&csv, |w| report.write_csv(w))?;
    Ok(Outcome {
        summary: format!(
            "CHAIR_S {:.3} -> {:.3}, CHAIR_I {:.3} -> {:.3}, inert share reduced on {}/{} scenes",
            report.baseline.chair_s,
            report.intervened.chair_s,
            report.baseline.chair_i,
            report.intervened.chair_i,
            report.inert_share_reduced,
            report.inert_share_compared
        ),
        written: vec![json, csv],
        warning: None,
    })
}

pub fn cmd_make_scenes(run: &RunConfig) -> CliResult<Outcome> {
    let dir = run.scene_dir.as_ref().ok_or_else(|| CliError {
        code: EXIT_USAGE,
        message: "make-scenes needs --scene-dir".into(),
    })?;
    if run.scenes == 0 {
        return Err(Error::Config("--scenes must be >= 1".into()).into());
    }
    let model = ToyTransformer::new(run.model_config()?)?;
    let scenes = make_battery(&model, &SceneParams::default(), run.scenes, run.seed, EVAL_STREAM)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let path = dir.join(format!("scene_{:05}.json", s.id));
        write_file(&path, &s.to_json()?)?;
        written.push(path);
    }
    Ok(Outcome {
        summary: format!("wrote {} scenes to {}", scenes.len(), dir.display()),
        written,
        warning: None,
    })
}

/// Parse-free entry point used by `main` and the tests.
pub fn main_with(cli: &Cli) -> u8 {
    match run(cli.command, &cli.run) {
        Ok(o) => {
            if let Some(w) = &o.warning {
                eprintln!("warning: {w}");
            }
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", o.summary);
            for p in &o.written {
                let _ = writeln!(out, "  {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
