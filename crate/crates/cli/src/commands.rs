use std::path::{Path, PathBuf};

use anyhow::Context;
use magread::dataio::{
    parse_session, select_eye, windowize_with_eye, export_windows, NormStats, Session, WindowMode, WINDOW_LEN,
};
use magread::eval::{loso_evaluate, Pipeline};
use magread::model::{load_checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
use magread::synth::generate_dataset;
use magread::train::{
    finetune, gaze_examples, labeled_examples, pretext_examples, pretrain, supervised_train, EpochRecord, Stage,
    TrainOutcome, HISTORY_FILE,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{manifest_path_for_file, RunManifest};
use crate::{EvalArgs, GenArgs, PipelineArg, PrepArgs, PrepMode, TrainArgs, TrainMode, Usage};

/// Session files in `dir`, sorted by name.
pub fn session_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Usage(format!("cannot read data directory {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.with_context(|| format!("listing {}", dir.display()))?.path();
        if path.extension().is_some_and(|e| e == "session") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(magread::Error::Dataset(format!("no .session files in {}", dir.display())).into());
    }
    Ok(files)
}

pub fn load_sessions(dir: &Path) -> anyhow::Result<(Vec<Session>, Vec<PathBuf>)> {
    let files = session_files(dir)?;
    let sessions = files
        .iter()
        .map(|p| parse_session(p).with_context(|| format!("parsing {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((sessions, files))
}

pub fn gen(args: GenArgs) -> anyhow::Result<()> {
    let mut synth = RunConfig::load(args.config.as_deref())?.synth;
    if let Some(v) = args.seed {
        synth.seed = v;
    }
    if let Some(v) = args.subjects {
        synth.n_subjects = v;
    }
    if let Some(v) = args.session_len {
        synth.session_len = v;
    }
    if let Some(v) = args.magnification {
        synth.magnification = v;
    }
    synth.validate()?;
    let files = generate_dataset(&synth, &args.out)?;
    let mut manifest = RunManifest::new("gen", synth.seed, &synth)?;
    for f in &files {
        manifest.artifact(&args.out, f)?;
    }
    manifest.write(&args.out.join("run.json"))?;
    println!("wrote {} sessions to {}", files.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct PrepSettings {
    stride: usize,
    mode: &'static str,
}

pub fn prep(args: PrepArgs) -> anyhow::Result<()> {
    if args.stride == 0 {
        return Err(Usage("--stride must be at least 1".into()).into());
    }
    let (sessions, files) = load_sessions(&args.data)?;
    let mode = match args.mode {
        PrepMode::Labeled => WindowMode::Labeled,
        PrepMode::Pretext => WindowMode::Pretext,
    };
    println!(
        "{:<28} {:>5} {:>8} {:>8} {:>8} {:>8}",
        "session", "eye", "samples", "missing", "slots", "windows"
    );
    let mut windows = Vec::new();
    for (s, path) in sessions.iter().zip(&files) {
        let eye = select_eye(&s.gaze).with_context(|| format!("calibrating {}", path.display()))?;
        let mut w = windowize_with_eye(s, eye, args.stride, mode)?;
        if mode == WindowMode::Pretext {
            w.retain(|w| w.vel_target.is_some());
        }
        let n = s.gaze.len();
        let slots = if n >= WINDOW_LEN { (n - WINDOW_LEN) / args.stride + 1 } else { 0 };
        let missing = s.gaze.iter().filter(|g| g.eye(eye).is_none()).count();
        println!(
            "{:<28} {:>5} {:>8} {:>7.1}% {:>8} {:>8}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            format!("{eye:?}").to_lowercase(),
            n,
            100.0 * missing as f64 / n.max(1) as f64,
            slots,
            w.len()
        );
        windows.extend(w);
    }
    let stats = NormStats::fit(&windows);
    export_windows(&args.out, &windows, Some(&stats))?;
    println!("exported {} windows to {}", windows.len(), args.out.display());

    let settings = PrepSettings {
        stride: args.stride,
        mode: match args.mode {
            PrepMode::Labeled => "labeled",
            PrepMode::Pretext => "pretext",
        },
    };
    let mut manifest = RunManifest::new("prep", 0, &settings)?;
    for f in &files {
        manifest.input(f)?;
    }
    let root = args.out.parent().unwrap_or(Path::new("."));
    manifest.artifact(root, &args.out)?;
    manifest.write(&manifest_path_for_file(&args.out))
}

fn print_history(history: &[EpochRecord]) {
    for r in history {
        let f1 = r.f1.map(|f| format!(" macro F1 {f:.2}")).unwrap_or_default();
        eprintln!("{} epoch {} {}: loss {:.5}{f1}", r.stage.as_str(), r.epoch, r.split, r.loss);
    }
}

fn read_history(path: &Path) -> anyhow::Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn require_checkpoint(dir: &Path) -> anyhow::Result<()> {
    if !dir.join(MANIFEST_FILE).is_file() || !dir.join(WEIGHTS_FILE).is_file() {
        return Err(Usage(format!("{} is not a checkpoint directory", dir.display())).into());
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let (mut cfg, stage) = match args.mode {
        TrainMode::Pretrain => (run.pretrain.0.clone(), Stage::Pretext),
        TrainMode::Finetune => (run.train.clone(), Stage::Finetune),
        TrainMode::Supervised => (run.train.clone(), Stage::Supervised),
    };
    cfg.stage = stage;
    args.overrides.apply(&mut cfg);
    match (&args.from, args.mode) {
        (None, TrainMode::Finetune) => return Err(Usage("finetune requires --from CHECKPOINT".into()).into()),
        (Some(_), TrainMode::Pretrain | TrainMode::Supervised) => {
            return Err(Usage("--from only applies to --mode finetune".into()).into())
        }
        _ => {}
    }
    cfg.validate()?;
    let (sessions, files) = load_sessions(&args.data)?;

    let mut earlier = Vec::new();
    let outcome: TrainOutcome = match args.mode {
        TrainMode::Pretrain => pretrain(&pretext_examples(&sessions, cfg.stride)?, &cfg)?,
        TrainMode::Supervised => supervised_train(&labeled_examples(&sessions, cfg.stride)?, &cfg)?,
        TrainMode::Finetune => {
            let from = args.from.as_deref().expect("checked above");
            require_checkpoint(from)?;
            let (params, stats) = load_checkpoint(from)?;
            let stats = stats.ok_or_else(|| {
                magread::Error::Checkpoint(format!("{} has no normalization statistics", from.display()))
            })?;
            if args.overrides.input_mode.is_none() {
                cfg.input_mode = params.input_mode;
            }
            cfg.model = params.config.clone();
            let history = from.join(HISTORY_FILE);
            if history.is_file() {
                earlier = read_history(&history)?;
            }
            finetune(&params, &stats, &gaze_examples(&sessions, cfg.stride)?, &cfg)?
        }
    };
    print_history(&outcome.history);
    let full = TrainOutcome {
        history: earlier.into_iter().chain(outcome.history.iter().cloned()).collect(),
        ..outcome
    };
    full.write(&args.out)?;
    eprintln!(
        "kept epoch {} ({} parameters) in {}",
        full.best_epoch,
        full.params.param_count(),
        args.out.display()
    );

    let mut manifest = RunManifest::new(&format!("train {}", cfg.stage.as_str()), cfg.seed, &cfg)?;
    for f in &files {
        manifest.input(f)?;
    }
    if let Some(from) = &args.from {
        for name in [MANIFEST_FILE, WEIGHTS_FILE] {
            let sum = crate::manifest::sha256_file(&from.join(name))?;
            manifest.inputs.insert(format!("from/{name}"), sum);
        }
    }
    for name in [MANIFEST_FILE, WEIGHTS_FILE, HISTORY_FILE] {
        manifest.artifact(&args.out, &args.out.join(name))?;
    }
    manifest.write(&args.out.join("run.json"))
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(args.config.as_deref())?;
    let mut cfg = run.eval_config();
    args.overrides.apply(&mut cfg.train);
    if let Some(seed) = args.overrides.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = args.pretrain_epochs {
        cfg.pretrain.max_epochs = v;
    }
    if let Some(v) = args.pretrain_stride {
        cfg.pretrain.stride = v;
    }
    cfg.pretrain.stage = Stage::Pretext;
    cfg.validate()?;
    let pipeline = match args.pipeline {
        PipelineArg::Supervised => Pipeline::Supervised,
        PipelineArg::SemiPartial => Pipeline::SemiPartial,
        PipelineArg::SemiFull => Pipeline::SemiFull,
        PipelineArg::Random => Pipeline::Random,
    };
    let (sessions, files) = load_sessions(&args.data)?;
    let report = loso_evaluate(&sessions, pipeline, &cfg)?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&args.out, json).with_context(|| format!("writing {}", args.out.display()))?;
    let table = report.table();
    let table_path = args.out.with_extension("txt");
    std::fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    print!("{table}");

    let mut manifest = RunManifest::new(&format!("eval {}", pipeline.as_str()), cfg.seed, &cfg)?;
    for f in &files {
        manifest.input(f)?;
    }
    let root = args.out.parent().unwrap_or(Path::new("."));
    manifest.artifact(root, &args.out)?;
    manifest.artifact(root, &table_path)?;
    manifest.write(&manifest_path_for_file(&args.out))
}
