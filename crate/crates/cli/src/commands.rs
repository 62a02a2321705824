use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use microid::data::{load_clip, load_clips, split_dataset, DatasetManifest, ManifestOptions};
use microid::ensemble::{evaluate_members, EnsembleSpec, VotingPolicy};
use microid::evaluation::evaluate_model;
use microid::gradcam::{compute_gradcam, render_overlays, save_overlays, save_raw_map};
use microid::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Pathway};
use microid::presets::Preset;
use microid::seed;
use microid::synth::{generate_dataset, static_baseline_accuracy, Pairing, SynthConfig};
use microid::training::{default_grid, grid_search, train_model, GridCell, GridPoint, Solver, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::config::{self, data_config, fit_to_data, model_and_solver, preset_for, with_overrides, DataConfig};
use crate::{BaselineArgs, Cli, Command, EvalArgs, GradcamArgs, GridArgs, SynthArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    ensure!(cli.jobs >= 1, "--jobs must be at least 1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .context("starting worker pool")?;
    let file = cli.config.as_deref();
    let root = cli.data_root.as_deref();
    match &cli.command {
        Command::Synth(a) => synth(a, file),
        Command::Train(a) => train(a, file, root),
        Command::Grid(a) => grid(a, file, root, cli.jobs),
        Command::Eval(a) => eval(a, file, root),
        Command::Gradcam(a) => gradcam(a, file, root),
        Command::Baseline(a) => baseline(a, file, root),
    }
}

/// Prints the resolved configuration to stderr and stores it next to the
/// outputs.
fn echo<T: Serialize>(run: &T, out_dir: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(run)?;
    eprintln!("configuration:\n{text}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("run_config.json"), &text)?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset_name(manifest: &DatasetManifest) -> String {
    manifest.entries.first().map(|e| e.dataset_name.clone()).unwrap_or_default()
}

/// One-row accuracy table in the style of the per-database results.
fn accuracy_table(columns: &[(String, f64)]) -> String {
    let head: Vec<String> = columns.iter().map(|(n, _)| format!("{n:>10}")).collect();
    let vals: Vec<String> = columns.iter().map(|(_, a)| format!("{:>9.2}%", a)).collect();
    format!("{:<10} | {}\n{:<10} | {}\n", "Model", head.join(" | "), "SlowFast", vals.join(" | "))
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthRun {
    out_dir: Option<PathBuf>,
    synth: SynthConfig,
}

fn synth(args: &SynthArgs, file: Option<&Path>) -> Result<()> {
    let mut cfg = SynthConfig { seed: args.seed, ..SynthConfig::default() };
    let (paths, pairing) = match (args.paths, args.subjects) {
        (None, None) => (cfg.num_paths, cfg.pairing),
        (Some(p), None) => (p, cfg.pairing),
        (None, Some(k)) if k % 2 == 0 => (k / 2, Pairing::ForwardReverse),
        (None, Some(k)) => (k, Pairing::DistinctPaths),
        (Some(p), Some(k)) if k == 2 * p => (p, Pairing::ForwardReverse),
        (Some(p), Some(k)) if k == p => (p, Pairing::DistinctPaths),
        (Some(p), Some(k)) => bail!("{k} subjects cannot be formed from {p} paths (need {p} or {})", 2 * p),
    };
    cfg.num_paths = paths;
    cfg.pairing = pairing;
    if let Some(v) = args.clips_per_subject {
        cfg.clips_per_subject = v;
    }
    if let Some(v) = args.frame_size {
        cfg.frame_size = (v, v);
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.motion_span {
        cfg.motion_span = v;
    }
    if let Some(v) = args.blob_sigma {
        cfg.blob_sigma = v;
    }
    if let Some(v) = args.noise_std {
        cfg.noise_std = v;
    }
    let run = with_overrides(SynthRun { out_dir: args.out_dir.clone(), synth: cfg }, file)?;
    let out_dir = run.out_dir.clone().context("missing --out-dir")?;
    run.synth.validate()?;
    echo(&run, Some(&out_dir))?;
    let manifest = generate_dataset(&run.synth, &out_dir)?;
    println!(
        "wrote {} clips of {} frames for {} subjects to {}",
        manifest.len(),
        run.synth.window,
        manifest.num_classes(),
        out_dir.display()
    );
    println!("manifest: {}", out_dir.join("manifest.jsonl").display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainRun {
    out_dir: PathBuf,
    preset: Preset,
    data: DataConfig,
    model: ModelConfig,
    solver: SolverConfig,
}

/// Resolves preset, flags and config file into validated data, model and
/// solver settings plus the loaded manifest.
fn resolve_training(
    data_args: &crate::DataArgs,
    model_args: &crate::ModelArgs,
    root: Option<&Path>,
) -> Result<(Preset, DataConfig, ModelConfig, SolverConfig)> {
    let mut data = data_config(data_args, root, model_args.seed);
    let preset = preset_for(model_args, &data.manifest)?;
    let (model, solver) = model_and_solver(model_args, preset)?;
    data.window = model.input_shape.frames;
    data.channels = model.input_shape.channels;
    Ok((preset, data, model, solver))
}

fn prepare(
    data: &DataConfig,
    model: &mut ModelConfig,
    solver: &SolverConfig,
) -> Result<DatasetManifest> {
    solver.validate()?;
    let manifest = data.load_manifest()?;
    fit_to_data(model, data, &manifest);
    model.validate()?;
    Ok(manifest)
}

fn train(args: &TrainArgs, file: Option<&Path>, root: Option<&Path>) -> Result<()> {
    let (preset, data, model, solver) = resolve_training(&args.data, &args.model, root)?;
    let mut run = with_overrides(TrainRun { out_dir: args.out_dir.clone(), preset, data, model, solver }, file)?;
    let manifest = prepare(&run.data, &mut run.model, &run.solver)?;
    echo(&run, Some(&run.out_dir))?;

    let (train_m, test_m) = split_dataset(&manifest, run.data.split_ratio, run.data.split_seed)?;
    eprintln!("loading {} training and {} test clips", train_m.len(), test_m.len());
    let train_clips = load_clips(&train_m, run.data.window, run.data.channels)?;
    let test_clips = load_clips(&test_m, run.data.window, run.data.channels)?;
    let (model, report) = train_model(&run.model, &run.solver, &train_clips, &test_clips)?;
    for e in &report.epochs {
        eprintln!("epoch {:>3}  loss {:.4}  train {:.2}%", e.epoch + 1, e.mean_loss, e.train_accuracy);
    }

    let ckpt = run.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    write(&run.out_dir.join("train_report.json"), &serde_json::to_string_pretty(&report)?)?;
    let eval = evaluate_model(&model, &test_clips)?;
    write(&run.out_dir.join("eval_report.json"), &eval.to_json()?)?;

    print!("{}", accuracy_table(&[(dataset_name(&manifest), eval.rank1)]));
    print!("{eval}");
    println!("fingerprint: {}", model.fingerprint());
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// Axes of a grid; a missing axis keeps the template value.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridAxes {
    #[serde(default)]
    alpha: Option<Vec<usize>>,
    #[serde(default)]
    beta: Option<Vec<f64>>,
    #[serde(default)]
    solver: Option<Vec<Solver>>,
    #[serde(default)]
    batch_size: Option<Vec<usize>>,
}

impl GridAxes {
    fn points(&self, model: &ModelConfig, solver: &SolverConfig) -> Vec<GridPoint> {
        let alphas = self.alpha.clone().unwrap_or_else(|| vec![model.alpha]);
        let betas = self.beta.clone().unwrap_or_else(|| vec![model.beta]);
        let solvers = self.solver.clone().unwrap_or_else(|| vec![solver.solver]);
        let batches = self.batch_size.clone().unwrap_or_else(|| vec![solver.batch_size]);
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta in &betas {
                for &kind in &solvers {
                    for &batch_size in &batches {
                        out.push(GridPoint {
                            model: ModelConfig { alpha, beta, ..model.clone() },
                            solver: SolverConfig { solver: kind, batch_size, ..solver.clone() },
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRun {
    out_dir: PathBuf,
    preset: Preset,
    data: DataConfig,
    /// Share of the training partition used for fitting.
    fit_ratio: f64,
    root_seed: u64,
    model: ModelConfig,
    solver: SolverConfig,
    /// `None` runs the standard 16-cell grid.
    axes: Option<GridAxes>,
}

fn grid(args: &GridArgs, file: Option<&Path>, root: Option<&Path>, jobs: usize) -> Result<()> {
    let (preset, data, model, solver) = resolve_training(&args.data, &args.model, root)?;
    let axes = match &args.grid {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(serde_json::from_str::<GridAxes>(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => None,
    };
    let run = GridRun {
        out_dir: args.out_dir.clone(),
        preset,
        data,
        fit_ratio: args.fit_ratio,
        root_seed: args.model.seed,
        model,
        solver,
        axes,
    };
    let mut run = with_overrides(run, file)?;
    let manifest = prepare(&run.data, &mut run.model, &run.solver)?;
    let points = match &run.axes {
        Some(axes) => axes.points(&run.model, &run.solver),
        None => default_grid(&run.model, &run.solver),
    };
    ensure!(!points.is_empty(), "the grid has no cells");

    if args.dry_run {
        eprintln!("{} cells (dry run)", points.len());
        println!("{:<16} {:>5} {:>8} {:>6} {:>5}", "cell", "alpha", "beta", "solver", "batch");
        for p in &points {
            println!(
                "{:<16} {:>5} {:>8.5} {:>6} {:>5}",
                p.cell_id(),
                p.model.alpha,
                p.model.beta,
                p.solver.solver.name(),
                p.solver.batch_size
            );
        }
        return Ok(());
    }
    echo(&run, Some(&run.out_dir))?;

    let (train_m, _) = split_dataset(&manifest, run.data.split_ratio, run.data.split_seed)?;
    let (fit_m, val_m) = split_dataset(&train_m, run.fit_ratio, seed::derive(run.data.split_seed, &[1]))?;
    eprintln!("{} cells, {} fitting and {} validation clips", points.len(), fit_m.len(), val_m.len());
    let fit = load_clips(&fit_m, run.data.window, run.data.channels)?;
    let val = load_clips(&val_m, run.data.window, run.data.channels)?;
    let cells = grid_search(&points, &fit, &val, run.root_seed, jobs, Some(&run.out_dir.join("checkpoints")))?;
    write(&run.out_dir.join("ranking.json"), &serde_json::to_string_pretty(&cells)?)?;
    print_ranking(&cells);
    Ok(())
}

fn print_ranking(cells: &[GridCell]) {
    println!("{:>4} {:<16} {:>5} {:>8} {:>6} {:>5} {:>9}", "rank", "cell", "alpha", "beta", "solver", "batch", "rank-1");
    for (i, c) in cells.iter().enumerate() {
        let acc = match (c.accuracy, &c.error) {
            (Some(a), _) => format!("{a:>8.2}%"),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "-".into(),
        };
        println!(
            "{:>4} {:<16} {:>5} {:>8.5} {:>6} {:>5} {}",
            i + 1,
            c.cell_id,
            c.model.alpha,
            c.model.beta,
            c.solver.solver.name(),
            c.solver.batch_size,
            acc
        );
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Partition {
    Train,
    Test,
    All,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalRun {
    manifest: PathBuf,
    split_ratio: f64,
    split_seed: u64,
    partition: Partition,
    /// Resize target; `None` uses the first member's input size.
    target_size: Option<(usize, usize)>,
    members: Vec<PathBuf>,
    policy: VotingPolicy,
    out: Option<PathBuf>,
}

fn eval(args: &EvalArgs, file: Option<&Path>, root: Option<&Path>) -> Result<()> {
    let (members, policy) = match (&args.checkpoint, &args.ensemble, &args.members) {
        (Some(c), None, None) => (vec![c.clone()], VotingPolicy::Soft),
        (None, Some(spec), None) => {
            let spec = EnsembleSpec::load(spec)?;
            (spec.members, spec.policy)
        }
        (None, None, Some(list)) => (list.clone(), VotingPolicy::Soft),
        (None, None, None) => bail!("give --checkpoint, --ensemble or --members"),
        _ => bail!("--checkpoint, --ensemble and --members are mutually exclusive"),
    };
    let members = match &args.subset {
        Some(idx) => idx
            .iter()
            .map(|&i| members.get(i).cloned().with_context(|| format!("member index {i} out of range")))
            .collect::<Result<Vec<_>>>()?,
        None => members,
    };
    let policy = match &args.policy {
        Some(p) => p.parse()?,
        None => policy,
    };
    let partition = match args.partition.as_str() {
        "train" => Partition::Train,
        "test" => Partition::Test,
        "all" => Partition::All,
        other => bail!("unknown partition {other:?}; use train, test or all"),
    };
    let data = &args.data;
    let run = EvalRun {
        manifest: config::resolve(&data.manifest, root),
        split_ratio: data.split_ratio,
        split_seed: data.split_seed.unwrap_or(args.seed),
        partition,
        target_size: data.size.map(|s| (s, s)),
        members,
        policy,
        out: args.out.clone(),
    };
    let run = with_overrides(run, file)?;
    ensure!(!run.members.is_empty(), "no members selected");
    if args.checkpoint.is_none() {
        EnsembleSpec { members: run.members.clone(), policy: run.policy }.validate()?;
    }
    echo(&run, None)?;

    let models = run
        .members
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<Model>>>()?;
    let first = models[0].config.input_shape;
    for (m, path) in models.iter().zip(&run.members) {
        if m.config.input_shape != first || m.num_classes() != models[0].num_classes() {
            bail!("architecture fingerprint mismatch: {} does not match the first member", path.display());
        }
    }
    let target = run.target_size.unwrap_or((first.height, first.width));
    let manifest = crate::config::DataConfig {
        manifest: run.manifest.clone(),
        split_ratio: run.split_ratio,
        split_seed: run.split_seed,
        target_size: Some(target),
        window: first.frames,
        channels: first.channels,
    }
    .load_manifest()?;
    if manifest.num_classes() != models[0].num_classes() || target != (first.height, first.width) {
        bail!(
            "architecture fingerprint mismatch: {} expects {} classes at {}x{}, data has {} classes at {}x{}",
            models[0].fingerprint(),
            models[0].num_classes(),
            first.height,
            first.width,
            manifest.num_classes(),
            target.0,
            target.1
        );
    }
    let selected = match run.partition {
        Partition::All => manifest.clone(),
        part => {
            let (tr, te) = split_dataset(&manifest, run.split_ratio, run.split_seed)?;
            if matches!(part, Partition::Train) { tr } else { te }
        }
    };
    let clips = load_clips(&selected, first.frames, first.channels)?;
    let name = dataset_name(&manifest);

    let report = if models.len() == 1 {
        let report = evaluate_model(&models[0], &clips)?;
        print!("{}", accuracy_table(&[(name, report.rank1)]));
        report
    } else {
        let mut columns = Vec::new();
        for (m, path) in models.iter().zip(&run.members) {
            let r = evaluate_model(m, &clips)?;
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            columns.push((label, r.rank1));
        }
        let report = evaluate_members(&models, run.policy, &clips)?;
        columns.push(("ensemble".into(), report.rank1));
        print!("{}", accuracy_table(&columns));
        report
    };
    print!("{report}");
    if let Some(out) = &run.out {
        write(out, &report.to_json()?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GradcamRun {
    checkpoint: PathBuf,
    manifest: PathBuf,
    clip_id: String,
    target_class: Option<usize>,
    pathway: Pathway,
    max_alpha: f64,
    target_size: Option<(usize, usize)>,
    out_dir: PathBuf,
    dump_raw: bool,
}

fn gradcam(args: &GradcamArgs, file: Option<&Path>, root: Option<&Path>) -> Result<()> {
    let run = GradcamRun {
        checkpoint: args.checkpoint.clone(),
        manifest: config::resolve(&args.manifest, root),
        clip_id: args.clip_id.clone(),
        target_class: args.class,
        pathway: args.pathway.parse()?,
        max_alpha: args.alpha,
        target_size: args.size.map(|s| (s, s)),
        out_dir: args.out_dir.clone(),
        dump_raw: args.dump_raw,
    };
    let run = with_overrides(run, file)?;
    let model = load_checkpoint(&run.checkpoint)?;
    let shape = model.config.input_shape;
    if let Some(c) = run.target_class {
        ensure!(c < model.num_classes(), "class {c} out of range for {} classes", model.num_classes());
    }
    let options = ManifestOptions { target_size: Some(run.target_size.unwrap_or((shape.height, shape.width))) };
    let manifest = microid::data::load_manifest_with(&run.manifest, &options)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.clip_id == run.clip_id)
        .with_context(|| format!("clip {:?} is not in the manifest", run.clip_id))?;
    let clip = load_clip(entry, manifest.target_size, shape.frames, shape.channels)?;
    echo(&run, Some(&run.out_dir))?;

    let map = compute_gradcam(&model, &clip, run.target_class, run.pathway)?;
    let overlays = render_overlays(&map, &clip, run.max_alpha)?;
    let written = save_overlays(&overlays, &run.out_dir.join("overlays"))?;
    if run.dump_raw {
        save_raw_map(&map, &run.out_dir.join("saliency.bin"))?;
    }
    let summary = serde_json::json!({
        "clip_id": run.clip_id,
        "true_label": clip.label,
        "target_class": map.target_class,
        "pathway": map.pathway,
        "channel_weights": map.channel_weights,
        "raw_dims": map.raw_dims,
    });
    write(&run.out_dir.join("saliency.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} overlays for {} (class {}, {:?} pathway) in {}",
        written.len(),
        run.clip_id,
        map.target_class,
        map.pathway,
        run.out_dir.join("overlays").display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineRun {
    manifest: PathBuf,
    target_size: Option<(usize, usize)>,
    seed: u64,
    model: ModelConfig,
    solver: SolverConfig,
}

fn baseline(args: &BaselineArgs, file: Option<&Path>, root: Option<&Path>) -> Result<()> {
    let manifest_path = config::resolve(&args.manifest, root);
    let preset = preset_for(&args.model, &manifest_path)?;
    let (model, solver) = model_and_solver(&args.model, preset)?;
    let run = BaselineRun {
        manifest: manifest_path,
        target_size: args.size.map(|s| (s, s)),
        seed: args.model.seed,
        model,
        solver,
    };
    let run = with_overrides(run, file)?;
    run.solver.validate()?;
    echo(&run, None)?;
    let manifest = microid::data::load_manifest_with(&run.manifest, &ManifestOptions { target_size: run.target_size })?;
    let acc = static_baseline_accuracy(&manifest, &run.model, &run.solver, run.seed)?;
    println!("single-frame baseline rank-1: {acc:.2}%");
    Ok(())
}
