use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scarcascade::config::RunConfig;
use scarcascade::data::{make_folds, write_mask, DatasetManifest, FoldSplit, LabelMask, MVO, SCAR};
use scarcascade::evaluation::{aggregate_folds, compare_methods, cross_validate, evaluate_directory, FoldModels};
use scarcascade::inference::{predict_2d_stack, predict_cascade, write_prediction, MaskFormat};
use scarcascade::networks::{load_checkpoint, Network};
use scarcascade::perturbation::{apply_operator, AuxMasks, PerturbationOperator};
use scarcascade::preprocess::{prepare_case, DatasetProfile};
use scarcascade::synthgen::{generate_phantoms, write_phantoms};
use scarcascade::training::{prepare_cases, train_2d, train_cascade, TrainOutcome};
use scarcascade::Error;

const OUTPUT_ENV: &str = "SCARCASCADE_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "scarcascade", version, about = "Cascaded 2D/3D scar and MVO segmentation of LGE cardiac MR")]
struct Cli {
    /// Run configuration (JSON); defaults come from --profile when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Profile::Emidec)]
    profile: Profile,

    /// Dotted-path override, e.g. `train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cross-validation fold to train, predict or evaluate.
    #[arg(long, global = true)]
    fold: Option<usize>,

    #[arg(long, global = true)]
    device: Option<String>,

    /// Use the cascade trained without input perturbation.
    #[arg(long, global = true)]
    vanilla: bool,

    /// Output root; overrides the config and the environment.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Print per-epoch progress to stderr.
    #[arg(long, global = true)]
    progress: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Profile {
    Emidec,
    Myops,
    Custom,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth,
    /// Train the slice-wise network.
    Train2d,
    /// Train the volumetric stage on top of a frozen slice-wise network.
    TrainCascade {
        #[arg(long)]
        checkpoint_2d: Option<PathBuf>,
    },
    /// Predict every case of the manifest (or the fold's validation cases).
    Predict {
        #[arg(long)]
        checkpoint_2d: Option<PathBuf>,
        #[arg(long)]
        checkpoint_3d: Option<PathBuf>,
        /// Name of the prediction directory under the output root.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score a prediction directory against the manifest's masks.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        /// Second prediction directory for a paired comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and evaluate every fold.
    Crossval,
    /// Apply one perturbation operator to a case's auxiliary masks.
    Perturb {
        #[arg(long)]
        op: String,
        #[arg(long)]
        case: String,
        /// Derive the masks from this slice-wise network instead of the ground truth.
        #[arg(long)]
        checkpoint_2d: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(match cli.profile {
            Profile::Emidec => DatasetProfile::Emidec,
            Profile::Myops => DatasetProfile::Myops,
            Profile::Custom => DatasetProfile::Custom,
        }),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.train.device = d.clone();
    }
    if cli.vanilla {
        cfg.vanilla_cascade = true;
    }
    if cli.progress {
        cfg.train.progress = true;
    }
    if let Some(m) = &cli.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    } else if cli.config.is_none() {
        if let Ok(root) = std::env::var(OUTPUT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
    }
    if cfg.train.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; only \"cpu\" is supported", cfg.train.device)).into());
    }
    if let Some(k) = cli.fold {
        if k >= cfg.folds {
            return Err(Error::Config(format!("fold {k} out of range for {} folds", cfg.folds)).into());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<DatasetManifest> {
    let p = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no manifest given (use --manifest or set `manifest`)".into()))?;
    let m = DatasetManifest::load(p)?;
    if m.scheme != cfg.scheme {
        return Err(Error::Config(format!(
            "manifest uses the {} scheme, the run is configured for {}",
            m.scheme.label(),
            cfg.scheme.label()
        ))
        .into());
    }
    Ok(m)
}

fn split(cfg: &RunConfig, manifest: &DatasetManifest) -> anyhow::Result<FoldSplit> {
    Ok(make_folds(&manifest.case_ids(), cfg.folds, cfg.seed)?)
}

/// Training ids for a fold, or every masked case when no fold is given.
fn training_ids(cfg: &RunConfig, manifest: &DatasetManifest, fold: Option<usize>) -> anyhow::Result<Vec<String>> {
    Ok(match fold {
        Some(k) => split(cfg, manifest)?.folds[k].train_ids.clone(),
        None => manifest
            .entries
            .iter()
            .filter(|e| e.mask_path.is_some())
            .map(|e| e.case_id.clone())
            .collect(),
    })
}

fn fold_dir(cfg: &RunConfig, fold: Option<usize>) -> PathBuf {
    cfg.output_dir.join(match fold {
        Some(k) => format!("fold_{k}"),
        None => "all".to_string(),
    })
}

fn cascade_name(vanilla: bool) -> &'static str {
    if vanilla {
        "cascade_vanilla"
    } else {
        "cascade"
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_net(path: &Path) -> anyhow::Result<Network> {
    if !path.exists() {
        return Err(Error::Input(format!("checkpoint {} does not exist", path.display())).into());
    }
    Ok(load_checkpoint(path, None)?)
}

fn checkpoint_of(outcome: &TrainOutcome) -> anyhow::Result<&Path> {
    outcome
        .checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("training finished without writing a checkpoint"))
}

fn run_train2d(cfg: &RunConfig, fold: Option<usize>, dir: &Path) -> anyhow::Result<PathBuf> {
    let manifest = load_manifest(cfg)?;
    let ids = training_ids(cfg, &manifest, fold)?;
    let cases = prepare_cases(&manifest, &ids, &cfg.preprocess)?;
    cfg.save_to(dir)?;
    let tc = cfg.train_config(fold.map_or(0, |k| k + 1), 0);
    let out = train_2d(&cases, cfg.scheme, &cfg.network_2d, &cfg.augment, &tc, Some(dir))?;
    Ok(checkpoint_of(&out)?.to_path_buf())
}

fn run_cascade(cfg: &RunConfig, fold: Option<usize>, ckpt_2d: &Path, dir: &Path) -> anyhow::Result<PathBuf> {
    let manifest = load_manifest(cfg)?;
    let net2d = load_net(ckpt_2d)?;
    let ids = training_ids(cfg, &manifest, fold)?;
    let cases = prepare_cases(&manifest, &ids, &cfg.preprocess)?;
    cfg.save_to(dir)?;
    let tc = cfg.train_config(fold.map_or(0, |k| k + 1), 1);
    let out = train_cascade(&cases, cfg.scheme, &net2d, &cfg.network_3d, &cfg.cascade_settings(), &tc, Some(dir))?;
    Ok(checkpoint_of(&out)?.to_path_buf())
}

fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = cfg.output_dir.join("synth");
    let phantoms = generate_phantoms(&cfg.synth)?;
    let manifest = write_phantoms(&dir, &phantoms)?;
    cfg.save_to(&dir)?;
    println!("{} phantoms written to {}", manifest.entries.len(), dir.join("manifest.json").display());
    Ok(())
}

fn cmd_predict(
    cfg: &RunConfig,
    fold: Option<usize>,
    ckpt_2d: Option<PathBuf>,
    ckpt_3d: Option<PathBuf>,
    name: Option<String>,
) -> anyhow::Result<()> {
    let manifest = load_manifest(cfg)?;
    let fd = fold_dir(cfg, fold);
    let ckpt_2d = ckpt_2d.unwrap_or_else(|| fd.join("planar").join("final.ckpt"));
    let ckpt_3d = ckpt_3d.unwrap_or_else(|| fd.join(cascade_name(cfg.vanilla_cascade)).join("final.ckpt"));
    let (n2, n3) = (load_net(&ckpt_2d)?, load_net(&ckpt_3d)?);
    let ids = match fold {
        Some(k) => split(cfg, &manifest)?.folds[k].val_ids.clone(),
        None => manifest.case_ids(),
    };
    let name = name.unwrap_or_else(|| {
        let base = if cfg.vanilla_cascade { "predictions_vanilla" } else { "predictions" };
        match fold {
            Some(k) => format!("{base}_fold_{k}"),
            None => base.to_string(),
        }
    });
    let dir = cfg.output_dir.join(name);
    cfg.save_to(&dir)?;
    let inf = cfg.inference_config();
    for id in &ids {
        let e = manifest.entry(id).expect("id comes from the manifest");
        let (vol, _) = scarcascade::data::load_case(e, manifest.scheme)?;
        let mut result = predict_cascade(&n2, &n3, &vol, e.lv_center, &inf)?;
        result.provenance.checkpoint_2d = ckpt_2d.display().to_string();
        result.provenance.checkpoint_3d = ckpt_3d.display().to_string();
        write_prediction(&dir, &result, cfg.inference.mask_format)?;
    }
    println!("{} predictions written to {}", ids.len(), dir.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, fold: Option<usize>, pred_dir: &Path, compare: Option<&Path>) -> anyhow::Result<()> {
    let mut manifest = load_manifest(cfg)?;
    if let Some(k) = fold {
        manifest = manifest.subset(&split(cfg, &manifest)?.folds[k].val_ids)?;
    }
    let cases = evaluate_directory(pred_dir, &manifest, &cfg.evaluation)?;
    let dir = cfg.output_dir.join("evaluation");
    let report = aggregate_folds(&cfg.evaluation, vec![(fold.unwrap_or(0), cases.clone())]);
    report.write(&dir)?;
    cfg.save_to(&dir)?;
    let cases_path = dir.join("cases.json");
    write_file(&cases_path, serde_json::to_string_pretty(&cases)?)?;
    if let Some(other) = compare {
        let b = evaluate_directory(other, &manifest, &cfg.evaluation)?;
        let mut out = Vec::new();
        for t in &cfg.evaluation.targets {
            for &m in &t.rows {
                out.push(compare_methods(&cases, &b, &t.name, m)?);
            }
        }
        let p = dir.join("comparison.json");
        write_file(&p, serde_json::to_string_pretty(&out)?)?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_crossval(cfg: &RunConfig) -> anyhow::Result<()> {
    let manifest = load_manifest(cfg)?;
    let split = split(cfg, &manifest)?;
    let root = cfg.output_dir.join("crossval");
    cfg.save_to(&root)?;
    let fold_cfg = RunConfig {
        output_dir: root.clone(),
        ..cfg.clone()
    };
    let mut models = Vec::with_capacity(split.folds.len());
    for k in 0..split.folds.len() {
        let fd = fold_dir(&fold_cfg, Some(k));
        let c2 = run_train2d(&fold_cfg, Some(k), &fd.join("planar"))?;
        let c3 = run_cascade(&fold_cfg, Some(k), &c2, &fd.join(cascade_name(cfg.vanilla_cascade)))?;
        fold_cfg.save_to(&fd)?;
        models.push(FoldModels {
            checkpoint_2d: c2,
            checkpoint_3d: c3,
        });
    }
    let folds_path = root.join("folds.json");
    write_file(&folds_path, serde_json::to_string_pretty(&split)?)?;
    let report = cross_validate(
        &manifest,
        &split,
        &models,
        &cfg.inference_config(),
        &cfg.evaluation,
        Some(&root.join("predictions")),
    )?;
    for k in 0..split.folds.len() {
        cfg.save_to(&root.join("predictions").join(format!("fold_{k}")))?;
    }
    report.write(&root)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn aux_labels(aux: &AuxMasks) -> Vec<u8> {
    let mvo = aux.mvo();
    aux.scar()
        .iter()
        .enumerate()
        .map(|(i, &s)| match (s, mvo.map(|m| m[i])) {
            (_, Some(1)) => MVO,
            (1, _) => SCAR,
            _ => 0,
        })
        .collect()
}

fn cmd_perturb(cfg: &RunConfig, op: &str, case: &str, ckpt_2d: Option<&Path>) -> anyhow::Result<()> {
    let operator = PerturbationOperator::parse(op).ok_or_else(|| {
        let names: Vec<&str> = PerturbationOperator::ALL.iter().map(|o| o.name()).collect();
        Error::Config(format!("unknown operator {op:?}; expected one of {}", names.join(", ")))
    })?;
    let manifest = load_manifest(cfg)?;
    let e = manifest
        .entry(case)
        .ok_or_else(|| Error::Input(format!("case {case:?} not in manifest")))?;
    let (vol, gt) = scarcascade::data::load_case(e, manifest.scheme)?;
    let prepared = prepare_case(&vol, gt.as_ref(), e.lv_center, &cfg.preprocess)?;
    let shape = prepared.volume.shape();
    let spacing = prepared.volume.spacing();
    let gt = match prepared.mask {
        Some(m) => m,
        None if operator == PerturbationOperator::FakeScar => {
            bail!(Error::Input(format!("fake_scar needs a ground-truth mask for case {case:?}")))
        }
        None => LabelMask::empty(shape, spacing, cfg.scheme),
    };
    let before = match ckpt_2d {
        Some(p) => predict_2d_stack(&load_net(p)?, &prepared.volume, cfg.scheme)?.aux,
        None => AuxMasks::from_mask(&gt),
    };
    let mut after = before.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let record = apply_operator(operator, &mut after, &prepared.volume, &gt, &cfg.perturbation, &mut rng)?;

    let dir = cfg.output_dir.join("perturb").join(format!("{case}_{}", operator.name()));
    cfg.save_to(&dir)?;
    let ext = match cfg.inference.mask_format {
        MaskFormat::Raw => "u8",
        MaskFormat::Nifti => "nii.gz",
    };
    for (name, aux) in [("before", &before), ("after", &after)] {
        let mask = LabelMask::new(shape, spacing, cfg.scheme, aux_labels(aux))?;
        write_mask(&dir.join(format!("{name}.{ext}")), case, &mask)?;
    }
    let rec = serde_json::to_string_pretty(&record)?;
    let p = dir.join("record.json");
    write_file(&p, &rec)?;
    println!("{rec}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train2d => {
            let p = run_train2d(&cfg, cli.fold, &fold_dir(&cfg, cli.fold).join("planar"))?;
            println!("{}", p.display());
            Ok(())
        }
        Command::TrainCascade { checkpoint_2d } => {
            let fd = fold_dir(&cfg, cli.fold);
            let c2 = checkpoint_2d.unwrap_or_else(|| fd.join("planar").join("final.ckpt"));
            let p = run_cascade(&cfg, cli.fold, &c2, &fd.join(cascade_name(cfg.vanilla_cascade)))?;
            println!("{}", p.display());
            Ok(())
        }
        Command::Predict {
            checkpoint_2d,
            checkpoint_3d,
            name,
        } => cmd_predict(&cfg, cli.fold, checkpoint_2d, checkpoint_3d, name),
        Command::Evaluate { pred_dir, compare } => cmd_evaluate(&cfg, cli.fold, &pred_dir, compare.as_deref()),
        Command::Crossval => cmd_crossval(&cfg),
        Command::Perturb { op, case, checkpoint_2d } => cmd_perturb(&cfg, &op, &case, checkpoint_2d.as_deref()),
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => ("config", 2),
        Some(Error::NonFiniteLoss { .. }) => ("numeric", 4),
        Some(_) => ("data", 3),
        None => ("internal", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let msg = serde_json::json!({
                "error": kind,
                "message": err.to_string(),
                "exit_code": code,
            });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
