use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cacscore::cacslice::SliceClassifier;
use cacscore::calgan::CycleGan;
use cacscore::heartseg::HeartSegModel;
use cacscore::phantom::PhantomSpec;
use cacscore::pipeline::{
    decompose_slices, evaluate, generate_phantom_cohort, heart_region, pair_rows, report, run_pipeline, select_slices,
    train_classifier_on, train_cyclegan_on, train_heartseg_on, working_view, Cohort, PipelineConfig, RunManifest,
};
use cacscore::scoring::{score_clinical, score_map};
use cacscore::stats::{evaluate_pair_table, read_pair_table, write_pair_table, LimitsMethod};
use cacscore::volume::{read_mask, read_volume, write_mask, write_volume, Dtype};

#[derive(Parser)]
#[command(name = "cacscore", version, about = "Threshold-free coronary artery calcium scoring")]
struct Cli {
    /// Seed overriding every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Default location of trained checkpoints.
    #[arg(long, global = true, env = "CACSCORE_CACHE_DIR", default_value = ".cacscore")]
    cache_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom cohorts with exact calcium truth.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train the heart segmentation network on a cohort with heart masks.
    TrainHeartseg(TrainArgs),
    /// Train the calcium slice classifier on a cohort with slice flags.
    TrainClassifier(TrainArgs),
    /// Train the decomposition CycleGAN on a cohort with heart masks and slice flags.
    TrainCyclegan(TrainGanArgs),
    /// Segment the heart in a volume.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Flag working-grid slices that contain calcium.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        heart: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decompose slices into a calcium map (HU) on the input grid.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        heart: PathBuf,
        /// Slice flags from `classify`; every heart slice when omitted.
        #[arg(long)]
        flags: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a calcium map, or the image alone with the 130 HU threshold.
    Score {
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        heart: Option<PathBuf>,
        /// Artery label volume for per-artery scores.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Agreement statistics for a pair table
    /// (subject, score_type, scan1, scan2, category1, category2).
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Limits::Regression)]
        limits: Limits,
    },
    /// Report for a finished run, with the cohort's pairs and truth.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage on a cohort and write the manifest and report.
    Pipeline {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_heart_seg: bool,
        #[arg(long)]
        no_classifier: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write phantom scan pairs, truth sidecars, a lesion table and cohort.json.
    Generate {
        /// Phantom spec reused for every pair; random anatomy per pair when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        min_lesions: usize,
        #[arg(long, default_value_t = 4)]
        max_lesions: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration JSON; fields it leaves out keep the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Paper-scale networks, or reduced ones sized for phantoms.
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Checkpoint path; defaults to the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainGanArgs {
    /// Cohort listing images, heart masks and slice flags.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; defaults to the cache directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Limits {
    Constant,
    Regression,
}

impl From<Limits> for LimitsMethod {
    fn from(l: Limits) -> Self {
        match l {
            Limits::Constant => LimitsMethod::Constant,
            Limits::Regression => LimitsMethod::Regression,
        }
    }
}

const HEARTSEG_CKPT: &str = "heartseg.json";
const CLASSIFIER_CKPT: &str = "classifier.json";
const CYCLEGAN_DIR: &str = "cyclegan";
const CYCLEGAN_CKPT: &str = "cyclegan.json";

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<PipelineConfig> {
    let preset = match args.preset {
        Preset::Paper => PipelineConfig::default(),
        Preset::Desk => PipelineConfig::desk(),
    };
    let cfg = match &args.config {
        Some(p) => {
            let mut base = serde_json::to_value(preset)?;
            let text = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            merge(&mut base, serde_json::from_slice(&text).with_context(|| format!("parsing {}", p.display()))?);
            serde_json::from_value(base).with_context(|| format!("parsing {}", p.display()))?
        }
        None => preset,
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Fill unset checkpoints from the cache directory when they exist there.
fn with_cached_checkpoints(mut cfg: PipelineConfig, cache: &Path) -> PipelineConfig {
    let fill = |slot: &mut Option<PathBuf>, p: PathBuf| {
        if slot.is_none() && p.exists() {
            *slot = Some(p);
        }
    };
    fill(&mut cfg.heartseg_checkpoint, cache.join(HEARTSEG_CKPT));
    fill(&mut cfg.classifier_checkpoint, cache.join(CLASSIFIER_CKPT));
    fill(&mut cfg.cyclegan_checkpoint, cache.join(CYCLEGAN_DIR).join(CYCLEGAN_CKPT));
    cfg
}

fn run(cli: Cli) -> Result<()> {
    let cache = cli.cache_dir.clone();
    match cli.command {
        Command::Phantom(PhantomCommand::Generate {
            spec,
            out,
            pairs,
            min_lesions,
            max_lesions,
        }) => {
            if min_lesions > max_lesions {
                bail!("--min-lesions exceeds --max-lesions");
            }
            let base: Option<PhantomSpec> = spec.as_deref().map(read_json).transpose()?;
            let cohort = generate_phantom_cohort(&out, pairs, base.as_ref(), min_lesions..=max_lesions, cli.seed.unwrap_or(0))?;
            println!("{} scans in {} pairs written to {}", cohort.scans.len(), cohort.pairs.len(), out.display());
        }
        Command::TrainHeartseg(a) => {
            let cfg = load_config(&a.config, cli.seed)?;
            let cohort = Cohort::load(&a.cohort)?;
            let model = train_heartseg_on(&cohort, &cfg)?;
            let out = a.out.unwrap_or_else(|| cache.join(HEARTSEG_CKPT));
            ensure_parent(&out)?;
            model.save(&out)?;
            println!("heart segmentation checkpoint: {}", out.display());
        }
        Command::TrainClassifier(a) => {
            let cfg = load_config(&a.config, cli.seed)?;
            let cohort = Cohort::load(&a.cohort)?;
            let model = train_classifier_on(&cohort, &cfg)?;
            let out = a.out.unwrap_or_else(|| cache.join(CLASSIFIER_CKPT));
            ensure_parent(&out)?;
            model.save(&out)?;
            println!("slice classifier checkpoint: {}", out.display());
        }
        Command::TrainCyclegan(a) => {
            let cfg = load_config(&a.config, cli.seed)?;
            let cohort = Cohort::load(&a.data)?;
            let dir = a.out.unwrap_or_else(|| cache.join(CYCLEGAN_DIR));
            fs::create_dir_all(&dir)?;
            let gan = train_cyclegan_on(&cohort, &cfg, Some(&dir))?;
            let out = dir.join(CYCLEGAN_CKPT);
            gan.save(&out)?;
            println!("cyclegan checkpoint: {}", out.display());
        }
        Command::Segment {
            model,
            input,
            out,
            config,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let mut m = HeartSegModel::load(&model)?;
            let image = read_volume(&input)?;
            let mask = heart_region(Some(&mut m), &cfg, cfg.cyclegan.crop_side, &image)?;
            write_mask(&out, &mask)?;
            info!("{} heart voxels", mask.count());
        }
        Command::Classify {
            model,
            input,
            heart,
            out,
            config,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let mut m = SliceClassifier::load(&model)?;
            let image = read_volume(&input)?;
            let region = read_mask(&heart)?;
            let (work, work_region) = working_view(&cfg, &image, &region)?;
            let (_, flagged) = select_slices(Some(&mut m), &work, &work_region, cfg.scoring.window, cfg.flag_dilation_slices)?;
            let flags: BTreeMap<usize, bool> = (0..work.grid.dims[2]).map(|z| (z, flagged.contains(&z))).collect();
            write_json(&out, &flags)?;
        }
        Command::Decompose {
            model,
            input,
            heart,
            flags,
            out,
            config,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let mut gan = CycleGan::load(&model)?;
            let image = read_volume(&input)?;
            let region = read_mask(&heart)?;
            let (work, work_region) = working_view(&cfg, &image, &region)?;
            let (candidates, _) = select_slices(None, &work, &work_region, cfg.scoring.window, 0)?;
            let slices: Vec<usize> = match flags {
                Some(p) => {
                    let f: BTreeMap<usize, bool> = read_json(&p)?;
                    candidates.into_iter().filter(|z| f.get(z).copied().unwrap_or(false)).collect()
                }
                None => candidates,
            };
            let map = decompose_slices(&mut gan, &cfg, &image, &region, &work, &work_region, &slices)?;
            write_volume(&out, &map, Dtype::Float32)?;
            info!("{} slices decomposed", slices.len());
        }
        Command::Score {
            map,
            image,
            heart,
            labels,
            out,
            config,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let image = read_volume(&image)?;
            let region = heart.as_deref().map(read_mask).transpose()?;
            let labels = labels.as_deref().map(read_volume).transpose()?;
            let record = match map {
                Some(p) => score_map(&read_volume(&p)?, Some(&image), region.as_ref(), labels.as_ref(), &cfg.scoring)?,
                None => score_clinical(&image, region.as_ref(), labels.as_ref(), &cfg.scoring)?,
            };
            write_json(&out, &record)?;
        }
        Command::Evaluate {
            pairs,
            out,
            plots,
            limits,
        } => {
            let rows = read_pair_table(&pairs)?;
            let rep = evaluate_pair_table(&rows, limits.into(), plots.as_deref())?;
            write_json(&out, &rep)?;
        }
        Command::Report { manifest, cohort, out } => {
            let manifest = RunManifest::load(&manifest)?;
            let cohort = Cohort::load(&cohort)?;
            write_report(&manifest, &cohort, &out)?;
        }
        Command::Pipeline {
            cohort,
            out,
            no_heart_seg,
            no_classifier,
            config,
        } => {
            let mut cfg = with_cached_checkpoints(load_config(&config, cli.seed)?, &cache);
            cfg.use_heart_seg &= !no_heart_seg;
            cfg.use_slice_classifier &= !no_classifier;
            cfg.validate()?;
            let cohort = Cohort::load(&cohort)?;
            let manifest = run_pipeline(&cfg, &cohort, &out)?;
            for e in &manifest.errors {
                log::warn!("scan {} failed: {}", e.id, e.message);
            }
            write_report(&manifest, &cohort, &out)?;
        }
    }
    Ok(())
}

fn write_report(manifest: &RunManifest, cohort: &Cohort, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let rep = report(manifest, &cohort.pairs, Some(out))?;
    rep.save(out)?;
    write_pair_table(&out.join("pairs.csv"), &pair_rows(manifest, &cohort.pairs)?)?;
    write_json(&out.join("evaluation.json"), &evaluate(manifest, cohort)?)?;
    print!("{}", rep.to_text());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
