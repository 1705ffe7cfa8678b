//! `rfk`: dataset generation, training, evaluation, ablation sweeps and
//! prediction dumps for the referring segmentation network.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rfm_core::config::RunConfig;
use rfm_core::dataset::{self, Split};
use rfm_core::experiment::{self, AblationAxis};
use rfm_core::metrics::MetricReport;
use rfm_core::model::{checkpoint, train, References};
use rfm_core::pgm::Gray8;
use rfm_core::synthdata;

#[derive(Parser)]
#[command(
    name = "rfk",
    version,
    about = "Referring camouflaged-object segmentation at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied after the built-in defaults and `RFK_SEED`.
#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run seed; overrides every other source.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        arm: ArmFlags,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split directory, e.g. `data/test`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every arm of one ablation axis.
    Ablate {
        #[arg(long, value_parser = ["fusion", "refs", "layers", "windows"])]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the resolved run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        arm: ArmFlags,
    },
    /// Write full-resolution foreground probabilities as PGM.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write channel-mean feature heatmaps of one image as PGM.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        /// 8-bit PGM image.
        #[arg(long)]
        image: PathBuf,
        /// Split directory supplying the references of `--category`.
        #[arg(long)]
        refs_from: Option<PathBuf>,
        #[arg(long)]
        category: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Shorthands for the fusion keys.
#[derive(Args, Default)]
struct ArmFlags {
    #[arg(long, value_parser = ["none", "image", "text"])]
    fusion: Option<String>,
    /// Reference images per sample.
    #[arg(long)]
    refs: Option<usize>,
    /// Referring layers, e.g. `2,3,4` or `none`.
    #[arg(long)]
    layers: Option<String>,
    /// Window sides of levels 2..4, e.g. `8,2,2` or `auto`.
    #[arg(long)]
    windows: Option<String>,
}

impl ArmFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let pairs = [
            ("fusion.kind", self.fusion.clone()),
            ("fusion.num_refs", self.refs.map(|n| n.to_string())),
            ("fusion.layers", self.layers.clone()),
            ("fusion.windows", self.windows.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(())
    }
}

fn resolve(common: &Common, arm: Option<&ArmFlags>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var("RFK_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .with_context(|| format!("RFK_SEED={s:?} is not a seed"))?;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(a) = arm {
        a.apply(&mut cfg)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints the resolved configuration and stores it next to the outputs.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.to_text();
    eprint!("# resolved configuration\n{text}");
    fs::write(out.join("config.txt"), text).with_context(|| format!("writing config to {}", out.display()))?;
    Ok(())
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// `data/test` to (`data`, `test`).
fn split_parts(split: &Path) -> Result<(PathBuf, String)> {
    let name = split
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("{} does not name a split", split.display()))?;
    let root = split
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((root, name.to_string()))
}

fn write_report(report: &MetricReport, label: &str, out: &Path) -> Result<()> {
    fs::write(out.join("report.txt"), report.to_kv())?;
    let table = report.to_table(label);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let entries = synthdata::gen_dataset(out, &cfg.data, cfg.model.input_size, cfg.seed)?;
    echo_config(cfg, out)?;
    eprintln!("wrote {} files under {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(cfg, out)?;
    let split = Split::load(data, "train")?;
    let mut net = rfm_core::model::RfmNet::new(&cfg.model, cfg.seed)?;
    let mut log = String::from(train::StepLog::TSV_HEADER);
    log.push('\n');
    let mut stderr = std::io::stderr();
    train::train(&mut net, &split, &cfg.train, cfg.seed, |s| {
        log.push_str(&s.tsv_row());
        log.push('\n');
        if s.step % 25 == 0 || s.step + 1 == cfg.train.steps {
            let _ = writeln!(stderr, "step {:>5}  loss {:.5}", s.step, s.terms.total);
        }
    })?;
    checkpoint::write_atomic(&out.join("loss.tsv"), log.as_bytes())?;
    checkpoint::save(&out.join("model.ckpt"), &net)?;
    eprintln!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, split: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (root, name) = split_parts(split)?;
    let report = experiment::evaluate_dataset(ckpt, &root, &name)?;
    write_report(&report, &name, out)
}

fn cmd_ablate(base: &RunConfig, axis: &str, seeds: &[u64], data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(base, out)?;
    let train_split = Split::load(data, "train")?;
    let test = Split::load(data, "test")?;
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let mut results = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        for arm in experiment::arms(&cfg, AblationAxis::parse(axis)?) {
            eprintln!("training {} seed={seed}", arm.label);
            let r = experiment::run_arm(&arm, &train_split, &test, |_| {})?;
            let dir = out.join(format!("{}_seed{seed}", arm.label.replace(['=', ','], "_")));
            ensure_dir(&dir)?;
            fs::write(dir.join("config.txt"), arm.cfg.to_text())?;
            fs::write(dir.join("report.txt"), r.report.to_kv())?;
            results.push(r);
        }
    }
    let table = experiment::comparison_table(&results);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_predict(ckpt: &Path, split: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (root, name) = split_parts(split)?;
    let net = checkpoint::load(ckpt)?;
    let data = Split::load(&root, &name)?;
    for s in &data.samples {
        let p = experiment::predict_probability(&net, &data, s)?;
        Gray8::from_tensor(&p)?.write(&out.join(format!("{}.pgm", s.name)))?;
    }
    eprintln!("wrote {} maps to {}", data.samples.len(), out.display());
    Ok(())
}

fn cmd_dump_features(
    ckpt: &Path,
    image: &Path,
    refs_from: Option<&Path>,
    category: Option<usize>,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let net = checkpoint::load(ckpt)?;
    let img = dataset::load_image(image)?;
    let refs = match (net.cfg.fusion.kind, refs_from, category) {
        (rfm_core::rif::FusionKind::None, _, _) => References::None,
        (_, Some(dir), Some(c)) => {
            let (root, name) = split_parts(dir)?;
            experiment::references_for(&net, &Split::load(&root, &name)?, c)?
        }
        _ => bail!("a fusion checkpoint needs --refs-from and --category"),
    };
    for (stage, level, map) in experiment::feature_heatmaps(&net, &img, &refs)? {
        Gray8::from_tensor(&map)?.write(&out.join(format!("{stage}_l{level}.pgm")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { out } => cmd_gen(&resolve(&cli.common, None)?, out),
        Command::Train { data, out, arm } => cmd_train(&resolve(&cli.common, Some(arm))?, data, out),
        Command::Eval { ckpt, split, out } => cmd_eval(ckpt, split, out),
        Command::Ablate {
            axis,
            data,
            out,
            seeds,
            arm,
        } => cmd_ablate(&resolve(&cli.common, Some(arm))?, axis, seeds, data, out),
        Command::Predict { ckpt, split, out } => cmd_predict(ckpt, split, out),
        Command::DumpFeatures {
            ckpt,
            image,
            refs_from,
            category,
            out,
        } => cmd_dump_features(ckpt, image, refs_from.as_deref(), *category, out),
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
