use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ova::data::{
    aggregate_seeds, coco_thresholds, evaluate, load_images, make_synthetic, CaptionRecord,
    DetectionDataset, ImageStore, SeedSummary, SyntheticSpec,
};
use ova::infer::{load_jsonl, save_jsonl, DetectionRecord};
use ova::net::Detector;
use ova::numeric::ParamStore;
use ova::pipeline;
use ova::selftrain::PseudoLabel;
use ova::text::EmbeddingBank;
use ova::train::{detect_dataset, EpochLog, RunManifest, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ova",
    version,
    about = "Open-vocabulary detection on a desk-scale synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.apa.enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        Ok(base.with_overrides(&self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into a data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator spec; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastive caption pretraining of the backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training, then evaluation on the validation split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose backbone initialises the detector.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label the caption corpus with a teacher checkpoint (JSON lines).
    Pseudolabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint supervised + pseudo-label training starting from the teacher.
    Selftrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a detection dump, or a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Detection dump (JSON lines); needs --dataset.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"], requires = "dataset")]
        detections: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the checkpoint's detections here.
        #[arg(long, requires = "checkpoint")]
        dump: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute an embedding bank file.
    EmbedBank {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Category names come from this dataset.
        #[arg(long, required_unless_present_any = ["names", "captions"])]
        dataset: Option<PathBuf>,
        /// One class name per line.
        #[arg(long)]
        names: Option<PathBuf>,
        /// Caption corpus (JSON lines); every distinct caption becomes a query.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run manifests into mean ± std tables.
    Report {
        /// Manifest files, or run directories holding `manifest.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summaries as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Resolves relative outputs against `OVA_OUT` when it is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("OVA_OUT") {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn default_out(command: &str, cfg: &TrainConfig) -> PathBuf {
    out_path(&PathBuf::from(format!(
        "{command}-{}-s{}",
        cfg.hash(),
        cfg.seed
    )))
}

/// Writes into a sibling staging path and moves it into place only when
/// `body` succeeds; the staging path is removed otherwise.
fn staged<T>(target: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let mut name = target
        .file_name()
        .with_context(|| format!("output path {} has no file name", target.display()))?
        .to_os_string();
    name.push(".partial");
    let tmp = target.with_file_name(name);
    if let Some(parent) = tmp.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    remove_any(&tmp)?;
    match body(&tmp) {
        Ok(v) => {
            remove_any(target)?;
            fs::rename(&tmp, target)
                .with_context(|| format!("moving output to {}", target.display()))?;
            Ok(v)
        }
        Err(e) => {
            let _ = remove_any(&tmp);
            Err(e)
        }
    }
}

fn remove_any(p: &Path) -> Result<()> {
    if p.is_dir() {
        fs::remove_dir_all(p)?;
    } else if p.exists() {
        fs::remove_file(p)?;
    }
    Ok(())
}

fn staged_dir<T>(target: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    staged(target, |tmp| {
        fs::create_dir_all(tmp)?;
        body(tmp)
    })
}

fn progress(e: &EpochLog) {
    eprintln!(
        "[{}] epoch {} step {} lr {:.2e} loss {:.4} (focal {:.4} giou {:.4} quality {:.4})",
        e.stage, e.epoch, e.steps, e.lr, e.loss.total, e.loss.focal, e.loss.giou, e.loss.quality
    );
}

/// A data directory as written by `ova synth`.
struct DataDir {
    root: PathBuf,
}

impl DataDir {
    fn new(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            bail!(ova::Error::Data(format!(
                "data directory {} not found",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn dataset(&self, name: &str) -> Result<DetectionDataset> {
        let p = self.root.join(name);
        DetectionDataset::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn captions(&self) -> Result<Vec<CaptionRecord>> {
        let p = self.root.join("captions.jsonl");
        load_jsonl(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn images(&self, sets: &[&DetectionDataset]) -> Result<ImageStore> {
        let mut store = ImageStore::new();
        for ds in sets {
            store.extend(load_images(ds, &self.root)?);
        }
        Ok(store)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, spec, seed } => {
            let mut s = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| ova::Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let bundle = make_synthetic(&s)?;
            let out = out_path(&out);
            staged_dir(&out, |tmp| Ok(bundle.write_dir(tmp)?))?;
            println!("{}", out.display());
        }
        Command::Pretrain { cfg, data, out } => {
            let cfg = cfg.load()?;
            let dir = DataDir::new(&data)?;
            let corpus = dir.dataset("corpus.json")?;
            let captions = dir.captions()?;
            let images = dir.images(&[&corpus])?;
            let out = out.map_or_else(|| default_out("pretrain", &cfg), |o| out_path(&o));
            staged_dir(&out, |tmp| {
                let (params, history) =
                    pipeline::pretrain(&cfg, &captions, &images, &mut progress)?;
                params.save(tmp.join("model.ckpt"))?;
                let mut m = RunManifest::new("pretrain", &cfg);
                m.history = history;
                m.save(tmp.join("manifest.json"))?;
                Ok(())
            })?;
            println!("{}", out.display());
        }
        Command::Train {
            cfg,
            data,
            pretrained,
            out,
        } => {
            let cfg = cfg.load()?;
            let dir = DataDir::new(&data)?;
            let train = dir.dataset("train.json")?;
            let val = dir.dataset("val.json")?;
            let images = dir.images(&[&train, &val])?;
            let pre = pretrained
                .map(|p| ParamStore::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let out = out.map_or_else(|| default_out("train", &cfg), |o| out_path(&o));
            staged_dir(&out, |tmp| {
                let m = pipeline::train_teacher(
                    &cfg,
                    &train,
                    &val,
                    &images,
                    pre.as_ref(),
                    &mut progress,
                )?;
                finish_run("train", &cfg, m, tmp)
            })?;
            println!("{}", out.display());
        }
        Command::Pseudolabel {
            cfg,
            data,
            teacher,
            out,
        } => {
            let cfg = cfg.load()?;
            let dir = DataDir::new(&data)?;
            let corpus = dir.dataset("corpus.json")?;
            let captions = dir.captions()?;
            let images = dir.images(&[&corpus])?;
            let params = ParamStore::load(&teacher)
                .with_context(|| format!("loading {}", teacher.display()))?;
            let out = out_path(&out);
            let n = staged(&out, |tmp| {
                let labels = pipeline::label_corpus(&cfg, &params, &captions, &images)?;
                save_jsonl(tmp, &labels)?;
                Ok(labels.len())
            })?;
            eprintln!("{n} pseudo-labels from {} captions", captions.len());
            println!("{}", out.display());
        }
        Command::Selftrain {
            cfg,
            data,
            teacher,
            pseudo,
            out,
        } => {
            let cfg = cfg.load()?;
            let dir = DataDir::new(&data)?;
            let train = dir.dataset("train.json")?;
            let val = dir.dataset("val.json")?;
            let corpus = dir.dataset("corpus.json")?;
            let images = dir.images(&[&train, &val, &corpus])?;
            let params = ParamStore::load(&teacher)
                .with_context(|| format!("loading {}", teacher.display()))?;
            let labels: Vec<PseudoLabel> =
                load_jsonl(&pseudo).with_context(|| format!("loading {}", pseudo.display()))?;
            let out = out.map_or_else(|| default_out("selftrain", &cfg), |o| out_path(&o));
            staged_dir(&out, |tmp| {
                let m = pipeline::train_student(
                    &cfg,
                    &params,
                    &labels,
                    &train,
                    &val,
                    &images,
                    &mut progress,
                )?;
                finish_run("selftrain", &cfg, m, tmp)
            })?;
            println!("{}", out.display());
        }
        Command::Eval {
            cfg,
            detections,
            dataset,
            checkpoint,
            data,
            dump,
            out,
        } => {
            let cfg = cfg.load()?;
            let out = out_path(&out);
            let report = match (detections, checkpoint, data) {
                (Some(dets), _, _) => {
                    let ds_path = dataset.context("--detections needs --dataset")?;
                    let ds = DetectionDataset::load(&ds_path)
                        .with_context(|| format!("loading {}", ds_path.display()))?;
                    let records: Vec<DetectionRecord> =
                        load_jsonl(&dets).with_context(|| format!("loading {}", dets.display()))?;
                    evaluate(&records, &ds, &coco_thresholds(), None, &cfg.hash())?
                }
                (None, Some(ckpt), Some(data)) => {
                    let dir = DataDir::new(&data)?;
                    let ds = match &dataset {
                        Some(p) => DetectionDataset::load(p)
                            .with_context(|| format!("loading {}", p.display()))?,
                        None => dir.dataset("val.json")?,
                    };
                    let images = dir.images(&[&ds])?;
                    let params = ParamStore::load(&ckpt)
                        .with_context(|| format!("loading {}", ckpt.display()))?;
                    let det = Detector::new(cfg.model.clone())?;
                    let records = detect_dataset(&det, &params, &ds, &images, &cfg)?;
                    if let Some(d) = dump {
                        let d = out_path(&d);
                        staged(&d, |tmp| Ok(save_jsonl(tmp, &records)?))?;
                    }
                    evaluate(
                        &records,
                        &ds,
                        &coco_thresholds(),
                        Some(cfg.seed),
                        &cfg.hash(),
                    )?
                }
                _ => bail!(ova::Error::Config(
                    "eval needs either --detections with --dataset, or --checkpoint with --data"
                        .into()
                )),
            };
            staged(&out, |tmp| write_json(tmp, &report))?;
            for (k, v) in report.metrics() {
                println!("{k}\t{v:.4}");
            }
        }
        Command::EmbedBank {
            cfg,
            dataset,
            names,
            captions,
            out,
        } => {
            let cfg = cfg.load()?;
            let dim = cfg.model.cls_dim;
            let bank = if let Some(p) = captions {
                let recs: Vec<CaptionRecord> =
                    load_jsonl(&p).with_context(|| format!("loading {}", p.display()))?;
                let mut texts: Vec<String> = recs.into_iter().map(|r| r.caption).collect();
                texts.sort();
                texts.dedup();
                EmbeddingBank::for_texts(&texts, dim, cfg.variants, cfg.dropout_rate, cfg.seed)?
            } else {
                let list = if let Some(p) = names {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect()
                } else {
                    let p =
                        dataset.context("one of --dataset, --names or --captions is required")?;
                    DetectionDataset::load(&p)
                        .with_context(|| format!("loading {}", p.display()))?
                        .category_names()
                };
                pipeline::class_bank(&list, &cfg)?
            };
            let out = out_path(&out);
            staged(&out, |tmp| Ok(bank.save(tmp)?))?;
            eprintln!(
                "{} queries, K = {}, dim = {}",
                bank.len(),
                bank.k(),
                bank.dim()
            );
            println!("{}", out.display());
        }
        Command::Report { runs, out } => {
            let summaries = report(&runs)?;
            print_table(&summaries);
            if let Some(o) = out {
                let o = out_path(&o);
                staged(&o, |tmp| write_json(tmp, &summaries))?;
            }
        }
    }
    Ok(())
}

fn finish_run(
    command: &str,
    cfg: &TrainConfig,
    m: pipeline::TrainedModel,
    dir: &Path,
) -> Result<()> {
    m.params.save(dir.join("model.ckpt"))?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut manifest = RunManifest::new(command, cfg);
    manifest.history = m.history;
    manifest.report = Some(m.report.clone());
    manifest.save(dir.join("manifest.json"))?;
    write_json(&dir.join("report.json"), &m.report)?;
    for (k, v) in m.report.metrics() {
        println!("{k}\t{v:.4}");
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct GroupSummary {
    command: String,
    seeds: Vec<u64>,
    #[serde(flatten)]
    summary: SeedSummary,
}

fn report(runs: &[PathBuf]) -> Result<Vec<GroupSummary>> {
    let mut groups: BTreeMap<(String, String), Vec<RunManifest>> = BTreeMap::new();
    for r in runs {
        let p = if r.is_dir() {
            r.join("manifest.json")
        } else {
            r.clone()
        };
        let m = RunManifest::load(&p).with_context(|| format!("loading {}", p.display()))?;
        if m.report.is_none() {
            eprintln!("skipping {}: no evaluation report", p.display());
            continue;
        }
        groups
            .entry((m.command.clone(), m.config_hash.clone()))
            .or_default()
            .push(m);
    }
    if groups.is_empty() {
        bail!(ova::Error::Data(
            "no evaluated runs among the given manifests".into()
        ));
    }
    groups
        .into_iter()
        .map(|((command, _), ms)| {
            let mut seeds: Vec<u64> = ms.iter().map(|m| m.seed).collect();
            seeds.sort_unstable();
            let reports: Vec<_> = ms.into_iter().filter_map(|m| m.report).collect();
            Ok(GroupSummary {
                command,
                seeds,
                summary: aggregate_seeds(&reports)?,
            })
        })
        .collect()
}

fn print_table(groups: &[GroupSummary]) {
    let cols = ["mAP_all", "mAP_rare", "mAP_common", "mAP_frequent"];
    print!("{:<10} {:<16} {:>4}", "command", "config", "runs");
    for c in cols {
        print!(" {c:>17}");
    }
    println!();
    for g in groups {
        print!(
            "{:<10} {:<16} {:>4}",
            g.command, g.summary.config_hash, g.summary.runs
        );
        for c in cols {
            match g.summary.metrics.get(c) {
                Some(m) => print!(" {:>17}", format!("{:.4} ± {:.4}", m.mean, m.std)),
                None => print!(" {:>17}", "-"),
            }
        }
        println!();
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<ova::Error>() {
            return match err {
                ova::Error::Config(_) => 1,
                ova::Error::Numeric(_) | ova::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
