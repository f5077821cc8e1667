//! Command-line front end.

use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{self, DatasetManifest, NoiseSpec, Split, Task};
use crate::dem_synth::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{self, Head, ModelParameters};
use crate::report::{self, CurveMetric, GalleryRow, RunRecord};
use crate::train::{self, InitKind, InitSources};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "terra-ssl", version, about = "Terrain-aware pretraining for building segmentation on elevation rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global, pretraining and fine-tuning seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub label_fraction: Option<f64>,
    /// random, proxy or terrain.
    #[arg(long, global = true)]
    pub init: Option<InitKind>,
    /// TOML file holding a label-noise spec.
    #[arg(long, global = true)]
    pub noise: Option<PathBuf>,
    /// Output root; overrides `output_root`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, tiles and manifests.
    GenData,
    /// Pretrain on the DSM→DTM task (`--init terrain`) or the texture proxy (`--init proxy`).
    Pretrain,
    /// Fine-tune a segmentation model under a label budget.
    Finetune,
    /// Score a fine-tuned model on the test split.
    Eval {
        /// Score the labels against themselves (debug check of the pipeline).
        #[arg(long)]
        oracle: bool,
    },
    /// Merge fine-tuning runs into plots and a comparison table.
    Report {
        /// Run directories; defaults to every fine-tuning run under the output root.
        runs: Vec<PathBuf>,
    },
}

/// Paths under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, task: Task) -> PathBuf {
        self.root.join("data").join(task.to_string())
    }

    pub fn manifest(&self, task: Task) -> PathBuf {
        self.data(task).join("manifest.tsv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn pretrain_run(&self, init: InitKind) -> PathBuf {
        self.runs().join(format!("pretrain-{init}"))
    }

    pub fn finetune_run(&self, init: InitKind, fraction: f64, seed: u64) -> PathBuf {
        self.runs().join(format!("finetune-{init}-f{fraction}-s{seed}"))
    }

    pub fn eval_run(&self, init: InitKind, fraction: f64, seed: u64) -> PathBuf {
        self.runs().join(format!("eval-{init}-f{fraction}-s{seed}"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
    }
    if let Some(f) = cli.label_fraction {
        cfg.finetune.label_fraction = f;
    }
    if let Some(i) = cli.init {
        cfg.finetune.init = i;
    }
    if let Some(o) = &cli.out {
        cfg.output_root = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_noise(path: &Path) -> Result<NoiseSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let spec: NoiseSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let layout = Layout { root: cfg.output_root.clone() };
    let noise = cli.noise.as_deref().map(read_noise).transpose()?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &layout, noise.as_ref()),
        Command::Pretrain => cmd_pretrain(&cfg, &layout, cli.init.unwrap_or(InitKind::Terrain)),
        Command::Finetune => cmd_finetune(&cfg, &layout, noise.as_ref()).map(|_| ()),
        Command::Eval { oracle } => cmd_eval(&cfg, &layout, noise.as_ref(), *oracle),
        Command::Report { runs } => cmd_report(&cfg, &layout, runs),
    }
}

fn scene_seed(base: u64, task: Task, i: usize) -> u64 {
    let stream = match task {
        Task::Pretext => 10_000,
        Task::Segmentation => 20_000,
    };
    base.wrapping_mul(1_000_003).wrapping_add(stream + i as u64)
}

/// Generates the scenes for one corpus and indexes their tiles.
pub fn build_corpus(cfg: &ExperimentConfig, task: Task, scene_root: Option<&Path>) -> Result<(DatasetManifest, BTreeMap<String, PathBuf>)> {
    let d = &cfg.dataset;
    let count = match task {
        Task::Pretext => d.pretext_scenes,
        Task::Segmentation => d.segmentation_scenes,
    };
    let mut records = Vec::new();
    let mut dirs = BTreeMap::new();
    for i in 0..count {
        let sc = SynthConfig { seed: scene_seed(cfg.seed, task, i), ..cfg.synth.clone() };
        let mut scene = dem_synth::generate_scene(&sc)?;
        if task == Task::Segmentation && d.rescale_factor > 1 {
            scene = dem_synth::rescale_scene(&scene, d.rescale_factor)?;
        }
        if let Some(root) = scene_root {
            let dir = root.join(&scene.scene_id);
            dem_synth::write_scene(&scene, &sc.hash(), &dir)?;
            dirs.insert(scene.scene_id.clone(), dir);
        }
        for t in dataset::tile_scene(&scene, d.tile_px, d.stride_px, task)? {
            records.push(dataset::normalize_tile(&t, d.norm)?);
        }
    }
    let manifest = dataset::make_splits(records, d.split, task, cfg.seed)?;
    Ok((manifest, dirs))
}

fn cmd_gen_data(cfg: &ExperimentConfig, layout: &Layout, noise: Option<&NoiseSpec>) -> Result<()> {
    for task in [Task::Pretext, Task::Segmentation] {
        let data = layout.data(task);
        let (mut manifest, dirs) = build_corpus(cfg, task, Some(&data.join("scenes")))?;
        if task == Task::Segmentation {
            for spec in cfg.dataset.noise.iter().chain(noise) {
                manifest = dataset::inject_label_noise(&manifest, spec)?;
            }
        }
        dataset::write_manifest(&manifest, &dirs, cfg.dataset.norm, &layout.manifest(task))?;
        println!(
            "{task}: {} scenes, {} tiles (train {}, val {}, test {})",
            dirs.len(),
            manifest.entries.len(),
            manifest.count(Split::Train),
            manifest.count(Split::Val),
            manifest.count(Split::Test)
        );
    }
    cfg.write_snapshot(&layout.root.join("data"))?;
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, layout: &Layout, init: InitKind) -> Result<()> {
    if init == InitKind::Random {
        return Err(Error::Config("pretrain needs --init terrain or --init proxy".into()));
    }
    let manifest = dataset::read_manifest(&layout.manifest(Task::Pretext))?;
    let model_cfg = cfg.model.with_head(Head::Reconstruction);
    let start = model::build_model(&model_cfg, cfg.pretrain.seed)?;
    let (outcome, corpus) = match init {
        InitKind::Terrain => (train::pretrain(start, &manifest, &cfg.pretrain, &cfg.losses)?, manifest),
        InitKind::Proxy => {
            let tex = train::texture_manifest(&manifest, cfg.seed)?;
            (train::make_proxy_init(start, &tex, &cfg.pretrain, &cfg.losses)?, tex)
        }
        InitKind::Random => unreachable!("rejected above"),
    };
    let dir = layout.pretrain_run(init);
    cfg.write_snapshot(&dir)?;
    train::save_outcome(&outcome, &dir)?;
    let test = train::evaluate_pretext(&outcome.best, &corpus, Split::Test, &cfg.losses)?;
    let mut metrics = outcome.history().clone();
    metrics.rows.extend(test.to_metrics(outcome.best_meta.epoch, outcome.best_meta.step).rows);
    metrics.write(&dir.join(report::METRICS_FILE))?;
    let size = (cfg.report.plot_width, cfg.report.plot_height);
    let rec = pseudo_record(&dir, init, &metrics);
    report::plot_curves(std::slice::from_ref(&rec), "val", CurveMetric::Loss, size, &dir.join("val_loss.svg"))?;
    println!(
        "pretrain {init}: best epoch {} val loss {:.6}; test loss {:.6}, structure IoU {:.4}, bIoU {:.4}",
        outcome.best_meta.epoch, outcome.state.best_val, test.loss, test.noisy.iou, test.noisy.biou
    );
    Ok(())
}

fn pseudo_record(dir: &Path, init: InitKind, history: &crate::metrics::MetricsReport) -> RunRecord {
    RunRecord {
        dir: dir.to_path_buf(),
        init,
        fraction: 1.0,
        seed: 0,
        labeled: 0,
        iou: 0.0,
        biou: 0.0,
        clean_iou: 0.0,
        clean_biou: 0.0,
        history: history.clone(),
    }
}

fn load_source(layout: &Layout, init: InitKind) -> Result<Option<ModelParameters<f32>>> {
    if init == InitKind::Random {
        return Ok(None);
    }
    let (p, _) = load_checkpoint(&layout.pretrain_run(init).join("best"), None)?;
    Ok(Some(p))
}

fn segmentation_manifest(layout: &Layout, noise: Option<&NoiseSpec>) -> Result<DatasetManifest> {
    let mut m = dataset::read_manifest(&layout.manifest(Task::Segmentation))?;
    if let Some(spec) = noise {
        m = dataset::inject_label_noise(&m, spec)?;
    }
    Ok(m)
}

/// Runs one fine-tuning cell and writes its run directory.
pub fn cmd_finetune(cfg: &ExperimentConfig, layout: &Layout, noise: Option<&NoiseSpec>) -> Result<PathBuf> {
    let ft = &cfg.finetune;
    let manifest = segmentation_manifest(layout, noise)?;
    let mut sources = InitSources::default();
    match ft.init {
        InitKind::Proxy => sources.proxy = load_source(layout, ft.init)?,
        InitKind::Terrain => sources.terrain = load_source(layout, ft.init)?,
        InitKind::Random => {}
    }
    let seg_cfg = cfg.model.with_head(Head::Segmentation);
    let (summary, outcome) =
        train::run_cell(ft.init, &sources, &seg_cfg, &manifest, ft.label_fraction, ft.seed, ft, &cfg.losses)?;
    let dir = layout.finetune_run(ft.init, ft.label_fraction, ft.seed);
    cfg.write_snapshot(&dir)?;
    train::save_outcome(&outcome, &dir)?;
    let mut metrics = summary.history.clone();
    metrics.rows.extend(summary.test.to_metrics(outcome.best_meta.epoch, outcome.best_meta.step).rows);
    metrics.write(&dir.join(report::METRICS_FILE))?;
    let rec = RunRecord {
        dir: dir.clone(),
        init: summary.init,
        fraction: summary.fraction,
        seed: summary.seed,
        labeled: summary.labeled_tiles,
        iou: summary.test.noisy.iou,
        biou: summary.test.noisy.biou,
        clean_iou: summary.test.clean.iou,
        clean_biou: summary.test.clean.biou,
        history: metrics,
    };
    report::write_summary(&rec, &dir)?;
    write_gallery(&outcome.best, &manifest, cfg.eval.gallery_tiles, &dir.join("gallery.png"))?;
    print!("{}", report::table_text(&report::table_from_runs(&[rec])));
    Ok(dir)
}

fn write_gallery(params: &ModelParameters<f32>, manifest: &DatasetManifest, n: usize, path: &Path) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let mut tiles: Vec<&dataset::TileRecord> = manifest.split(Split::Test).map(|e| &e.record).collect();
    tiles.sort_by_key(|t| std::cmp::Reverse(t.clean_mask().map_or(0, |m| m.count())));
    tiles.truncate(n);
    let mut preds = Vec::with_capacity(tiles.len());
    for t in &tiles {
        preds.push(train::predict_mask(params, t)?);
    }
    let rows: Vec<GalleryRow<'_>> = tiles
        .iter()
        .zip(&preds)
        .map(|(t, p)| GalleryRow { input: &t.input, truth: t.mask().unwrap(), pred: p })
        .collect();
    if rows.is_empty() {
        return Ok(());
    }
    report::write_gallery(&rows, path)
}

fn cmd_eval(cfg: &ExperimentConfig, layout: &Layout, noise: Option<&NoiseSpec>, oracle: bool) -> Result<()> {
    let ft = &cfg.finetune;
    let manifest = segmentation_manifest(layout, noise)?;
    let report = if oracle {
        train::evaluate_oracle(&manifest, Split::Test, cfg.eval.boundary_d)?
    } else {
        let ckpt = layout.finetune_run(ft.init, ft.label_fraction, ft.seed).join("best");
        let (params, _) = load_checkpoint(&ckpt, Some(&cfg.model.with_head(Head::Segmentation)))?;
        train::evaluate(&params, &manifest, Split::Test, None, cfg.eval.boundary_d, &cfg.losses)?
    };
    let dir = layout.eval_run(ft.init, ft.label_fraction, ft.seed);
    cfg.write_snapshot(&dir)?;
    report.to_metrics(0, 0).write(&dir.join(report::METRICS_FILE))?;
    println!(
        "test: IoU {:.4} bIoU {:.4} Score {:.4} | clean IoU {:.4} bIoU {:.4} Score {:.4}",
        report.noisy.iou, report.noisy.biou, report.noisy.score, report.clean.iou, report.clean.biou, report.clean.score
    );
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig, layout: &Layout, runs: &[PathBuf]) -> Result<()> {
    let dirs: Vec<PathBuf> = if runs.is_empty() {
        let root = layout.runs();
        let mut v: Vec<PathBuf> = std::fs::read_dir(&root)
            .map_err(|_| Error::Missing(root.clone()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("finetune-")))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Missing(root.join("finetune-*")));
        }
        v
    } else {
        runs.to_vec()
    };
    let records = dirs.iter().map(|d| report::read_run(d)).collect::<Result<Vec<_>>>()?;
    let rows = report::table_from_runs(&records);
    let out_dir = layout.report();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let text = report::table_text(&rows);
    let write = |name: &str, body: &str| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("table.txt", &text)?;
    write("table.tsv", &report::table_tsv(&rows))?;
    let size = (cfg.report.plot_width, cfg.report.plot_height);
    for (split, metric, name) in [
        ("train", CurveMetric::Loss, "train_loss.svg"),
        ("val", CurveMetric::Loss, "val_loss.svg"),
        ("val", CurveMetric::Iou, "val_iou.svg"),
        ("val", CurveMetric::Biou, "val_biou.svg"),
    ] {
        report::plot_curves(&records, split, metric, size, &out_dir.join(name))?;
    }
    print!("{text}");
    Ok(())
}
