//! Batch driver behind the `seppmix` binary.
//!
//! Every command reads one flat JSON config (`--config`), applies flag
//! overrides (flags win), validates the result and then works inside `--out`.
//! Exit codes: 0 ok, 2 config error, 3 ingestion error, 4 output conflict,
//! 5 numerical failure, 1 anything else.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cam::{render_heatmap, SemanticMap};
use crate::checkpoint::{self, CheckpointManifest};
use crate::datakit::{load_image_folder, make_synthetic, save_image_folder, split_base_novel, LabeledDataset, SplitManifest};
use crate::error::{Error, Result};
use crate::fewshot::{evaluate, evaluate_shots, EvalConfig, EvalReport};
use crate::mixkit::{
    cutmix, mixup, patchmix, sample_beta_lambda, seppmix, MixedSample, MixerKind, Source,
};
use crate::nettrain::{
    pretrain_for_cams, semantic_map_for, train_with_observer, CamRefresh, EpochMetrics, LmReduction, RotationMode,
    TrainConfig,
};
use crate::nn::Model;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Folder,
}

/// Every setting a command can read, in one flat namespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_seed: Option<u64>,
    pub image_size: usize,
    pub base_fraction: f64,
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,

    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub grid_n: usize,
    pub cam_refresh: CamRefresh,
    pub rotations: RotationMode,
    pub mixer: MixerKind,
    pub alpha: f64,
    pub beta: f64,
    pub pretrain_epochs: usize,
    pub mix_probability: f64,
    pub mix_alpha: f64,
    pub lm_rotation_reduction: LmReduction,
    pub freeze_head: bool,
    pub dropout: f64,
    pub hflip: bool,
    pub channels: Vec<usize>,
    pub init_from_pretrained: bool,

    pub n_way: usize,
    pub k_shot: usize,
    pub h_query: usize,
    pub episodes: usize,
    pub l2: f64,
    pub normalize_embeddings: bool,
    /// Shot counts reported by `compare-mixers`.
    pub compare_shots: Vec<usize>,

    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EvalConfig::default();
        Self {
            dataset: DatasetSource::Synthetic,
            synthetic_classes: 24,
            synthetic_per_class: 100,
            synthetic_seed: None,
            image_size: 32,
            base_fraction: 2.0 / 3.0,
            data_root: None,
            manifest: None,
            seed: t.seed,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            milestones: t.milestones,
            lr_decay: t.lr_decay,
            batch_size: t.batch_size,
            grid_n: t.grid_n,
            cam_refresh: t.cam_refresh,
            rotations: t.rotations,
            mixer: t.mixer,
            alpha: t.alpha,
            beta: t.beta,
            pretrain_epochs: t.pretrain_epochs,
            mix_probability: t.mix_probability,
            mix_alpha: t.mix_alpha,
            lm_rotation_reduction: t.lm_rotation_reduction,
            freeze_head: t.freeze_head,
            dropout: t.dropout,
            hflip: t.hflip,
            channels: t.channels,
            init_from_pretrained: t.init_from_pretrained,
            n_way: e.n_way,
            k_shot: e.k_shot,
            h_query: e.h_query,
            episodes: e.episodes,
            l2: e.l2,
            normalize_embeddings: e.normalize,
            compare_shots: vec![1, 5],
            out: None,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            milestones: self.milestones.clone(),
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            grid_n: self.grid_n,
            seed: self.seed,
            cam_refresh: self.cam_refresh,
            rotations: self.rotations,
            mixer: self.mixer,
            alpha: self.alpha,
            beta: self.beta,
            pretrain_epochs: self.pretrain_epochs,
            mix_probability: self.mix_probability,
            mix_alpha: self.mix_alpha,
            lm_rotation_reduction: self.lm_rotation_reduction,
            freeze_head: self.freeze_head,
            dropout: self.dropout,
            hflip: self.hflip,
            channels: self.channels.clone(),
            init_from_pretrained: self.init_from_pretrained,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            h_query: self.h_query,
            episodes: self.episodes,
            l2: self.l2,
            normalize: self.normalize_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval_config().validate()?;
        if self.pretrain_epochs == 0 {
            return Err(Error::Config("pretrain_epochs must be at least 1".into()));
        }
        if self.compare_shots.is_empty() || self.compare_shots.contains(&0) {
            return Err(Error::Config("compare_shots must list positive shot counts".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        match self.dataset {
            DatasetSource::Synthetic => {
                if self.synthetic_classes < 4 || self.synthetic_per_class < 2 || self.image_size < 4 {
                    return Err(Error::Config("synthetic dataset needs ≥ 4 classes, ≥ 2 per class, size ≥ 4".into()));
                }
            }
            DatasetSource::Folder => {
                if self.data_root.is_none() || self.manifest.is_none() {
                    return Err(Error::Config("folder datasets need data_root and manifest".into()));
                }
            }
        }
        Ok(())
    }

    /// Base (training) and novel (evaluation) datasets.
    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.dataset {
            DatasetSource::Synthetic => {
                let all = make_synthetic(
                    self.synthetic_classes,
                    self.synthetic_per_class,
                    self.image_size,
                    self.synthetic_seed.unwrap_or(self.seed),
                )?;
                split_base_novel(&all, self.base_fraction)
            }
            DatasetSource::Folder => {
                let root = self.data_root.as_deref().expect("validated");
                let manifest = SplitManifest::load(self.manifest.as_deref().expect("validated"))?;
                Ok((load_image_folder(root, &manifest, "train")?, load_image_folder(root, &manifest, "test")?))
            }
        }
    }
}

/// Flags shared by every command; any flag given overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file (flat namespace, unknown keys rejected).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// none | mixup | cutmix | patchmix | seppmix
    #[arg(long, global = true)]
    pub mixer: Option<MixerKind>,
    /// Checkpoint directory of a pretrained model (CAM source).
    #[arg(long, global = true)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_way: Option<usize>,
    #[arg(long, global = true)]
    pub k_shot: Option<usize>,
    #[arg(long, global = true)]
    pub h_query: Option<usize>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// Worker threads for data preparation and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Parser)]
#[command(name = "seppmix", version, about = "Semantic patch mixing for few-shot image classification")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Plain supervised training on the base classes (CAM bootstrap).
    Pretrain,
    /// Mixed training with the rotation auxiliary loss.
    Train,
    /// Episodic evaluation of a checkpoint on the novel classes.
    Eval {
        /// Checkpoint directory.
        checkpoint: PathBuf,
    },
    /// Writes mixed-sample previews with labels and CAM heatmaps.
    MixPreview {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Trains and evaluates every mixer and the rotation ablation.
    CompareMixers,
    /// Writes the synthetic dataset as an image folder with a manifest.
    MakeSynthetic,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Ingestion(_) | Error::Checkpoint(_) => 3,
        Error::OutputConflict(_) => 4,
        Error::Numerical(_) => 5,
        Error::Io(_) | Error::Json(_) => 1,
    }
}

/// Config file, then flag overrides, then validation.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = common.mixer {
        cfg.mixer = v;
    }
    if let Some(v) = common.n_way {
        cfg.n_way = v;
    }
    if let Some(v) = common.k_shot {
        cfg.k_shot = v;
    }
    if let Some(v) = common.h_query {
        cfg.h_query = v;
    }
    if let Some(v) = common.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = common.workers {
        cfg.workers = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite`.
pub fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::OutputConflict(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for m in metrics {
        writeln!(f, "{}", serde_json::to_string(m)?)?;
    }
    Ok(())
}

fn load_pretrained(path: Option<&Path>) -> Result<Option<(Model, CheckpointManifest)>> {
    path.map(checkpoint::load).transpose()
}

fn report_epoch(m: &EpochMetrics) {
    eprintln!(
        "epoch {:>3}  lr {:.5}  L_m {:.4}  L_r {:.4}  L_base {:.4}  acc {:.3}",
        m.epoch, m.lr, m.l_m, m.l_r, m.l_base, m.train_accuracy
    );
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let threads = cfg.workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(&cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(cfg, common.overwrite).map(|_| ()),
        Command::Train => cmd_train(cfg, common.pretrained.as_deref(), common.overwrite).map(|_| ()),
        Command::Eval { checkpoint } => {
            let report = cmd_eval(cfg, checkpoint, common.overwrite)?;
            println!("{}", report.summary_line());
            Ok(())
        }
        Command::MixPreview { count } => cmd_mix_preview(cfg, common.pretrained.as_deref(), *count, common.overwrite),
        Command::CompareMixers => {
            let table = cmd_compare_mixers(cfg, common.pretrained.as_deref(), common.overwrite)?;
            println!("{}", table.to_markdown());
            Ok(())
        }
        Command::MakeSynthetic => cmd_make_synthetic(cfg, common.overwrite).map(|_| ()),
    }
}

/// Bootstrap pretraining; writes `model.bin`, `manifest.json`, `metrics.jsonl`.
pub fn cmd_pretrain(cfg: &RunConfig, overwrite: bool) -> Result<CheckpointManifest> {
    let out = output_dir(cfg)?;
    let (base, _) = cfg.load_datasets()?;
    prepare_output(&out, overwrite)?;
    let train_cfg = cfg.train_config();
    let outcome = pretrain_for_cams(&base, &train_cfg)?;
    outcome.metrics.iter().for_each(report_epoch);
    write_metrics(&out.join("metrics.jsonl"), &outcome.metrics)?;
    checkpoint::save(&out, &outcome.model, "pretrain", &train_cfg.pretrain_stage(), cfg.seed, &outcome.metrics)
}

/// Mixed training; `pretrained` is required for `seppmix`.
pub fn cmd_train(cfg: &RunConfig, pretrained: Option<&Path>, overwrite: bool) -> Result<CheckpointManifest> {
    let out = output_dir(cfg)?;
    if cfg.mixer == MixerKind::Seppmix && pretrained.is_none() {
        return Err(Error::Config("mixer seppmix needs --pretrained as CAM source".into()));
    }
    let (base, _) = cfg.load_datasets()?;
    let source = load_pretrained(pretrained)?;
    prepare_output(&out, overwrite)?;
    let train_cfg = cfg.train_config();
    let outcome = train_with_observer(&base, &train_cfg, source.as_ref().map(|(m, _)| m), &mut report_epoch)?;
    write_metrics(&out.join("metrics.jsonl"), &outcome.metrics)?;
    checkpoint::save(&out, &outcome.model, "train", &train_cfg, cfg.seed, &outcome.metrics)
}

/// Episodic evaluation; writes `report.json` when `--out` is given.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_dir: &Path, overwrite: bool) -> Result<EvalReport> {
    let (model, manifest) = checkpoint::load(checkpoint_dir)?;
    let (_, novel) = cfg.load_datasets()?;
    let mut report = evaluate(&model, &novel, &cfg.eval_config(), cfg.seed)?;
    report.checkpoint_id = Some(manifest.checkpoint_id);
    if let Some(out) = &cfg.out {
        prepare_output(out, overwrite)?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct PreviewSource {
    instance: u64,
    class_id: usize,
    class_name: String,
}

#[derive(Debug, Serialize)]
struct PreviewLabel {
    mixer: MixerKind,
    source_a: PreviewSource,
    source_b: PreviewSource,
    grid_n: Option<usize>,
    mask: Option<Vec<Vec<u8>>>,
    cut_box: Option<crate::mixkit::CutBox>,
    rho_a: f64,
    rho_b: f64,
    label: Vec<f64>,
    semantic_map_a: Option<Vec<Vec<f64>>>,
    semantic_map_b: Option<Vec<Vec<f64>>>,
}

fn map_rows(s: &SemanticMap) -> Vec<Vec<f64>> {
    s.values().chunks(s.width()).map(<[f64]>::to_vec).collect()
}

fn save_png(img: &::image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("cannot write {}: {e}", path.display()))))
}

/// Writes `count` preview sets: `NNN_a.png`, `NNN_b.png`, `NNN_mixed.png`,
/// `NNN_label.json` and, when a CAM source is available, `NNN_cam_a.png` and
/// `NNN_cam_b.png`.
pub fn cmd_mix_preview(cfg: &RunConfig, pretrained: Option<&Path>, count: usize, overwrite: bool) -> Result<()> {
    let out = output_dir(cfg)?;
    if cfg.mixer == MixerKind::Seppmix && pretrained.is_none() {
        return Err(Error::Config("seppmix previews need --pretrained as CAM source".into()));
    }
    let (base, _) = cfg.load_datasets()?;
    let source = load_pretrained(pretrained)?;
    prepare_output(&out, overwrite)?;
    let mut rng = SeededRng::new(cfg.seed);
    let n_classes = base.num_classes();
    let samples = base.samples();
    for i in 0..count {
        let ia = rng.below(samples.len());
        let ib = (ia + 1 + rng.below(samples.len() - 1)) % samples.len();
        let (sa, sb) = (&samples[ia], &samples[ib]);
        let a = Source::new(&sa.image, sa.class_id, sa.instance);
        let b = Source::new(&sb.image, sb.class_id, sb.instance);
        let maps = match &source {
            Some((model, _)) => Some((
                semantic_map_for(model, &sa.image, sa.class_id)?,
                semantic_map_for(model, &sb.image, sb.class_id)?,
            )),
            None => None,
        };
        let mixed: MixedSample = match cfg.mixer {
            MixerKind::None => MixedSample::plain(a, n_classes)?,
            MixerKind::Mixup => mixup(a, b, sample_beta_lambda(cfg.mix_alpha, &mut rng)?, n_classes)?,
            MixerKind::Cutmix => cutmix(a, b, n_classes, &mut rng)?,
            MixerKind::Patchmix => patchmix(a, b, cfg.grid_n, n_classes, &mut rng)?,
            MixerKind::Seppmix => {
                let (ma, mb) = maps.as_ref().expect("checked above");
                seppmix(a, b, ma, mb, cfg.grid_n, n_classes, &mut rng)?
            }
        };
        let stem = format!("{i:03}");
        save_png(&sa.image.to_rgb8(), &out.join(format!("{stem}_a.png")))?;
        save_png(&sb.image.to_rgb8(), &out.join(format!("{stem}_b.png")))?;
        save_png(&mixed.image.to_rgb8(), &out.join(format!("{stem}_mixed.png")))?;
        if let Some((ma, mb)) = &maps {
            save_png(&render_heatmap(ma), &out.join(format!("{stem}_cam_a.png")))?;
            save_png(&render_heatmap(mb), &out.join(format!("{stem}_cam_b.png")))?;
        }
        let p = &mixed.provenance;
        let label = PreviewLabel {
            mixer: p.mixer,
            source_a: PreviewSource {
                instance: sa.instance,
                class_id: sa.class_id,
                class_name: base.classes()[sa.class_id].clone(),
            },
            source_b: PreviewSource {
                instance: sb.instance,
                class_id: sb.class_id,
                class_name: base.classes()[sb.class_id].clone(),
            },
            grid_n: p.mask.as_ref().map(|m| m.grid_n()),
            mask: p.mask.as_ref().map(|m| m.to_rows()),
            cut_box: p.cut_box,
            rho_a: p.rho_a,
            rho_b: p.rho_b,
            label: mixed.label.weights().to_vec(),
            semantic_map_a: maps.as_ref().map(|(m, _)| map_rows(m)),
            semantic_map_b: maps.as_ref().map(|(_, m)| map_rows(m)),
        };
        fs::write(out.join(format!("{stem}_label.json")), serde_json::to_string_pretty(&label)? + "\n")?;
    }
    Ok(())
}

/// One row of the mixer comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub mixer: MixerKind,
    pub rotation: bool,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub shots: Vec<usize>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    /// Markdown table; every row after the first shows its difference to the
    /// first (the no-mixing baseline) in percentage points.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for k in &self.shots {
            s += &format!(" {k}-shot |");
        }
        s += "\n|---|";
        s += &"---|".repeat(self.shots.len());
        s += "\n";
        let baseline = self.rows.first();
        for (r, row) in self.rows.iter().enumerate() {
            s += &format!("| {} |", row.method);
            for (i, rep) in row.reports.iter().enumerate() {
                s += &format!(" {}", rep.cell());
                if r > 0 {
                    if let Some(b) = baseline {
                        let delta = 100.0 * (rep.mean_accuracy - b.reports[i].mean_accuracy);
                        s += &format!(" ({delta:+.2})");
                    }
                }
                s += " |";
            }
            s += "\n";
        }
        s
    }
}

/// The six comparison rows: mixer, rotation on, row label.
pub const COMPARE_ROWS: [(MixerKind, bool, &str); 6] = [
    (MixerKind::None, false, "baseline (none)"),
    (MixerKind::Mixup, false, "mixup"),
    (MixerKind::Cutmix, false, "cutmix"),
    (MixerKind::Patchmix, false, "patchmix"),
    (MixerKind::Seppmix, false, "seppmix (w/o r)"),
    (MixerKind::Seppmix, true, "seppmix (w/ r)"),
];

/// Training config of one comparison row.
pub fn compare_row_config(base: &TrainConfig, mixer: MixerKind, rotation: bool) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.mixer = mixer;
    if rotation {
        if cfg.rotations == RotationMode::Off {
            cfg.rotations = RotationMode::All;
        }
    } else {
        cfg.rotations = RotationMode::Off;
        cfg.beta = 0.0;
    }
    cfg
}

/// Trains every row from the same pretrained model and evaluates all rows on
/// the same episodes. Writes `compare.md` and `compare.json`.
pub fn cmd_compare_mixers(cfg: &RunConfig, pretrained: Option<&Path>, overwrite: bool) -> Result<CompareTable> {
    let out = output_dir(cfg)?;
    let (base, novel) = cfg.load_datasets()?;
    let loaded = load_pretrained(pretrained)?;
    prepare_output(&out, overwrite)?;
    let train_cfg = cfg.train_config();
    let source = match loaded {
        Some((m, _)) => m,
        None => {
            eprintln!("pretraining CAM source for {} epochs", cfg.pretrain_epochs);
            let outcome = pretrain_for_cams(&base, &train_cfg)?;
            checkpoint::save(&out.join("pretrain"), &outcome.model, "pretrain", &train_cfg.pretrain_stage(), cfg.seed, &outcome.metrics)?;
            outcome.model
        }
    };
    let eval_cfg = cfg.eval_config();
    let mut rows = Vec::with_capacity(COMPARE_ROWS.len());
    for (mixer, rotation, label) in COMPARE_ROWS {
        eprintln!("training row `{label}`");
        let row_cfg = compare_row_config(&train_cfg, mixer, rotation);
        let outcome = train_with_observer(&base, &row_cfg, Some(&source), &mut report_epoch)?;
        let reports = evaluate_shots(&outcome.model, &novel, &eval_cfg, &cfg.compare_shots, cfg.seed)?;
        rows.push(CompareRow {
            method: label.to_string(),
            mixer,
            rotation,
            reports,
        });
    }
    let table = CompareTable {
        shots: cfg.compare_shots.clone(),
        rows,
    };
    fs::write(out.join("compare.md"), table.to_markdown())?;
    fs::write(out.join("compare.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(table)
}

/// Writes the configured synthetic dataset as `out/<class>/<nnnn>.png` plus
/// `out/manifest.json`. Base classes form the train split; the novel classes
/// are divided between val and test.
pub fn cmd_make_synthetic(cfg: &RunConfig, overwrite: bool) -> Result<SplitManifest> {
    let out = output_dir(cfg)?;
    let all = make_synthetic(
        cfg.synthetic_classes,
        cfg.synthetic_per_class,
        cfg.image_size,
        cfg.synthetic_seed.unwrap_or(cfg.seed),
    )?;
    let (base, novel) = split_base_novel(&all, cfg.base_fraction)?;
    prepare_output(&out, overwrite)?;
    save_image_folder(&all, &out)?;
    let n_val = novel.num_classes() / 2;
    let manifest = SplitManifest {
        name: all.name.clone(),
        image_size: cfg.image_size,
        train: base.classes().to_vec(),
        val: novel.classes()[..n_val].to_vec(),
        test: novel.classes()[n_val..].to_vec(),
    };
    manifest.validate()?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
