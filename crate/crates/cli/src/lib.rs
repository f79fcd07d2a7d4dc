//! Command-line surface for the segmentation pipeline: corpus generation,
//! statistics, augmentation, training, prediction, evaluation, annotation
//! sampling, and the one-shot comparison experiment.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure. Every run writes a `manifest.txt` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use lg3d_core::augment::{extract_instances, AugmentConfig};
use lg3d_core::catalog::{CategoryRecord, LabelCatalog, Split, SplitSizes};
use lg3d_core::embed::{
    fit_pca, load_table_file, project, synthetic_anchors, write_table_file, SourceTag,
};
use lg3d_core::error::Error;
use lg3d_core::eval::{
    accumulate, ap_at_iou, instances_from_scene, map_range, metrics, sample_limited_annotations,
    ConfusionMatrix, InstancePrediction,
};
use lg3d_core::experiment::{run_experiment, Arm, ExperimentConfig};
use lg3d_core::losses::ContrastiveConfig;
use lg3d_core::model::{
    checkpoint, default_milestones, finetune, predict, pretrain, AnnotationMask, EncoderParams,
    FinetuneLoss, FinetuneOptions, TrainConfig, INPUT_DIM,
};
use lg3d_core::rng::substream;
use lg3d_core::scene::{
    read_predictions_file, read_scene_file, scene_stats, write_predictions_file, write_scene_file,
    Scene,
};
use lg3d_core::synth::{generate_synthetic_scene, synthetic_catalog, SyntheticSpec};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "lg3d", version, about = "Desk-scale language-grounded 3D segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat key=value config file; command-line flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Comma-separated epoch milestones for the step decay.
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    /// Voxel resolution in meters.
    #[arg(long)]
    resolution: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Per-scene labeled-cell subsample cap.
    #[arg(long)]
    max_cells: Option<usize>,
    /// Train on geometry only, zeroing the color features.
    #[arg(long)]
    no_color: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail scene corpus.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        categories: usize,
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        #[arg(long, default_value_t = 6.0)]
        extent: f64,
        #[arg(long, default_value_t = 2000.0)]
        density: f64,
        #[arg(long, default_value_t = 20)]
        objects: usize,
    },
    /// Per-category instance and point counts over a corpus.
    Stats {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Insert rare-category instances into every scene of a corpus.
    Augment {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Comma-separated category ids to sample; defaults to the tail split.
        #[arg(long)]
        ids: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        jitter_sigma: f64,
    },
    /// Contrastive pre-training of the encoder against text anchors.
    Pretrain {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// EMB1 anchor table; omitted -> deterministic synthetic anchors.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        anchor_dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        t_pos: Option<f64>,
        #[arg(long)]
        t_neg: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        n_neg: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Supervised fine-tuning of encoder plus classification head.
    Finetune {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Checkpoint to start from; omitted -> train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "ce")]
        loss: String,
        #[arg(long)]
        out: PathBuf,
        /// Directory of annotation masks produced by `annotate`.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Enable instance-sampling augmentation during training.
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = 8)]
        augment_samples: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predict per-point labels for scenes with a trained checkpoint.
    Predict {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Semantic-segmentation report from scene/prediction pairs.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Instance-segmentation mAP from a predictions JSON file.
    EvalInst {
        #[arg(long)]
        gt: PathBuf,
        /// JSON array of {indices, category, confidence}.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample limited-annotation masks for a corpus.
    Annotate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project an embedding table to a lower dimension with PCA.
    Pca {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-order, normalize, and store a raw EMB1 table against a catalog.
    EmbedImport {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value = "clip")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full method-comparison experiment from a config file.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

/// Flat key=value configuration file; `#` starts a comment line.
#[derive(Default)]
struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            for (lineno, line) in std::fs::read_to_string(path)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Format(format!("{}:{}: expected key=value", path.display(), lineno + 1))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(KvConfig { values })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }
}

fn parse_milestones(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad milestone `{p}`")))
        })
        .collect()
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let file = KvConfig::load(args.config.as_deref())?;
    let mut cfg = TrainConfig::default();
    cfg.seed = args.seed.or(file.get("seed")?).unwrap_or(cfg.seed);
    cfg.epochs = args.epochs.or(file.get("epochs")?).unwrap_or(cfg.epochs);
    cfg.learning_rate = args
        .learning_rate
        .or(file.get("learning_rate")?)
        .unwrap_or(cfg.learning_rate);
    cfg.momentum = args.momentum.or(file.get("momentum")?).unwrap_or(cfg.momentum);
    cfg.decay_factor = args
        .decay_factor
        .or(file.get("decay_factor")?)
        .unwrap_or(cfg.decay_factor);
    cfg.scenes_per_batch = args.batch.or(file.get("batch")?).unwrap_or(cfg.scenes_per_batch);
    cfg.resolution = args.resolution.or(file.get("resolution")?).unwrap_or(cfg.resolution);
    cfg.hidden_dim = args.hidden_dim.or(file.get("hidden_dim")?).unwrap_or(cfg.hidden_dim);
    cfg.feature_dim = args.feature_dim.or(file.get("feature_dim")?).unwrap_or(cfg.feature_dim);
    cfg.max_cells_per_scene = args.max_cells.or(file.get("max_cells")?).or(cfg.max_cells_per_scene);
    if args.no_color || file.get::<u8>("no_color")?.unwrap_or(0) != 0 {
        cfg.use_color = false;
    }
    let milestones = match (&args.milestones, file.values.get("milestones")) {
        (Some(s), _) => Some(parse_milestones(s)?),
        (None, Some(s)) => Some(parse_milestones(s)?),
        (None, None) => None,
    };
    cfg.decay_milestones = milestones.unwrap_or_else(|| default_milestones(cfg.epochs));
    Ok(cfg)
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.txt")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.txt");
        out.with_file_name(name)
    }
}

/// Write the reproducibility manifest (sorted key=value lines) next to the
/// command's outputs.
fn write_manifest(out: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    let mut map: BTreeMap<String, String> = entries.iter().cloned().collect();
    map.insert("command".into(), command.into());
    map.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
    map.insert(
        "format_version".into(),
        lg3d_core::scene::FORMAT_VERSION.to_string(),
    );
    let body: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(manifest_path(out), body)?;
    Ok(())
}

fn train_manifest_entries(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("seed".into(), cfg.seed.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("learning_rate".into(), cfg.learning_rate.to_string()),
        ("momentum".into(), cfg.momentum.to_string()),
        ("decay_factor".into(), cfg.decay_factor.to_string()),
        (
            "milestones".into(),
            cfg.decay_milestones
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("batch".into(), cfg.scenes_per_batch.to_string()),
        ("resolution".into(), cfg.resolution.to_string()),
        ("hidden_dim".into(), cfg.hidden_dim.to_string()),
        ("feature_dim".into(), cfg.feature_dim.to_string()),
        (
            "max_cells".into(),
            cfg.max_cells_per_scene.map(|v| v.to_string()).unwrap_or_default(),
        ),
        ("use_color".into(), cfg.use_color.to_string()),
    ]
}

/// All .sc3d files in a directory (sorted by name), or a single file path.
fn scene_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "sc3d"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no .sc3d files under {}", input.display())));
    }
    Ok(paths)
}

fn load_scenes(input: &Path) -> Result<Vec<(PathBuf, Scene)>> {
    scene_paths(input)?
        .into_iter()
        .map(|p| read_scene_file(&p).map(|s| (p, s)))
        .collect()
}

fn parse_source(s: &str) -> Result<SourceTag> {
    match s {
        "clip" => Ok(SourceTag::Clip),
        "bert" => Ok(SourceTag::Bert),
        "gpt2" => Ok(SourceTag::Gpt2),
        "synthetic" => Ok(SourceTag::Synthetic),
        other => Err(Error::Format(format!("unknown embedding source `{other}`"))),
    }
}

/// One annotation-mask file: selected point indices, one per line.
fn write_mask(path: &Path, mask: &AnnotationMask) -> Result<()> {
    let body: String = mask
        .0
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| format!("{i}\n"))
        .collect();
    std::fs::write(path, body)?;
    Ok(())
}

fn read_mask(path: &Path, n_points: usize) -> Result<AnnotationMask> {
    let mut mask = vec![false; n_points];
    for (lineno, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let idx: usize = line.trim().parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad point index", path.display(), lineno + 1))
        })?;
        if idx >= n_points {
            return Err(Error::Format(format!(
                "{}: index {idx} outside scene of {n_points} points",
                path.display()
            )));
        }
        mask[idx] = true;
    }
    Ok(AnnotationMask(mask))
}

fn mask_file_name(scene_path: &Path) -> String {
    format!(
        "{}.mask.txt",
        scene_path.file_stem().unwrap_or_default().to_string_lossy()
    )
}

fn load_checkpoint_params(path: &Path) -> Result<EncoderParams> {
    checkpoint::load(path).map(|(p, _)| p)
}

fn parse_arm(s: &str) -> Result<Arm> {
    if s == "ours" {
        return Ok(Arm {
            pretrained: true,
            loss: FinetuneLoss::ClassBalancedFocal,
            augmented: true,
        });
    }
    let mut parts = s.split('+');
    let pretrained = match parts.next() {
        Some("scratch") => false,
        Some("pretrain") => true,
        _ => return Err(Error::Format(format!("bad arm `{s}`"))),
    };
    let loss: FinetuneLoss = parts
        .next()
        .ok_or_else(|| Error::Format(format!("arm `{s}` is missing a loss")))?
        .parse()?;
    let augmented = match parts.next() {
        None => false,
        Some("augment") => true,
        Some(other) => return Err(Error::Format(format!("bad arm token `{other}`"))),
    };
    if parts.next().is_some() {
        return Err(Error::Format(format!("bad arm `{s}`")));
    }
    Ok(Arm { pretrained, loss, augmented })
}

fn build_experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let file = KvConfig::load(path)?;
    let mut cfg = ExperimentConfig::default();
    if let Some(s) = file.values.get("seeds") {
        cfg.seeds = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Format(format!("bad seed `{p}`"))))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = file.values.get("arms") {
        cfg.arms = s.split(',').map(|p| parse_arm(p.trim())).collect::<Result<_>>()?;
    }
    cfg.train_scenes = file.get("train_scenes")?.unwrap_or(cfg.train_scenes);
    cfg.val_scenes = file.get("val_scenes")?.unwrap_or(cfg.val_scenes);
    cfg.pretrain_epochs = file.get("pretrain_epochs")?.unwrap_or(cfg.pretrain_epochs);
    cfg.finetune_epochs = file.get("finetune_epochs")?.unwrap_or(cfg.finetune_epochs);
    cfg.focal_lr_scale = file.get("focal_lr_scale")?.unwrap_or(cfg.focal_lr_scale);
    cfg.anchor_dim = file.get("anchor_dim")?.unwrap_or(cfg.anchor_dim);
    cfg.corpus.n_categories = file.get("categories")?.unwrap_or(cfg.corpus.n_categories);
    cfg.corpus.zipf_exponent = file.get("zipf")?.unwrap_or(cfg.corpus.zipf_exponent);
    cfg.corpus.extent = file.get("extent")?.unwrap_or(cfg.corpus.extent);
    cfg.corpus.density = file.get("density")?.unwrap_or(cfg.corpus.density);
    cfg.corpus.objects_per_scene = file.get("objects")?.unwrap_or(cfg.corpus.objects_per_scene);
    cfg.train.resolution = file.get("resolution")?.unwrap_or(cfg.train.resolution);
    cfg.train.hidden_dim = file.get("hidden_dim")?.unwrap_or(cfg.train.hidden_dim);
    cfg.train.max_cells_per_scene = file.get("max_cells")?.or(cfg.train.max_cells_per_scene);
    cfg.train.scenes_per_batch = file.get("batch")?.unwrap_or(cfg.train.scenes_per_batch);
    cfg.train.learning_rate = file.get("learning_rate")?.unwrap_or(cfg.train.learning_rate);
    cfg.augment.n_samples = file.get("augment_samples")?.unwrap_or(cfg.augment.n_samples);
    cfg.augment.max_attempts = 10 * cfg.augment.n_samples;
    if let Some(head) = file.get("split_head")? {
        cfg.split_sizes.head = head;
    }
    if let Some(common) = file.get("split_common")? {
        cfg.split_sizes.common = common;
    }
    if let Some(tail) = file.get("split_tail")? {
        cfg.split_sizes.tail = tail;
    }
    Ok(cfg)
}

fn cmd_gen(
    seed: u64,
    n_scenes: usize,
    out: &Path,
    categories: usize,
    zipf: f64,
    extent: f64,
    density: f64,
    objects: usize,
) -> Result<()> {
    let spec = SyntheticSpec {
        n_categories: categories,
        zipf_exponent: zipf,
        extent,
        density,
        objects_per_scene: objects,
        ..SyntheticSpec::default()
    };
    std::fs::create_dir_all(out)?;
    let base = synthetic_catalog(categories)?;
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene_seed = substream(seed, &format!("gen/scene/{i}")).gen::<u64>();
        let scene = generate_synthetic_scene(&spec, &base, scene_seed)?;
        write_scene_file(&scene, out.join(format!("scene_{i:04}.sc3d")))?;
        scenes.push(scene);
    }
    // catalog with real corpus counts and proportional splits
    let stats = scene_stats(&scenes, categories);
    let records: Vec<CategoryRecord> = base
        .records()
        .iter()
        .zip(&stats)
        .map(|(r, &(inst, pts))| CategoryRecord {
            id: r.id,
            name: r.name.clone(),
            instance_count: inst.max(1),
            point_count: pts.max(2),
        })
        .collect();
    let catalog = LabelCatalog::new(records)?.assign_splits(SplitSizes::proportional(categories))?;
    catalog.write_file(out.join("catalog.tsv"))?;
    write_manifest(
        out,
        "gen",
        &[
            ("seed".into(), seed.to_string()),
            ("scenes".into(), n_scenes.to_string()),
            ("categories".into(), categories.to_string()),
            ("zipf".into(), zipf.to_string()),
            ("extent".into(), extent.to_string()),
            ("density".into(), density.to_string()),
            ("objects".into(), objects.to_string()),
        ],
    )
}

fn cmd_stats(scenes: &Path, catalog: &Path, out: Option<&Path>) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog)?;
    let scenes: Vec<Scene> = load_scenes(scenes)?.into_iter().map(|(_, s)| s).collect();
    let stats = scene_stats(&scenes, catalog.len());
    let mut body = String::from("id\tname\tsplit\tinstances\tpoints\n");
    for (id, &(inst, pts)) in stats.iter().enumerate() {
        body.push_str(&format!(
            "{id}\t{}\t{}\t{inst}\t{pts}\n",
            catalog.record(id).name,
            catalog.split_of(id)
        ));
    }
    print!("{body}");
    if let Some(out) = out {
        std::fs::write(out, &body)?;
        write_manifest(out, "stats", &[("scenes".into(), scenes.len().to_string())])?;
    }
    Ok(())
}

fn cmd_augment(
    scenes_dir: &Path,
    catalog_path: &Path,
    out: &Path,
    seed: u64,
    samples: usize,
    ids: Option<&str>,
    jitter_sigma: f64,
) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let scenes = load_scenes(scenes_dir)?;
    let ids: Vec<u16> = match ids {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Format(format!("bad category id `{p}`"))))
            .collect::<Result<_>>()?,
        None => catalog.ids_in_split(Split::Tail).iter().map(|&i| i as u16).collect(),
    };
    let plain: Vec<Scene> = scenes.iter().map(|(_, s)| s.clone()).collect();
    let bank = extract_instances(&plain, &ids);
    if bank.is_empty() {
        return Err(Error::Format(format!(
            "no instances of categories {ids:?} found in the corpus"
        )));
    }
    let cfg = AugmentConfig {
        jitter_sigma,
        ..AugmentConfig::with_samples(samples)
    };
    std::fs::create_dir_all(out)?;
    for (i, (path, scene)) in scenes.iter().enumerate() {
        let mut rng = substream(seed, &format!("augment/scene={i}"));
        let augmented = lg3d_core::augment::augment_scene(scene, &bank, &catalog, &cfg, &mut rng)?;
        write_scene_file(&augmented, out.join(path.file_name().unwrap()))?;
    }
    write_manifest(
        out,
        "augment",
        &[
            ("seed".into(), seed.to_string()),
            ("samples".into(), samples.to_string()),
            ("ids".into(), ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")),
            ("jitter_sigma".into(), jitter_sigma.to_string()),
            ("bank_entries".into(), bank.len().to_string()),
        ],
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    scenes_dir: &Path,
    catalog_path: &Path,
    embeddings: Option<&Path>,
    anchor_dim: usize,
    out: &Path,
    t_pos: Option<f64>,
    t_neg: Option<f64>,
    lambda: Option<f64>,
    n_neg: Option<usize>,
    train: &TrainArgs,
) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let scenes: Vec<Scene> = load_scenes(scenes_dir)?.into_iter().map(|(_, s)| s).collect();
    let cfg = build_train_config(train)?;
    let file = KvConfig::load(train.config.as_deref())?;
    let mut ccfg = ContrastiveConfig::default();
    ccfg.t_pos = t_pos.or(file.get("t_pos")?).unwrap_or(ccfg.t_pos);
    ccfg.t_neg = t_neg.or(file.get("t_neg")?).unwrap_or(ccfg.t_neg);
    ccfg.lambda = lambda.or(file.get("lambda")?).unwrap_or(ccfg.lambda);
    ccfg.n_neg = n_neg.or(file.get("n_neg")?).unwrap_or(ccfg.n_neg);
    let table = match embeddings {
        Some(path) => load_table_file(path, &catalog, SourceTag::Clip)?,
        None => synthetic_anchors(catalog.len(), anchor_dim, 0),
    };
    let (params, log) = pretrain(&scenes, &catalog, &table, &ccfg, &cfg)?;
    checkpoint::save(&params, None, out)?;
    let mut entries = train_manifest_entries(&cfg);
    entries.push(("t_pos".into(), ccfg.t_pos.to_string()));
    entries.push(("t_neg".into(), ccfg.t_neg.to_string()));
    entries.push(("lambda".into(), ccfg.lambda.to_string()));
    entries.push(("n_neg".into(), ccfg.n_neg.to_string()));
    entries.push(("anchor_dim".into(), table.dim().to_string()));
    entries.push((
        "final_loss".into(),
        log.epoch_losses.last().map(|l| l.to_string()).unwrap_or_default(),
    ));
    write_manifest(out, "pretrain", &entries)
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    scenes_dir: &Path,
    catalog_path: &Path,
    init: Option<&Path>,
    loss: &str,
    out: &Path,
    masks_dir: Option<&Path>,
    augment: bool,
    augment_samples: usize,
    train: &TrainArgs,
) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let scenes = load_scenes(scenes_dir)?;
    let cfg = build_train_config(train)?;
    let loss: FinetuneLoss = loss.parse()?;
    let params = match init {
        Some(path) => load_checkpoint_params(path)?,
        None => EncoderParams::init(
            &[INPUT_DIM, cfg.hidden_dim, cfg.hidden_dim, cfg.feature_dim],
            &mut substream(cfg.seed, "finetune/scratch-init"),
        ),
    };
    let masks: Option<Vec<AnnotationMask>> = match masks_dir {
        Some(dir) => Some(
            scenes
                .iter()
                .map(|(path, scene)| read_mask(&dir.join(mask_file_name(path)), scene.len()))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let plain: Vec<Scene> = scenes.iter().map(|(_, s)| s.clone()).collect();
    let tail_ids: Vec<u16> = catalog.ids_in_split(Split::Tail).iter().map(|&i| i as u16).collect();
    let bank = if augment {
        extract_instances(&plain, &tail_ids)
    } else {
        extract_instances(&[], &[])
    };
    let acfg = AugmentConfig::with_samples(augment_samples);
    let options = FinetuneOptions {
        augmentation: if augment { Some((&bank, &acfg)) } else { None },
    };
    let (params, head, log) = finetune(params, &plain, &catalog, masks.as_deref(), loss, &cfg, options)?;
    checkpoint::save(&params, Some(&head), out)?;
    let mut entries = train_manifest_entries(&cfg);
    entries.push(("loss".into(), format!("{loss:?}")));
    entries.push(("augment".into(), augment.to_string()));
    entries.push(("init".into(), init.map(|p| p.display().to_string()).unwrap_or_default()));
    entries.push((
        "final_loss".into(),
        log.epoch_losses.last().map(|l| l.to_string()).unwrap_or_default(),
    ));
    write_manifest(out, "finetune", &entries)
}

fn cmd_predict(scenes_dir: &Path, ckpt: &Path, out: &Path, train: &TrainArgs) -> Result<()> {
    let (params, head) = checkpoint::load(ckpt)?;
    let head = head.ok_or_else(|| {
        Error::Format("checkpoint has no classification head; run finetune first".into())
    })?;
    let cfg = build_train_config(train)?;
    let scenes = load_scenes(scenes_dir)?;
    std::fs::create_dir_all(out)?;
    for (path, scene) in &scenes {
        let labels = predict(&params, &head, scene, &cfg)?;
        let name = format!("{}.sprd", path.file_stem().unwrap_or_default().to_string_lossy());
        write_predictions_file(&labels, out.join(name))?;
    }
    write_manifest(
        out,
        "predict",
        &[
            ("ckpt".into(), ckpt.display().to_string()),
            ("resolution".into(), cfg.resolution.to_string()),
            ("scenes".into(), scenes.len().to_string()),
        ],
    )
}

fn cmd_eval(gt: &Path, pred: &Path, catalog_path: &Path, out: Option<&Path>) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let scenes = load_scenes(gt)?;
    let mut cm = ConfusionMatrix::new(catalog.len());
    for (path, scene) in &scenes {
        let pred_path = if pred.is_file() {
            pred.to_path_buf()
        } else {
            pred.join(format!(
                "{}.sprd",
                path.file_stem().unwrap_or_default().to_string_lossy()
            ))
        };
        let labels = read_predictions_file(&pred_path)?;
        if labels.len() != scene.len() {
            return Err(Error::Dimension(format!(
                "{}: {} predictions for {} points",
                pred_path.display(),
                labels.len(),
                scene.len()
            )));
        }
        let gt_labels: Vec<u16> = scene.points.iter().map(|p| p.semantic).collect();
        accumulate(&mut cm, &gt_labels, &labels)?;
    }
    let report = metrics(&cm, &catalog)?;
    print!("{}", report.to_text());
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.txt"), report.to_text())?;
        std::fs::write(out.join("report.json"), report.to_json()?)?;
        write_manifest(out, "eval", &[("scenes".into(), scenes.len().to_string())])?;
    }
    Ok(())
}

fn cmd_eval_inst(gt: &Path, pred: &Path, out: Option<&Path>) -> Result<()> {
    let scene = read_scene_file(gt)?;
    let gts = instances_from_scene(&scene);
    let preds: Vec<InstancePrediction> = serde_json::from_str(&std::fs::read_to_string(pred)?)
        .map_err(|e| Error::Format(format!("{}: {e}", pred.display())))?;
    for p in &preds {
        if p.indices.is_empty() {
            return Err(Error::Format("prediction with empty index set".into()));
        }
    }
    let (map25, map50, map_range_mean) = map_range(&preds, &gts);
    let per_cat = ap_at_iou(&preds, &gts, 0.5);
    let mut body = String::new();
    body.push_str(&format!("mAP@0.25\t{map25:.6}\n"));
    body.push_str(&format!("mAP@0.50\t{map50:.6}\n"));
    body.push_str(&format!("mAP@[0.50:0.95]\t{map_range_mean:.6}\n"));
    let mut cats: Vec<_> = per_cat.iter().collect();
    cats.sort_by_key(|(c, _)| **c);
    for (c, ap) in cats {
        body.push_str(&format!("AP@0.50 category {c}\t{ap:.6}\n"));
    }
    print!("{body}");
    if let Some(out) = out {
        std::fs::write(out, &body)?;
        write_manifest(out, "eval-inst", &[("predictions".into(), preds.len().to_string())])?;
    }
    Ok(())
}

fn cmd_annotate(scenes_dir: &Path, fraction: f64, seed: u64, out: &Path) -> Result<()> {
    let scenes = load_scenes(scenes_dir)?;
    std::fs::create_dir_all(out)?;
    for (i, (path, scene)) in scenes.iter().enumerate() {
        let mut rng = substream(seed, &format!("annotate/scene={i}"));
        let mask = sample_limited_annotations(scene, fraction, &mut rng)?;
        write_mask(&out.join(mask_file_name(path)), &mask)?;
    }
    write_manifest(
        out,
        "annotate",
        &[
            ("seed".into(), seed.to_string()),
            ("fraction".into(), fraction.to_string()),
            ("scenes".into(), scenes.len().to_string()),
        ],
    )
}

fn cmd_pca(embeddings: &Path, catalog_path: &Path, dim: usize, out: &Path) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let table = load_table_file(embeddings, &catalog, SourceTag::Clip)?;
    let model = fit_pca(&table, dim)?;
    let projected = project(&model, &table)?;
    write_table_file(&projected, out)?;
    write_manifest(
        out,
        "pca",
        &[
            ("input_dim".into(), table.dim().to_string()),
            ("output_dim".into(), dim.to_string()),
        ],
    )
}

fn cmd_embed_import(embeddings: &Path, catalog_path: &Path, source: &str, out: &Path) -> Result<()> {
    let catalog = LabelCatalog::read_file(catalog_path)?;
    let table = load_table_file(embeddings, &catalog, parse_source(source)?)?;
    write_table_file(&table, out)?;
    write_manifest(
        out,
        "embed-import",
        &[
            ("source".into(), source.to_string()),
            ("dim".into(), table.dim().to_string()),
            ("rows".into(), table.len().to_string()),
        ],
    )
}

fn cmd_experiment(config: Option<&Path>, out: &Path, workers: usize) -> Result<()> {
    let cfg = build_experiment_config(config)?;
    let result = run_experiment(&cfg, workers)?;
    std::fs::create_dir_all(out)?;
    let table = result.render_table();
    print!("{table}");
    std::fs::write(out.join("table.txt"), &table)?;
    std::fs::write(
        out.join("result.json"),
        serde_json::to_string_pretty(&result).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    write_manifest(
        out,
        "experiment",
        &[
            (
                "seeds".into(),
                cfg.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            (
                "arms".into(),
                cfg.arms.iter().map(|a| a.label()).collect::<Vec<_>>().join(","),
            ),
            ("train_scenes".into(), cfg.train_scenes.to_string()),
            ("val_scenes".into(), cfg.val_scenes.to_string()),
            ("finetune_epochs".into(), cfg.finetune_epochs.to_string()),
            ("pretrain_epochs".into(), cfg.pretrain_epochs.to_string()),
            ("focal_lr_scale".into(), cfg.focal_lr_scale.to_string()),
            ("workers".into(), workers.to_string()),
        ],
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { seed, scenes, out, categories, zipf, extent, density, objects } => {
            cmd_gen(seed, scenes, &out, categories, zipf, extent, density, objects)
        }
        Command::Stats { scenes, catalog, out } => cmd_stats(&scenes, &catalog, out.as_deref()),
        Command::Augment { scenes, catalog, out, seed, samples, ids, jitter_sigma } => {
            cmd_augment(&scenes, &catalog, &out, seed, samples, ids.as_deref(), jitter_sigma)
        }
        Command::Pretrain {
            scenes, catalog, embeddings, anchor_dim, out, t_pos, t_neg, lambda, n_neg, train,
        } => cmd_pretrain(
            &scenes, &catalog, embeddings.as_deref(), anchor_dim, &out, t_pos, t_neg, lambda, n_neg,
            &train,
        ),
        Command::Finetune {
            scenes, catalog, init, loss, out, masks, augment, augment_samples, train,
        } => cmd_finetune(
            &scenes, &catalog, init.as_deref(), &loss, &out, masks.as_deref(), augment,
            augment_samples, &train,
        ),
        Command::Predict { scenes, ckpt, out, train } => cmd_predict(&scenes, &ckpt, &out, &train),
        Command::Eval { gt, pred, catalog, out } => cmd_eval(&gt, &pred, &catalog, out.as_deref()),
        Command::EvalInst { gt, pred, out } => cmd_eval_inst(&gt, &pred, out.as_deref()),
        Command::Annotate { scenes, fraction, seed, out } => cmd_annotate(&scenes, fraction, seed, &out),
        Command::Pca { embeddings, catalog, dim, out } => cmd_pca(&embeddings, &catalog, dim, &out),
        Command::EmbedImport { embeddings, catalog, source, out } => {
            cmd_embed_import(&embeddings, &catalog, &source, &out)
        }
        Command::Experiment { config, out, workers } => cmd_experiment(config.as_deref(), &out, workers),
    }
}

/// Parse and run; returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Error::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
