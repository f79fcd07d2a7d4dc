//! One-shot comparison driver: trains method arms ({scratch, pretrained}
//! x {cross-entropy, class-balanced focal} x {augmentation on/off}) on a
//! synthetic long-tail corpus over several seeds and tabulates val mIoU by
//! frequency split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{extract_instances, AugmentConfig, InstanceBank};
use crate::catalog::{CategoryRecord, LabelCatalog, Split, SplitSizes};
use crate::embed::synthetic_anchors;
use crate::error::{Error, Result};
use crate::eval::{accumulate, metrics, ConfusionMatrix};
use crate::losses::ContrastiveConfig;
use crate::model::{
    default_milestones, finetune, predict, pretrain, EncoderParams, FinetuneLoss,
    FinetuneOptions, TrainConfig, INPUT_DIM,
};
use crate::rng::substream;
use crate::scene::{scene_stats, Scene};
use crate::synth::{generate_synthetic_scene, synthetic_catalog, SyntheticSpec};

/// One method arm of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub pretrained: bool,
    pub loss: FinetuneLoss,
    pub augmented: bool,
}

impl Arm {
    /// Human-readable row label; the full method is labeled "ours".
    pub fn label(&self) -> String {
        if self.pretrained && self.loss == FinetuneLoss::ClassBalancedFocal && self.augmented {
            return "ours".to_string();
        }
        let mut s = String::from(if self.pretrained { "pretrain" } else { "scratch" });
        s.push('+');
        s.push_str(match self.loss {
            FinetuneLoss::CrossEntropy => "ce",
            FinetuneLoss::WeightedCrossEntropy => "weighted_ce",
            FinetuneLoss::Focal => "focal",
            FinetuneLoss::ClassBalancedFocal => "cfocal",
        });
        if self.augmented {
            s.push_str("+augment");
        }
        s
    }
}

/// Full experiment description. The defaults fit a laptop-CPU budget while
/// keeping the corpus long-tailed enough to separate the arms.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: SyntheticSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub split_sizes: SplitSizes,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Learning-rate multiplier for focal-family arms. The balancing
    /// weights sum to 1 over N categories and the focusing factor damps
    /// easy-example gradients, so focal losses see ~N-times-smaller
    /// gradient scales than plain cross-entropy at the same rate.
    pub focal_lr_scale: f64,
    /// Template for per-arm training configs; epochs/milestones/seed are
    /// overwritten per run.
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    /// Dimension of the synthetic anchor table (and encoder output).
    pub anchor_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: SyntheticSpec {
                extent: 4.0,
                density: 250.0,
                ..SyntheticSpec::default()
            },
            train_scenes: 40,
            val_scenes: 10,
            seeds: vec![0, 1, 2, 3, 4],
            arms: vec![
                Arm { pretrained: false, loss: FinetuneLoss::CrossEntropy, augmented: false },
                Arm { pretrained: false, loss: FinetuneLoss::ClassBalancedFocal, augmented: false },
                Arm { pretrained: true, loss: FinetuneLoss::ClassBalancedFocal, augmented: true },
            ],
            split_sizes: SplitSizes { head: 7, common: 7, tail: 6 },
            pretrain_epochs: 10,
            finetune_epochs: 100,
            focal_lr_scale: 25.0,
            train: TrainConfig {
                resolution: 0.1,
                hidden_dim: 32,
                max_cells_per_scene: Some(2048),
                ..TrainConfig::default()
            },
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::with_samples(8),
            anchor_dim: 32,
        }
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stddev = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, stddev }
}

/// Split mIoU values of one arm on one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub head: f64,
    pub common: f64,
    pub tail: f64,
    pub all: f64,
}

/// Aggregated results of one arm across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub per_seed: Vec<SeedScores>,
    pub head: Stat,
    pub common: Stat,
    pub tail: Stat,
    pub all: Stat,
}

/// Full experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

impl ExperimentResult {
    /// Fixed-width comparison table (mean +/- stddev per split).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>16} {:>16} {:>16} {:>16}\n",
            "arm", "head mIoU", "common mIoU", "tail mIoU", "all mIoU"
        ));
        for arm in &self.arms {
            let cell = |s: Stat| format!("{:.4}+/-{:.4}", s.mean, s.stddev);
            out.push_str(&format!(
                "{:<24} {:>16} {:>16} {:>16} {:>16}\n",
                arm.label,
                cell(arm.head),
                cell(arm.common),
                cell(arm.tail),
                cell(arm.all)
            ));
        }
        out
    }

    pub fn arm(&self, label: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.label == label)
    }
}

fn derive_scene_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).gen::<u64>()
}

/// Per-seed corpus plus everything the arms share.
struct SeedContext {
    train: Vec<Scene>,
    val: Vec<Scene>,
    catalog: LabelCatalog,
    bank: InstanceBank,
}

fn build_seed_context(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let base = synthetic_catalog(cfg.corpus.n_categories)?;
    let gen = |kind: &str, i: usize| {
        generate_synthetic_scene(&cfg.corpus, &base, derive_scene_seed(seed, &format!("experiment/{kind}-scene/{i}")))
    };
    let train: Vec<Scene> = (0..cfg.train_scenes).map(|i| gen("train", i)).collect::<Result<_>>()?;
    let val: Vec<Scene> = (0..cfg.val_scenes).map(|i| gen("val", i)).collect::<Result<_>>()?;

    // real train-set counts drive splits and the balancing weights;
    // counts are floored so categories missing from a draw stay usable
    let stats = scene_stats(&train, cfg.corpus.n_categories);
    let records: Vec<CategoryRecord> = base
        .records()
        .iter()
        .zip(&stats)
        .map(|(r, &(instances, points))| CategoryRecord {
            id: r.id,
            name: r.name.clone(),
            instance_count: instances.max(1),
            point_count: points.max(2),
        })
        .collect();
    let catalog = LabelCatalog::new(records)?.assign_splits(cfg.split_sizes)?;

    let tail_ids: Vec<u16> = catalog.ids_in_split(Split::Tail).iter().map(|&i| i as u16).collect();
    let bank = extract_instances(&train, &tail_ids);
    Ok(SeedContext { train, val, catalog, bank })
}

fn train_config(cfg: &ExperimentConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        decay_milestones: default_milestones(epochs),
        seed,
        feature_dim: cfg.anchor_dim,
        ..cfg.train.clone()
    }
}

fn evaluate(
    params: &EncoderParams,
    head: &crate::model::ClassifierHead,
    ctx: &SeedContext,
    tcfg: &TrainConfig,
) -> Result<SeedScores> {
    let mut cm = ConfusionMatrix::new(ctx.catalog.len());
    for scene in &ctx.val {
        let pred = predict(params, head, scene, tcfg)?;
        let gt: Vec<u16> = scene.points.iter().map(|p| p.semantic).collect();
        accumulate(&mut cm, &gt, &pred)?;
    }
    let report = metrics(&cm, &ctx.catalog)?;
    Ok(SeedScores {
        head: report.mean_head,
        common: report.mean_common,
        tail: report.mean_tail,
        all: report.mean_all,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SeedScores>> {
    let ctx = build_seed_context(cfg, seed)?;
    let needs_pretrain = cfg.arms.iter().any(|a| a.pretrained);
    let pretrained_params = if needs_pretrain {
        let pcfg = train_config(cfg, cfg.pretrain_epochs, seed);
        let anchors = synthetic_anchors(ctx.catalog.len(), cfg.anchor_dim, 0);
        let (params, _) = pretrain(&ctx.train, &ctx.catalog, &anchors, &cfg.contrastive, &pcfg)?;
        Some(params)
    } else {
        None
    };

    let mut scores = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let mut tcfg = train_config(cfg, cfg.finetune_epochs, seed);
        if matches!(arm.loss, FinetuneLoss::Focal | FinetuneLoss::ClassBalancedFocal) {
            tcfg.learning_rate *= cfg.focal_lr_scale;
        }
        let init = if arm.pretrained {
            pretrained_params.clone().expect("pretraining ran for pretrained arms")
        } else {
            EncoderParams::init(
                &[INPUT_DIM, tcfg.hidden_dim, tcfg.hidden_dim, tcfg.feature_dim],
                &mut substream(seed, "experiment/scratch-init"),
            )
        };
        let options = FinetuneOptions {
            augmentation: if arm.augmented {
                Some((&ctx.bank, &cfg.augment))
            } else {
                None
            },
        };
        let (params, head, _) = finetune(init, &ctx.train, &ctx.catalog, None, arm.loss, &tcfg, options)?;
        scores.push(evaluate(&params, &head, &ctx, &tcfg)?);
    }
    Ok(scores)
}

/// Run every arm on every seed and aggregate. `workers` bounds parallel
/// seed processing; results are reduced in seed order, so the output is
/// identical for any worker count.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() || cfg.arms.is_empty() {
        return Err(Error::Dimension("experiment needs at least one seed and one arm".into()));
    }
    let n = cfg.seeds.len();
    let per_seed: Vec<Result<Vec<SeedScores>>> = if workers <= 1 {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Vec<SeedScores>>>>> =
            (0..n).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(n) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = run_seed(cfg, cfg.seeds[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect()
    };
    let mut results = Vec::with_capacity(n);
    for r in per_seed {
        results.push(r?);
    }

    let arms = cfg
        .arms
        .iter()
        .enumerate()
        .map(|(ai, arm)| {
            let per_seed: Vec<SeedScores> = results.iter().map(|r| r[ai]).collect();
            let collect = |f: fn(&SeedScores) -> f64| stat(&per_seed.iter().map(f).collect::<Vec<_>>());
            ArmSummary {
                label: arm.label(),
                head: collect(|s| s.head),
                common: collect(|s| s.common),
                tail: collect(|s| s.tail),
                all: collect(|s| s.all),
                per_seed,
            }
        })
        .collect();
    Ok(ExperimentResult { seeds: cfg.seeds.clone(), arms })
}
