//! Desk-scale trainable point encoder: per-cell MLP features, momentum SGD
//! with a step schedule, contrastive pre-training, supervised fine-tuning
//! with a linear head, prediction, and the CKPT checkpoint format.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::augment::{augment_scene, AugmentConfig, InstanceBank};
use crate::catalog::LabelCatalog;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::losses::{
    self, loss_total, sample_negatives, ContrastiveConfig, LossOutput,
};
use crate::rng::substream;
use crate::scene::{Scene, NO_INSTANCE, UNLABELED};
use crate::voxelize::{devoxelize, voxelize, SparseVoxelGrid};

/// Input feature width: 3 centered coordinates + 3 color channels + height.
pub const INPUT_DIM: usize = 7;

/// One dense layer, weights stored (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// MLP encoder parameters: F -> H -> H -> D, rectifier on hidden layers,
/// identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

impl EncoderParams {
    /// Seeded Gaussian init, scaled by 1/sqrt(fan_in).
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        let x: f64 = rng.sample(StandardNormal);
                        x * scale
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardCache {
    /// inputs[k] is the input to layer k; the last entry is the output.
    inputs: Vec<Array2<f64>>,
}

/// Forward pass over a batch of cell features (cells x F).
pub fn encode(params: &EncoderParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    encode_with_cache(params, features).map(|(out, _)| out)
}

/// Forward pass that retains activations for [`encoder_backward`].
pub fn encode_with_cache(params: &EncoderParams, features: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if features.ncols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "feature dim {} vs encoder input dim {}",
            features.ncols(),
            params.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers + 1);
    let mut x = features.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        inputs.push(x.clone());
        let mut y = x.dot(&layer.weight.t());
        y += &layer.bias;
        if k + 1 < n_layers {
            y.mapv_inplace(|v| v.max(0.0));
        }
        x = y;
    }
    inputs.push(x.clone());
    Ok((x, ForwardCache { inputs }))
}

/// Gradients matching [`EncoderParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn scaled_add(&mut self, factor: f64, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(factor, &b.weight);
            a.bias.scaled_add(factor, &b.bias);
        }
    }
}

/// Backpropagate a gradient on the encoder output to parameter gradients.
pub fn encoder_backward(params: &EncoderParams, cache: &ForwardCache, grad_out: &Array2<f64>) -> EncoderGrads {
    let n_layers = params.layers.len();
    let mut grads = EncoderGrads::zeros_like(params);
    let mut delta = grad_out.clone();
    for k in (0..n_layers).rev() {
        if k + 1 < n_layers {
            // rectifier mask from the stored layer output
            let post = &cache.inputs[k + 1];
            ndarray::Zip::from(&mut delta).and(post).for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let input = &cache.inputs[k];
        grads.layers[k].weight = delta.t().dot(input);
        grads.layers[k].bias = delta.sum_axis(ndarray::Axis(0));
        if k > 0 {
            delta = delta.dot(&params.layers[k].weight);
        }
    }
    grads
}

/// Linear classification head over encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// N x D.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    /// Seeded Gaussian(0, 1/sqrt(D)) init.
    pub fn init(n_categories: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        ClassifierHead {
            weight: Array2::from_shape_fn((n_categories, dim), |_| {
                let x: f64 = rng.sample(StandardNormal);
                x * scale
            }),
            bias: Array1::zeros(n_categories),
        }
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut y = features.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// Momentum buffers for one tensor set.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    velocities: Vec<Array2<f64>>,
    bias_velocities: Vec<Array1<f64>>,
}

impl MomentumState {
    pub fn for_encoder(params: &EncoderParams) -> Self {
        MomentumState {
            velocities: params.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias_velocities: params.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn for_head(head: &ClassifierHead) -> Self {
        MomentumState {
            velocities: vec![Array2::zeros(head.weight.raw_dim())],
            bias_velocities: vec![Array1::zeros(head.bias.raw_dim())],
        }
    }
}

fn finite_or_err(grads: impl Iterator<Item = f64>, context: &str) -> Result<()> {
    for g in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {context}")));
        }
    }
    Ok(())
}

/// One momentum-SGD step: v <- momentum v + g; p <- p - lr v.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (k, (layer, grad)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        finite_or_err(grad.weight.iter().copied().chain(grad.bias.iter().copied()), "encoder")?;
        let v = &mut state.velocities[k];
        v.mapv_inplace(|x| x * momentum);
        *v += &grad.weight;
        layer.weight.scaled_add(-lr, v);
        let vb = &mut state.bias_velocities[k];
        vb.mapv_inplace(|x| x * momentum);
        *vb += &grad.bias;
        layer.bias.scaled_add(-lr, vb);
    }
    Ok(())
}

/// Momentum-SGD step for the head.
pub fn sgd_step_head(
    head: &mut ClassifierHead,
    grad_w: &Array2<f64>,
    grad_b: &Array1<f64>,
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    finite_or_err(grad_w.iter().copied().chain(grad_b.iter().copied()), "head")?;
    let v = &mut state.velocities[0];
    v.mapv_inplace(|x| x * momentum);
    *v += grad_w;
    head.weight.scaled_add(-lr, v);
    let vb = &mut state.bias_velocities[0];
    vb.mapv_inplace(|x| x * momentum);
    *vb += grad_b;
    head.bias.scaled_add(-lr, vb);
    Ok(())
}

/// Training configuration shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_milestones: Vec<usize>,
    pub epochs: usize,
    pub scenes_per_batch: usize,
    pub seed: u64,
    pub use_color: bool,
    /// Voxel resolution in meters.
    pub resolution: f64,
    pub hidden_dim: usize,
    /// Encoder output dimension; must match the anchor table for
    /// pre-training.
    pub feature_dim: usize,
    /// Optional per-scene labeled-cell subsample for faster epochs;
    /// `None` uses every labeled cell.
    pub max_cells_per_scene: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 60;
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            decay_factor: 0.3,
            decay_milestones: default_milestones(epochs),
            epochs,
            scenes_per_batch: 8,
            seed: 0,
            use_color: true,
            resolution: 0.02,
            hidden_dim: 64,
            feature_dim: 64,
            max_cells_per_scene: None,
        }
    }
}

/// Milestones at 55% and 85% of the epoch budget, mirroring decays at
/// epochs 150 and 250 of a 400-epoch schedule.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    vec![
        (0.55 * epochs as f64).floor() as usize,
        (0.85 * epochs as f64).floor() as usize,
    ]
}

/// Learning rate at an epoch: base times decay^(milestones passed).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.decay_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.learning_rate * cfg.decay_factor.powi(passed as i32)
}

/// Per-point labeled/unlabeled mask for the limited-annotation regime.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMask(pub Vec<bool>);

impl AnnotationMask {
    pub fn all_labeled(n: usize) -> Self {
        AnnotationMask(vec![true; n])
    }

    pub fn labeled_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Strip annotations from points outside the mask.
pub fn apply_mask(scene: &Scene, mask: &AnnotationMask) -> Result<Scene> {
    if mask.0.len() != scene.len() {
        return Err(Error::Dimension(format!(
            "mask of {} entries for scene of {} points",
            mask.0.len(),
            scene.len()
        )));
    }
    let points = scene
        .points
        .iter()
        .zip(&mask.0)
        .map(|(p, &keep)| {
            if keep {
                *p
            } else {
                crate::scene::PointRecord {
                    semantic: UNLABELED,
                    instance: NO_INSTANCE,
                    ..*p
                }
            }
        })
        .collect();
    // masking can leave instance-id holes; renumber densely
    renumber_instances(Scene { points })
}

fn renumber_instances(mut scene: Scene) -> Result<Scene> {
    let mut remap: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut used: Vec<u32> = scene
        .points
        .iter()
        .filter(|p| p.instance != NO_INSTANCE)
        .map(|p| p.instance)
        .collect();
    used.sort_unstable();
    used.dedup();
    for (new, old) in used.into_iter().enumerate() {
        remap.insert(old, new as u32);
    }
    for p in &mut scene.points {
        if p.instance != NO_INSTANCE {
            p.instance = remap[&p.instance];
        }
    }
    scene.validate()?;
    Ok(scene)
}

/// Per-cell input features: centered and extent-scaled cell centers, mean
/// color in [0, 1] (zeroed when color is off), and height above min z.
pub fn point_features(grid: &SparseVoxelGrid, scene: &Scene, use_color: bool) -> Array2<f64> {
    let n = grid.len();
    let mut out = Array2::zeros((n, INPUT_DIM));
    if n == 0 {
        return out;
    }
    let res = grid.resolution;
    let centers: Vec<[f64; 3]> = grid
        .keys()
        .iter()
        .map(|k| {
            [
                (k[0] as f64 + 0.5) * res,
                (k[1] as f64 + 0.5) * res,
                (k[2] as f64 + 0.5) * res,
            ]
        })
        .collect();
    let nf = scene.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &scene.points {
        for a in 0..3 {
            centroid[a] += p.position[a] as f64 / nf;
        }
    }
    let bb = scene.bounding_box().expect("nonempty scene");
    let ext = bb.extent();
    let scale = ext[0].max(ext[1]).max(ext[2]).max(1e-9);
    for (i, c) in centers.iter().enumerate() {
        for a in 0..3 {
            out[[i, a]] = (c[a] - centroid[a]) / scale;
        }
        if use_color {
            for a in 0..3 {
                out[[i, 3 + a]] = grid.cells()[i].mean_color[a] / 255.0;
            }
        }
        out[[i, 6]] = c[2] - bb.min[2];
    }
    out
}

/// One scene prepared for training.
struct PreparedScene {
    features: Array2<f64>,
    cell_labels: Vec<u16>,
    labeled_cells: Vec<usize>,
}

fn prepare_scene(scene: &Scene, cfg: &TrainConfig) -> Result<PreparedScene> {
    let grid = voxelize(scene, cfg.resolution)?;
    let features = point_features(&grid, scene, cfg.use_color);
    let cell_labels: Vec<u16> = grid.cells().iter().map(|c| c.majority_semantic).collect();
    let labeled_cells: Vec<usize> = cell_labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != UNLABELED)
        .map(|(i, _)| i)
        .collect();
    Ok(PreparedScene {
        features,
        cell_labels,
        labeled_cells,
    })
}

fn select_cells(prepared: &PreparedScene, cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<usize> {
    match cfg.max_cells_per_scene {
        Some(max) if prepared.labeled_cells.len() > max => {
            rand::seq::index::sample(rng, prepared.labeled_cells.len(), max)
                .into_iter()
                .map(|k| prepared.labeled_cells[k])
                .collect()
        }
        _ => prepared.labeled_cells.clone(),
    }
}

fn gather_rows(features: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&features.row(r));
    }
    out
}

fn shuffled_order(n: usize, seed: u64, name: &str) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, name));
    order
}

/// Per-epoch mean training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Contrastive pre-training of the encoder against a fixed anchor table.
pub fn pretrain(
    scenes: &[Scene],
    catalog: &LabelCatalog,
    table: &EmbeddingTable,
    ccfg: &ContrastiveConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainLog)> {
    if table.len() != catalog.len() {
        return Err(Error::Dimension(format!(
            "anchor table of {} rows vs catalog of {}",
            table.len(),
            catalog.len()
        )));
    }
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| prepare_scene(s, cfg)).collect::<Result<_>>()?;
    let dims = [INPUT_DIM, cfg.hidden_dim, cfg.hidden_dim, table.dim()];
    let mut params = EncoderParams::init(&dims, &mut substream(cfg.seed, "pretrain/init"));
    let mut state = MomentumState::for_encoder(&params);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let order = shuffled_order(prepared.len(), cfg.seed, &format!("pretrain/shuffle/epoch={epoch}"));
        let mut epoch_loss = 0.0;
        let mut epoch_scenes = 0usize;
        for batch in order.chunks(cfg.scenes_per_batch.max(1)) {
            let mut batch_grads = EncoderGrads::zeros_like(&params);
            let mut used = 0usize;
            for &si in batch {
                let p = &prepared[si];
                let mut cell_rng = substream(cfg.seed, &format!("pretrain/cells/epoch={epoch}/scene={si}"));
                let rows = select_cells(p, cfg, &mut cell_rng);
                if rows.is_empty() {
                    continue;
                }
                let x = gather_rows(&p.features, &rows);
                let labels: Vec<u16> = rows.iter().map(|&r| p.cell_labels[r]).collect();
                let (feats, cache) = encode_with_cache(&params, &x)?;
                let mut neg_rng = substream(cfg.seed, &format!("pretrain/neg/epoch={epoch}/scene={si}"));
                let negatives = sample_negatives(&labels, catalog, ccfg.n_neg, &mut neg_rng)?;
                let out: LossOutput = loss_total(&feats, &labels, table, &negatives, ccfg)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch} scene {si}: {e}")))?;
                if !out.value.is_finite() {
                    return Err(Error::Numeric(format!("epoch {epoch} scene {si}: non-finite loss")));
                }
                let grads = encoder_backward(&params, &cache, &out.gradient);
                batch_grads.scaled_add(1.0, &grads);
                epoch_loss += out.value;
                used += 1;
                epoch_scenes += 1;
            }
            if used > 0 {
                let inv = 1.0 / used as f64;
                let mut averaged = EncoderGrads::zeros_like(&params);
                averaged.scaled_add(inv, &batch_grads);
                sgd_step(&mut params, &averaged, &mut state, lr, cfg.momentum)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            }
        }
        log.epoch_losses.push(if epoch_scenes > 0 { epoch_loss / epoch_scenes as f64 } else { 0.0 });
    }
    Ok((params, log))
}

/// Loss used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneLoss {
    CrossEntropy,
    WeightedCrossEntropy,
    Focal,
    ClassBalancedFocal,
}

impl std::str::FromStr for FinetuneLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(FinetuneLoss::CrossEntropy),
            "weighted_ce" => Ok(FinetuneLoss::WeightedCrossEntropy),
            "focal" => Ok(FinetuneLoss::Focal),
            "cfocal" => Ok(FinetuneLoss::ClassBalancedFocal),
            other => Err(Error::Format(format!("unknown loss `{other}`"))),
        }
    }
}

/// Focusing parameter used by the focal variants.
pub const FOCAL_GAMMA: f64 = 2.0;

/// Options for the fine-tuning stage beyond [`TrainConfig`].
#[derive(Clone, Copy, Default)]
pub struct FinetuneOptions<'a> {
    /// Online instance-sampling augmentation, fresh per (epoch, scene).
    pub augmentation: Option<(&'a InstanceBank, &'a AugmentConfig)>,
}

/// Supervised fine-tuning of encoder plus a fresh linear head on labeled
/// cells. `params` is the (pre-trained or freshly initialized) encoder.
pub fn finetune(
    mut params: EncoderParams,
    scenes: &[Scene],
    catalog: &LabelCatalog,
    masks: Option<&[AnnotationMask]>,
    loss: FinetuneLoss,
    cfg: &TrainConfig,
    options: FinetuneOptions<'_>,
) -> Result<(EncoderParams, ClassifierHead, TrainLog)> {
    if let Some(masks) = masks {
        if masks.len() != scenes.len() {
            return Err(Error::Dimension(format!(
                "{} masks for {} scenes",
                masks.len(),
                scenes.len()
            )));
        }
    }
    let n_cat = catalog.len();
    let dim = params.output_dim();
    let mut head = ClassifierHead::init(n_cat, dim, &mut substream(cfg.seed, "finetune/head-init"));
    let mut enc_state = MomentumState::for_encoder(&params);
    let mut head_state = MomentumState::for_head(&head);
    let alpha = catalog.alpha_weights()?;
    let mut log = TrainLog::default();

    // masked scenes are fixed across epochs; augmentation re-runs per epoch
    let base_scenes: Vec<Scene> = match masks {
        Some(masks) => scenes
            .iter()
            .zip(masks)
            .map(|(s, m)| apply_mask(s, m))
            .collect::<Result<_>>()?,
        None => scenes.to_vec(),
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let order = shuffled_order(base_scenes.len(), cfg.seed, &format!("finetune/shuffle/epoch={epoch}"));
        let mut epoch_loss = 0.0;
        let mut epoch_scenes = 0usize;
        for batch in order.chunks(cfg.scenes_per_batch.max(1)) {
            let mut enc_grads = EncoderGrads::zeros_like(&params);
            let mut head_w_grad = Array2::zeros(head.weight.raw_dim());
            let mut head_b_grad = Array1::zeros(head.bias.raw_dim());
            let mut used = 0usize;
            for &si in batch {
                let scene = match options.augmentation {
                    Some((bank, acfg)) if !bank.is_empty() => {
                        let mut aug_rng = substream(cfg.seed, &format!("augment/epoch={epoch}/scene={si}"));
                        augment_scene(&base_scenes[si], bank, catalog, acfg, &mut aug_rng)?
                    }
                    _ => base_scenes[si].clone(),
                };
                let p = prepare_scene(&scene, cfg)?;
                let mut cell_rng = substream(cfg.seed, &format!("finetune/cells/epoch={epoch}/scene={si}"));
                let rows = select_cells(&p, cfg, &mut cell_rng);
                if rows.is_empty() {
                    continue;
                }
                let x = gather_rows(&p.features, &rows);
                let targets: Vec<u16> = rows.iter().map(|&r| p.cell_labels[r]).collect();
                let (feats, cache) = encode_with_cache(&params, &x)?;
                let logits = head.logits(&feats);
                let out = match loss {
                    FinetuneLoss::CrossEntropy => losses::cross_entropy(&logits, &targets),
                    FinetuneLoss::WeightedCrossEntropy => losses::weighted_ce(&logits, &targets, &alpha),
                    FinetuneLoss::Focal => losses::focal(&logits, &targets, FOCAL_GAMMA),
                    FinetuneLoss::ClassBalancedFocal => losses::cfocal(&logits, &targets, FOCAL_GAMMA, &alpha),
                }
                .map_err(|e| Error::Numeric(format!("epoch {epoch} scene {si}: {e}")))?;
                // head gradients and the gradient reaching the encoder
                head_w_grad += &out.gradient.t().dot(&feats);
                head_b_grad += &out.gradient.sum_axis(ndarray::Axis(0));
                let grad_feats = out.gradient.dot(&head.weight);
                enc_grads.scaled_add(1.0, &encoder_backward(&params, &cache, &grad_feats));
                epoch_loss += out.value;
                used += 1;
                epoch_scenes += 1;
            }
            if used > 0 {
                let inv = 1.0 / used as f64;
                let mut averaged = EncoderGrads::zeros_like(&params);
                averaged.scaled_add(inv, &enc_grads);
                sgd_step(&mut params, &averaged, &mut enc_state, lr, cfg.momentum)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
                sgd_step_head(
                    &mut head,
                    &(&head_w_grad * inv),
                    &(&head_b_grad * inv),
                    &mut head_state,
                    lr,
                    cfg.momentum,
                )
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            }
        }
        log.epoch_losses.push(if epoch_scenes > 0 { epoch_loss / epoch_scenes as f64 } else { 0.0 });
    }
    Ok((params, head, log))
}

fn argmax_lowest(row: ndarray::ArrayView1<'_, f64>) -> u16 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u16
}

/// Voxelize, encode, classify per cell (argmax, ties to the lowest id) and
/// map labels back to points.
pub fn predict(
    params: &EncoderParams,
    head: &ClassifierHead,
    scene: &Scene,
    cfg: &TrainConfig,
) -> Result<Vec<u16>> {
    let grid = voxelize(scene, cfg.resolution)?;
    let features = point_features(&grid, scene, cfg.use_color);
    let encoded = encode(params, &features)?;
    let logits = head.logits(&encoded);
    let cell_labels: Vec<u16> = logits.rows().into_iter().map(argmax_lowest).collect();
    devoxelize(&grid, &cell_labels, scene.len())
}

/// Head-free diagnostic: classify each cell by minimum cosine distance to
/// the anchors (ties to the lowest id).
pub fn nearest_anchor_classify(
    params: &EncoderParams,
    table: &EmbeddingTable,
    scene: &Scene,
    cfg: &TrainConfig,
) -> Result<Vec<u16>> {
    let grid = voxelize(scene, cfg.resolution)?;
    let features = point_features(&grid, scene, cfg.use_color);
    let encoded = encode(params, &features)?;
    // anchors are unit norm, so argmin distance = argmax dot / |f|;
    // |f| is shared across categories and drops out
    let scores = encoded.dot(&table.rows.t());
    let cell_labels: Vec<u16> = scores.rows().into_iter().map(argmax_lowest).collect();
    devoxelize(&grid, &cell_labels, scene.len())
}

pub mod checkpoint {
    //! CKPT checkpoint format: magic `CKPT`, version u32, then per tensor a
    //! u16 name length + UTF-8 name, rank u8, u32 dims, f64 LE payload.

    use std::io::{Read, Write};
    use std::path::Path;

    use ndarray::{Array1, Array2};

    use super::{ClassifierHead, EncoderParams, Layer};
    use crate::error::{Error, Result};

    pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
    pub const CKPT_VERSION: u32 = 1;

    /// A named tensor: shape plus row-major payload.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Tensor {
        pub name: String,
        pub dims: Vec<usize>,
        pub data: Vec<f64>,
    }

    pub fn write_tensors<W: Write>(tensors: &[Tensor], mut w: W) -> Result<u64> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for t in tensors {
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(buf.len() as u64)
    }

    pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated CKPT header".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected CKPT",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut vbuf = [0u8; 4];
        r.read_exact(&mut vbuf).map_err(|_| Error::Format("truncated CKPT version".into()))?;
        let version = u32::from_le_bytes(vbuf);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported CKPT version {version}")));
        }
        let mut tensors = Vec::new();
        loop {
            let mut lenbuf = [0u8; 2];
            match r.read_exact(&mut lenbuf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u16::from_le_bytes(lenbuf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| Error::Format("truncated CKPT name".into()))?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format("CKPT name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| Error::Format("truncated CKPT rank".into()))?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut dbuf = [0u8; 4];
                r.read_exact(&mut dbuf).map_err(|_| Error::Format("truncated CKPT dims".into()))?;
                dims.push(u32::from_le_bytes(dbuf) as usize);
            }
            let count: usize = dims.iter().product();
            let mut payload = vec![0u8; count * 8];
            r.read_exact(&mut payload).map_err(|_| Error::Format("truncated CKPT payload".into()))?;
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        Ok(tensors)
    }

    /// Flatten encoder (and optionally head) parameters into named tensors.
    pub fn to_tensors(params: &EncoderParams, head: Option<&ClassifierHead>) -> Vec<Tensor> {
        let mut tensors = Vec::new();
        for (k, layer) in params.layers.iter().enumerate() {
            tensors.push(Tensor {
                name: format!("encoder.layer{k}.weight"),
                dims: vec![layer.weight.nrows(), layer.weight.ncols()],
                data: layer.weight.iter().copied().collect(),
            });
            tensors.push(Tensor {
                name: format!("encoder.layer{k}.bias"),
                dims: vec![layer.bias.len()],
                data: layer.bias.to_vec(),
            });
        }
        if let Some(head) = head {
            tensors.push(Tensor {
                name: "head.weight".into(),
                dims: vec![head.weight.nrows(), head.weight.ncols()],
                data: head.weight.iter().copied().collect(),
            });
            tensors.push(Tensor {
                name: "head.bias".into(),
                dims: vec![head.bias.len()],
                data: head.bias.to_vec(),
            });
        }
        tensors
    }

    /// Rebuild encoder and head from named tensors.
    pub fn from_tensors(tensors: &[Tensor]) -> Result<(EncoderParams, Option<ClassifierHead>)> {
        let get = |name: &str| tensors.iter().find(|t| t.name == name);
        let mut layers = Vec::new();
        for k in 0.. {
            let (Some(w), Some(b)) = (get(&format!("encoder.layer{k}.weight")), get(&format!("encoder.layer{k}.bias"))) else {
                break;
            };
            if w.dims.len() != 2 || b.dims.len() != 1 {
                return Err(Error::Format(format!("layer {k}: unexpected tensor ranks")));
            }
            layers.push(Layer {
                weight: Array2::from_shape_vec((w.dims[0], w.dims[1]), w.data.clone())
                    .map_err(|e| Error::Format(format!("layer {k} weight: {e}")))?,
                bias: Array1::from_vec(b.data.clone()),
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("checkpoint carries no encoder layers".into()));
        }
        let head = match (get("head.weight"), get("head.bias")) {
            (Some(w), Some(b)) => Some(ClassifierHead {
                weight: Array2::from_shape_vec((w.dims[0], w.dims[1]), w.data.clone())
                    .map_err(|e| Error::Format(format!("head weight: {e}")))?,
                bias: Array1::from_vec(b.data.clone()),
            }),
            _ => None,
        };
        Ok((EncoderParams { layers }, head))
    }

    pub fn save<P: AsRef<Path>>(params: &EncoderParams, head: Option<&ClassifierHead>, path: P) -> Result<u64> {
        write_tensors(&to_tensors(params, head), std::fs::File::create(path)?)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<(EncoderParams, Option<ClassifierHead>)> {
        from_tensors(&read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryRecord, LabelCatalog};
    use crate::embed::synthetic_anchors;
    use crate::scene::PointRecord;

    fn catalog(n: usize) -> LabelCatalog {
        LabelCatalog::new(
            (0..n)
                .map(|i| CategoryRecord {
                    id: i,
                    name: format!("c{i}"),
                    instance_count: 1,
                    point_count: 50 * (i as u64 + 2),
                })
                .collect(),
        )
        .unwrap()
    }

    /// A toy corpus of 3 linearly separable categories: cells cluster by
    /// position along x.
    fn toy_scene(seed: u64, n_per_cat: usize) -> Scene {
        let mut rng = substream(seed, "toy");
        let mut points = Vec::new();
        for c in 0..3u16 {
            for _ in 0..n_per_cat {
                let x = c as f32 * 2.0 + rng.gen::<f32>() * 0.5;
                let y = rng.gen::<f32>() * 0.5;
                points.push(PointRecord {
                    position: [x, y, 0.0],
                    color: [(80 * (c + 1)) as u8, 40, 40],
                    semantic: c,
                    instance: c as u32,
                });
            }
        }
        Scene::new(points).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            decay_milestones: default_milestones(50),
            resolution: 0.1,
            hidden_dim: 16,
            feature_dim: 8,
            learning_rate: 0.1,
            scenes_per_batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn encode_zero_params_gives_zero() {
        let params = EncoderParams {
            layers: vec![
                Layer { weight: Array2::zeros((4, INPUT_DIM)), bias: Array1::zeros(4) },
                Layer { weight: Array2::zeros((2, 4)), bias: Array1::zeros(2) },
            ],
        };
        let x = Array2::ones((3, INPUT_DIM));
        let y = encode(&params, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layers_pass_positive_input_through() {
        let params = EncoderParams {
            layers: vec![
                Layer { weight: Array2::eye(1), bias: Array1::zeros(1) },
                Layer { weight: Array2::eye(1), bias: Array1::zeros(1) },
            ],
        };
        let x = Array2::from_elem((1, 1), 0.7);
        let y = encode(&params, &x).unwrap();
        assert_eq!(y[[0, 0]], 0.7);
    }

    #[test]
    fn batched_and_per_row_encoding_agree() {
        let mut rng = substream(0, "enc");
        let params = EncoderParams::init(&[INPUT_DIM, 8, 8, 5], &mut rng);
        let x = Array2::from_shape_fn((6, INPUT_DIM), |_| rng.gen::<f64>() - 0.5);
        let batched = encode(&params, &x).unwrap();
        for i in 0..6 {
            let row = x.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let single = encode(&params, &row).unwrap();
            for (a, b) in batched.row(i).iter().zip(single.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_basic_identities() {
        let mut rng = substream(1, "sgd");
        let mut params = EncoderParams::init(&[2, 2], &mut rng);
        let p0 = params.layers[0].weight.clone();
        let grads = EncoderGrads {
            layers: vec![Layer { weight: p0.clone(), bias: params.layers[0].bias.clone() }],
        };
        let mut state = MomentumState::for_encoder(&params);
        sgd_step(&mut params, &grads, &mut state, 1.0, 0.0).unwrap();
        assert!(params.layers[0].weight.iter().all(|&v| v.abs() < 1e-12));

        // zero grads leave params unchanged
        let snapshot = params.clone();
        let zeros = EncoderGrads::zeros_like(&params);
        let mut state = MomentumState::for_encoder(&params);
        sgd_step(&mut params, &zeros, &mut state, 0.5, 0.9).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let mut params = EncoderParams {
            layers: vec![Layer { weight: Array2::from_elem((1, 1), 1.0), bias: Array1::zeros(1) }],
        };
        let grads = EncoderGrads {
            layers: vec![Layer { weight: Array2::from_elem((1, 1), 0.5), bias: Array1::zeros(1) }],
        };
        let mut state = MomentumState::for_encoder(&params);
        let (lr, mu) = (0.1, 0.9);
        // v1 = 0.5, p1 = 1 - 0.05 = 0.95
        sgd_step(&mut params, &grads, &mut state, lr, mu).unwrap();
        assert!((params.layers[0].weight[[0, 0]] - 0.95).abs() < 1e-12);
        // v2 = 0.9*0.5 + 0.5 = 0.95, p2 = 0.95 - 0.095 = 0.855
        sgd_step(&mut params, &grads, &mut state, lr, mu).unwrap();
        assert!((params.layers[0].weight[[0, 0]] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut params = EncoderParams {
            layers: vec![Layer { weight: Array2::zeros((1, 1)), bias: Array1::zeros(1) }],
        };
        let grads = EncoderGrads {
            layers: vec![Layer { weight: Array2::from_elem((1, 1), f64::NAN), bias: Array1::zeros(1) }],
        };
        let mut state = MomentumState::for_encoder(&params);
        assert!(matches!(
            sgd_step(&mut params, &grads, &mut state, 0.1, 0.9),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn lr_schedule_reproduces_published_decays() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            decay_factor: 0.3,
            decay_milestones: vec![150, 250],
            epochs: 400,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.05);
        assert!((lr_at(&cfg, 150) - 0.015).abs() < 1e-15);
        assert!((lr_at(&cfg, 250) - 0.0045).abs() < 1e-15);
        let constant = TrainConfig { decay_milestones: vec![], ..cfg };
        assert_eq!(lr_at(&constant, 399), 0.05);
    }

    #[test]
    fn lr_is_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..cfg.epochs {
            let lr = lr_at(&cfg, epoch);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn features_have_expected_layout() {
        let scene = toy_scene(0, 50);
        let grid = voxelize(&scene, 0.1).unwrap();
        let with_color = point_features(&grid, &scene, true);
        let without = point_features(&grid, &scene, false);
        assert_eq!(with_color.ncols(), 7);
        for i in 0..grid.len() {
            for a in 3..6 {
                assert_eq!(without[[i, a]], 0.0);
                assert!(with_color[[i, a]] > 0.0);
            }
            assert!(with_color[[i, 6]] >= 0.0);
        }
    }

    #[test]
    fn features_are_translation_invariant_in_centered_coords() {
        let scene = toy_scene(1, 50);
        let grid = voxelize(&scene, 0.1).unwrap();
        let f1 = point_features(&grid, &scene, false);
        let shifted = Scene {
            points: scene
                .points
                .iter()
                .map(|p| PointRecord {
                    position: [p.position[0] + 5.0, p.position[1] - 3.0, p.position[2] + 1.0],
                    ..*p
                })
                .collect(),
        };
        let grid2 = voxelize(&shifted, 0.1).unwrap();
        let f2 = point_features(&grid2, &shifted, false);
        for (a, b) in f1.column(0).iter().zip(f2.column(0).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_contracts_distances() {
        let scenes: Vec<Scene> = (0..4).map(|s| toy_scene(s, 80)).collect();
        let cat = catalog(3);
        let table = synthetic_anchors(3, 8, 0);
        // 3 categories can supply at most 2 negatives per point
        let ccfg = ContrastiveConfig { n_neg: 2, ..ContrastiveConfig::default() };
        let cfg = TrainConfig { epochs: 30, decay_milestones: default_milestones(30), ..toy_config() };
        let (p1, log1) = pretrain(&scenes, &cat, &table, &ccfg, &cfg).unwrap();
        let (p2, _) = pretrain(&scenes, &cat, &table, &ccfg, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert!(log1.epoch_losses.iter().all(|l| l.is_finite()));
        // matched-pair cosine distance shrinks relative to an untrained net
        let untrained = EncoderParams::init(
            &[INPUT_DIM, cfg.hidden_dim, cfg.hidden_dim, 8],
            &mut substream(cfg.seed, "pretrain/init"),
        );
        let mean_dist = |params: &EncoderParams| {
            let mut total = 0.0;
            let mut count = 0usize;
            for scene in &scenes {
                let grid = voxelize(scene, cfg.resolution).unwrap();
                let feats = point_features(&grid, scene, cfg.use_color);
                let enc = encode(params, &feats).unwrap();
                for (i, cell) in grid.cells().iter().enumerate() {
                    if cell.majority_semantic == UNLABELED {
                        continue;
                    }
                    let f = enc.row(i);
                    let norm = f.dot(&f).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let a = table.row(cell.majority_semantic as usize);
                    total += 1.0 - f.dot(&a) / norm;
                    count += 1;
                }
            }
            total / count as f64
        };
        assert!(mean_dist(&p1) < mean_dist(&untrained));
    }

    #[test]
    fn finetune_learns_separable_toy_corpus() {
        let scenes: Vec<Scene> = (0..4).map(|s| toy_scene(s, 80)).collect();
        let cat = catalog(3);
        let cfg = toy_config();
        let init = EncoderParams::init(
            &[INPUT_DIM, cfg.hidden_dim, cfg.hidden_dim, cfg.feature_dim],
            &mut substream(cfg.seed, "scratch"),
        );
        let (params, head, _) = finetune(
            init,
            &scenes,
            &cat,
            None,
            FinetuneLoss::CrossEntropy,
            &cfg,
            FinetuneOptions::default(),
        )
        .unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for scene in &scenes {
            let pred = predict(&params, &head, scene, &cfg).unwrap();
            for (p, l) in scene.points.iter().zip(&pred) {
                total += 1;
                if p.semantic == *l {
                    correct += 1;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn all_false_mask_takes_zero_steps() {
        let scenes: Vec<Scene> = (0..2).map(|s| toy_scene(s, 30)).collect();
        let cat = catalog(3);
        let cfg = TrainConfig { epochs: 3, ..toy_config() };
        let init = EncoderParams::init(
            &[INPUT_DIM, cfg.hidden_dim, cfg.hidden_dim, cfg.feature_dim],
            &mut substream(cfg.seed, "scratch"),
        );
        let masks: Vec<AnnotationMask> = scenes.iter().map(|s| AnnotationMask(vec![false; s.len()])).collect();
        let (params, _, log) = finetune(
            init.clone(),
            &scenes,
            &cat,
            Some(&masks),
            FinetuneLoss::CrossEntropy,
            &cfg,
            FinetuneOptions::default(),
        )
        .unwrap();
        assert_eq!(params, init);
        assert!(log.epoch_losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn predict_with_bias_only_head() {
        let scene = toy_scene(2, 20);
        let params = EncoderParams {
            layers: vec![Layer { weight: Array2::zeros((4, INPUT_DIM)), bias: Array1::zeros(4) }],
        };
        let mut head = ClassifierHead {
            weight: Array2::zeros((3, 4)),
            bias: Array1::zeros(3),
        };
        head.bias[0] = 1.0;
        let cfg = toy_config();
        let pred = predict(&params, &head, &scene, &cfg).unwrap();
        assert!(pred.iter().all(|&l| l == 0));
        // all-zero logits: tie broken to the lowest id
        head.bias[0] = 0.0;
        let pred = predict(&params, &head, &scene, &cfg).unwrap();
        assert!(pred.iter().all(|&l| l == 0));
    }

    #[test]
    fn nearest_anchor_matches_exact_feature() {
        let table = synthetic_anchors(4, 4, 2);
        let mut features = Array2::zeros((2, 4));
        features.row_mut(0).assign(&table.row(3));
        features.row_mut(1).assign(&table.row(1));
        let scores = features.dot(&table.rows.t());
        let labels: Vec<u16> = scores.rows().into_iter().map(argmax_lowest).collect();
        assert_eq!(labels, vec![3, 1]);
        // exact tie resolves to the lowest id; use exactly orthogonal
        // standard-basis anchors so both dots are bit-identical
        let basis = Array2::eye(4);
        let mid = (&basis.row(0).to_owned() + &basis.row(1).to_owned()) / 2.0;
        let mut f = Array2::zeros((1, 4));
        f.row_mut(0).assign(&mid);
        let scores = f.dot(&basis.t());
        assert_eq!(argmax_lowest(scores.row(0)), 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = substream(3, "ckpt");
        let params = EncoderParams::init(&[INPUT_DIM, 8, 8, 5], &mut rng);
        let head = ClassifierHead::init(6, 5, &mut rng);
        let tensors = checkpoint::to_tensors(&params, Some(&head));
        let mut buf = Vec::new();
        checkpoint::write_tensors(&tensors, &mut buf).unwrap();
        let back = checkpoint::read_tensors(&buf[..]).unwrap();
        assert_eq!(tensors, back);
        let (p2, h2) = checkpoint::from_tensors(&back).unwrap();
        assert_eq!(p2, params);
        assert_eq!(h2.unwrap(), head);
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let mut rng = substream(4, "ckpt2");
        let params = EncoderParams::init(&[2, 2], &mut rng);
        let mut buf = Vec::new();
        checkpoint::write_tensors(&checkpoint::to_tensors(&params, None), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint::read_tensors(&bad[..]), Err(Error::Format(_))));
        buf.truncate(buf.len() - 4);
        assert!(matches!(checkpoint::read_tensors(&buf[..]), Err(Error::Format(_))));
    }
}
