//! Training, evaluation, checkpoints and the ablation suite.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, Batch, Dataset, InMemoryDataset, Sample, SyntheticSceneConfig};
use crate::depth_geometry::DepthMap;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossTerms};
use crate::metrics::{evaluate_pair, EdgeMetricConfig, MetricsReport};
use crate::model::{tensor_to_depths, DepthNet, FusionMode, ModelConfig};
use crate::nn::{Adam, Gradients, Graph, ParamStore, Tensor};
use crate::par;

/// Module and loss switches of the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_bad: bool,
    pub use_su: bool,
    pub use_st: bool,
    /// Replace each ST with plain resampling of the SU output.
    pub st_bypass_upsample_direct: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_bad: true,
            use_su: true,
            use_st: true,
            st_bypass_upsample_direct: false,
        }
    }
}

impl AblationConfig {
    pub fn fusion_mode(&self) -> FusionMode {
        if !self.use_su {
            FusionMode::EncoderSkips
        } else if !self.use_st || self.st_bypass_upsample_direct {
            FusionMode::SuDirect
        } else {
            FusionMode::SuSt
        }
    }

    /// The loss actually optimized: `alpha = 0` without BAD.
    pub fn effective_loss(&self, loss: &LossConfig) -> LossConfig {
        if self.use_bad {
            *loss
        } else {
            LossConfig { alpha: 0.0, ..*loss }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub ablation: AblationConfig,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
    /// Validate after every epoch when a validation set is given.
    pub validate_every_epoch: bool,
    /// Start the output at the mean valid training depth instead of `model.init_depth`.
    pub init_depth_from_data: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            epochs: 10,
            batch_size: 16,
            lr_decay_factor: 0.9,
            lr_decay_every: 5,
            seed: 0,
            ablation: AblationConfig::default(),
            hflip: false,
            validate_every_epoch: true,
            init_depth_from_data: true,
        }
    }
}

impl TrainConfig {
    /// Small-hardware settings: batch 4, 5 epochs, larger step size.
    pub fn desk_preset() -> Self {
        Self {
            lr: 1e-3,
            epochs: 5,
            batch_size: 4,
            ..Self::default()
        }
    }

    /// Decay to a tenth every `lr_decay_every` epochs.
    pub fn tenfold_decay_preset() -> Self {
        Self {
            lr_decay_factor: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("train.lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.lr_decay_every == 0 {
            return bad("train.lr_decay_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

/// `lr * factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

/// Weights, optimizer state and the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub fusion: FusionMode,
    pub loss_cfg: LossConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DepthNet> {
        let mut net = DepthNet::new(&self.model_cfg, self.fusion, 0)?;
        net.store.load_from(&self.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        ciborium::into_writer(self, &mut w).map_err(|e| Error::format(path, e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ciborium::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::format(path, format!("unreadable checkpoint: {e}")))
    }

    /// One line per epoch; the header depends on the edge thresholds.
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let thresholds = history
        .iter()
        .find_map(|r| r.val.as_ref().map(MetricsReport::thresholds))
        .unwrap_or_default();
    let mut out = String::from("epoch,lr,train_loss");
    if !thresholds.is_empty() {
        let _ = write!(out, ",{}", MetricsReport::csv_header(&thresholds));
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{},{}", r.epoch, r.lr, r.train_loss);
        if let Some(v) = &r.val {
            let _ = write!(out, ",{}", v.csv_row());
        }
        out.push('\n');
    }
    out
}

/// `weights.json` (name, shape, offset, trainable) and `weights.bin`
/// (concatenated little-endian f32).
pub fn write_weights_manifest(dir: &Path, store: &ParamStore) -> Result<[PathBuf; 2]> {
    #[derive(Serialize)]
    struct Entry<'a> {
        name: &'a str,
        shape: &'a [usize],
        offset: usize,
        len: usize,
        trainable: bool,
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for p in store.params() {
        entries.push(Entry {
            name: &p.name,
            shape: &p.shape,
            offset: blob.len() / 4,
            len: p.value.len(),
            trainable: p.trainable,
        });
        for v in &p.value {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json_path = dir.join("weights.json");
    let bin_path = dir.join("weights.bin");
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok([json_path, bin_path])
}

/// Gradients of the batch-mean loss, before any update.
pub struct StepGradients {
    pub loss: f64,
    pub grads: Gradients,
    stat_updates: Vec<(crate::nn::ParamId, Vec<f32>)>,
}

/// Forward and backward pass over one batch in training mode.
pub fn compute_gradients(net: &DepthNet, batch: &Batch, loss: &LossConfig, batch_id: &str) -> Result<StepGradients> {
    let mut g = Graph::new(&net.store, true);
    let out = net.forward(&mut g, batch.images.clone())?;
    let preds = tensor_to_depths(g.value(out.depth))?;
    let n = batch.len();
    let terms: Vec<Result<LossTerms>> =
        par::map_range(n, |i| LossTerms::evaluate(&batch.depths[i], &preds[i], loss, true));
    let mut total = 0.0;
    let mut seed = Vec::with_capacity(g.value(out.depth).numel());
    for (i, t) in terms.into_iter().enumerate() {
        let t = t.map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                batch_id: batch_id.to_string(),
                loss: f64::NAN,
            },
            other => Error::Sample {
                id: batch.ids[i].clone(),
                source: Box::new(other),
            },
        })?;
        total += t.report.l_total;
        seed.extend(t.grad.iter().map(|&d| (d / n as f64) as f32));
    }
    let loss_value = total / n as f64;
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            batch_id: batch_id.to_string(),
            loss: loss_value,
        });
    }
    let seed = Tensor::from_vec(g.shape(out.depth), seed)?;
    let bp = g.backward(out.depth, seed)?;
    if !bp.params.all_finite() {
        return Err(Error::Divergence {
            batch_id: batch_id.to_string(),
            loss: loss_value,
        });
    }
    Ok(StepGradients {
        loss: loss_value,
        grads: bp.params,
        stat_updates: g.take_stat_updates(),
    })
}

/// One optimizer step; returns the batch loss before the update.
pub fn train_step(net: &mut DepthNet, adam: &mut Adam, batch: &Batch, loss: &LossConfig, lr: f64, batch_id: &str) -> Result<f64> {
    let step = compute_gradients(net, batch, loss, batch_id)?;
    for (id, values) in step.stat_updates {
        net.store.value_mut(id).copy_from_slice(&values);
    }
    adam.update(&mut net.store, &step.grads, lr);
    Ok(step.loss)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub net: DepthNet,
}

fn augment(sample: Sample, seed: u64, epoch: usize, index: usize) -> Result<Sample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    if rng.gen_bool(0.5) {
        sample.hflip()
    } else {
        Ok(sample)
    }
}

/// Trains from scratch with the architecture selected by the ablation
/// switches. Deterministic given the configs and data.
/// Mean over every valid ground-truth pixel; `None` when nothing is valid.
pub fn mean_depth(ds: &dyn Dataset) -> Result<Option<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Result<Vec<(f64, usize)>> = par::map_slice(&idx, |&i| {
        let s = ds.get(i)?;
        let d = &s.depth;
        let sum = d.values().iter().zip(d.valid()).filter(|(_, &ok)| ok).map(|(v, _)| v).sum::<f64>();
        Ok((sum, d.valid_count()))
    })
    .into_iter()
    .collect();
    let (sum, n) = parts?.into_iter().fold((0.0, 0), |(a, b), (s, c)| (a + s, b + c));
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    train_set: &dyn Dataset,
    val_set: Option<&dyn Dataset>,
    edge_cfg: &EdgeMetricConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    edge_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let abl = train_cfg.ablation;
    let loss = abl.effective_loss(loss_cfg);
    let mut model_cfg = model_cfg.clone();
    if train_cfg.init_depth_from_data {
        if let Some(mean) = mean_depth(train_set)? {
            model_cfg.init_depth = mean;
        }
    }
    let mut net = DepthNet::new(&model_cfg, abl.fusion_mode(), train_cfg.seed)?;
    let mut adam = Adam::new(&net.store, train_cfg.beta1, train_cfg.beta2, train_cfg.weight_decay);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..train_cfg.epochs {
        let lr = lr_schedule(epoch, train_cfg);
        let order = epoch_order(train_set.len(), Some(train_cfg.seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(train_cfg.batch_size).collect();
        for (b, idx) in chunks.iter().enumerate() {
            let samples: Result<Vec<Sample>> = par::map_slice(idx, |&i| {
                let s = train_set.get(i)?;
                if train_cfg.hflip {
                    augment(s, train_cfg.seed, epoch, i)
                } else {
                    Ok(s)
                }
            })
            .into_iter()
            .collect();
            let batch = Batch::from_samples(samples?)?;
            let batch_id = format!("epoch {epoch} batch {b} [{}]", batch.ids.join(","));
            let l = train_step(&mut net, &mut adam, &batch, &loss, lr, &batch_id)?;
            epoch_loss += l;
            step_losses.push(l);
        }
        let val = match val_set {
            Some(v) if !v.is_empty() && (train_cfg.validate_every_epoch || epoch + 1 == train_cfg.epochs) => {
                Some(evaluate(&net, v, edge_cfg)?.aggregate)
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / chunks.len() as f64,
            val,
        });
    }

    let checkpoint = Checkpoint {
        model_cfg: model_cfg.clone(),
        fusion: net.fusion,
        loss_cfg: *loss_cfg,
        train_cfg: train_cfg.clone(),
        params: net.store.clone(),
        optimizer: adam,
        epoch: train_cfg.epochs,
        history,
        step_losses,
    };
    Ok(TrainOutcome { checkpoint, net })
}

/// Per-sample reports and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_sample: Vec<SampleReport>,
    pub aggregate: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub report: MetricsReport,
}

impl Evaluation {
    fn from_reports(per_sample: Vec<SampleReport>) -> Result<Self> {
        let reports: Vec<MetricsReport> = per_sample.iter().map(|s| s.report.clone()).collect();
        let aggregate = MetricsReport::mean(&reports)?;
        Ok(Self { per_sample, aggregate })
    }

    /// `id,<metrics>` per sample, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", MetricsReport::csv_header(&self.aggregate.thresholds()));
        for s in &self.per_sample {
            let _ = writeln!(out, "{},{}", s.id, s.report.csv_row());
        }
        let _ = writeln!(out, "mean,{}", self.aggregate.csv_row());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Evaluation-mode predictions against every sample's ground truth.
pub fn evaluate(net: &DepthNet, dataset: &dyn Dataset, edge_cfg: &EdgeMetricConfig) -> Result<Evaluation> {
    evaluate_with(dataset, edge_cfg, |s| {
        Ok(net.predict(&s.image.to_tensor())?.remove(0))
    })
}

/// Ground truth scored against itself.
pub fn evaluate_identity(dataset: &dyn Dataset, edge_cfg: &EdgeMetricConfig) -> Result<Evaluation> {
    evaluate_with(dataset, edge_cfg, |s| Ok(s.depth.clone()))
}

pub fn evaluate_with<F>(dataset: &dyn Dataset, edge_cfg: &EdgeMetricConfig, predict: F) -> Result<Evaluation>
where
    F: Fn(&Sample) -> Result<DepthMap> + Sync + Send,
{
    edge_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let reports: Vec<Result<SampleReport>> = par::map_range(dataset.len(), |i| {
        let s = dataset.get(i)?;
        let pred = predict(&s);
        let report = pred.and_then(|p| evaluate_pair(&s.depth, &p, edge_cfg)).map_err(|e| Error::Sample {
            id: s.id.clone(),
            source: Box::new(e),
        })?;
        Ok(SampleReport { id: s.id, report })
    });
    Evaluation::from_reports(reports.into_iter().collect::<Result<_>>()?)
}

/// The five module/loss configurations, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Baseline,
    Bad,
    BadSuDirect,
    SuSt,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Baseline,
        AblationRow::Bad,
        AblationRow::BadSuDirect,
        AblationRow::SuSt,
        AblationRow::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::Bad => "bad",
            AblationRow::BadSuDirect => "bad_su_direct",
            AblationRow::SuSt => "su_st",
            AblationRow::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Baseline => "Baseline",
            AblationRow::Bad => "Baseline+BAD",
            AblationRow::BadSuDirect => "Baseline+BAD+SU+upsample directly",
            AblationRow::SuSt => "Baseline+SU+ST",
            AblationRow::Full => "Baseline+SU+ST+BAD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|r| r.name()).collect();
                Error::Config(format!("unknown ablation row {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Parses a comma list and returns the rows in table order.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let wanted = list.split(',').map(Self::parse).collect::<Result<Vec<_>>>()?;
        Ok(Self::ALL.into_iter().filter(|r| wanted.contains(r)).collect())
    }

    pub fn toggles(self) -> AblationConfig {
        let (use_bad, use_su, use_st, bypass) = match self {
            AblationRow::Baseline => (false, false, false, false),
            AblationRow::Bad => (true, false, false, false),
            AblationRow::BadSuDirect => (true, true, false, true),
            AblationRow::SuSt => (false, true, true, false),
            AblationRow::Full => (true, true, true, false),
        };
        AblationConfig {
            use_bad,
            use_su,
            use_st,
            st_bypass_upsample_direct: bypass,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub parameters: usize,
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Trains and evaluates each requested row with the same seed and data.
pub fn ablation_suite(
    exp: &ExperimentConfig,
    rows: &[AblationRow],
    train_set: &dyn Dataset,
    val_set: &dyn Dataset,
) -> Result<Vec<AblationEntry>> {
    let eval_set: &dyn Dataset = if val_set.is_empty() { train_set } else { val_set };
    rows.iter()
        .map(|&row| {
            let train_cfg = TrainConfig {
                ablation: row.toggles(),
                validate_every_epoch: false,
                ..exp.train.clone()
            };
            let out = train(&train_cfg, &exp.model, &exp.loss, train_set, None, &exp.edge_metrics)?;
            let report = evaluate(&out.net, eval_set, &exp.edge_metrics)?.aggregate;
            Ok(AblationEntry {
                row,
                parameters: out.net.count_parameters(),
                report,
                checkpoint: out.checkpoint,
            })
        })
        .collect()
}

pub fn ablation_csv(entries: &[AblationEntry]) -> String {
    let thresholds = entries.first().map(|e| e.report.thresholds()).unwrap_or_default();
    let mut out = format!("row,label,parameters,{}\n", MetricsReport::csv_header(&thresholds));
    for e in entries {
        let _ = writeln!(out, "{},{},{},{}", e.row.name(), e.row.label(), e.parameters, e.report.csv_row());
    }
    out
}

/// Fixed-width text rendering of the ablation table.
pub fn ablation_table(entries: &[AblationEntry]) -> String {
    let thresholds = entries.first().map(|e| e.report.thresholds()).unwrap_or_default();
    let mut out = format!(
        "{:<36} {:>10} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}",
        "configuration", "params", "rmse", "abs_rel", "log10", "d1", "d2", "d3"
    );
    for t in &thresholds {
        let _ = write!(out, " {:>8}", format!("F1@{t}"));
    }
    out.push('\n');
    for e in entries {
        let r = &e.report;
        let _ = write!(
            out,
            "{:<36} {:>10} {:>8.4} {:>8.4} {:>8.4} {:>6.3} {:>6.3} {:>6.3}",
            e.row.label(),
            e.parameters,
            r.rmse,
            r.abs_rel,
            r.log10,
            r.delta1,
            r.delta2,
            r.delta3
        );
        for s in &r.edge {
            let _ = write!(out, " {:>8.4}", s.f1);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene generator settings used by `generate` and in-memory runs.
    pub synthetic: SyntheticSceneConfig,
    /// Number of scenes `generate` writes.
    pub count: usize,
    /// Fixed color-map range for depth figures, meters.
    pub colormap_range: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSceneConfig::default(),
            count: 200,
            colormap_range: [1.0, 8.0],
        }
    }
}

/// One JSON document with `model`, `loss`, `train`, `data` and
/// `edge_metrics` sections; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub edge_metrics: EdgeMetricConfig,
}

impl ExperimentConfig {
    /// 64x64 scenes, batch 4, 5 epochs.
    pub fn desk_preset() -> Self {
        Self {
            train: TrainConfig::desk_preset(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        self.edge_metrics.validate()?;
        let [lo, hi] = self.data.colormap_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("data.colormap_range must be increasing, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Synthetic train/val sets from the `data` section.
    pub fn synthetic_splits(&self) -> Result<(InMemoryDataset, InMemoryDataset)> {
        Ok(InMemoryDataset::synthetic(&self.data.synthetic, self.data.count)?.split())
    }
}
