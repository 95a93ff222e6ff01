//! Losses, optimizer, schedule, regularization, inference and the training loop.

mod infer;
mod loss;
mod metrics;
mod optim;
mod regularize;


use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mixup, spec_augment, visual_augment, Batch, Dataset, LabelSpace, LabelWeight, MixupMode};
use crate::dsp::{sample_windows, Modality, SampleMode, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{init_params, DropPath, ForwardOptions, Mbt, ModelConfig, ModelInputs};
use crate::tensor::{checkpoint, Graph, Tensor};

pub use infer::{batch_inputs, crop_offsets, evaluate, multicrop_infer, stack_rows, window_tokens, EvalReport, WindowTokens};
pub use loss::{bce_loss, ce_loss, one_hot};
pub use metrics::{average_precision, mean_average_precision, topk_accuracy, MapReport};
pub use optim::{cosine_warmup_lr, sgd_momentum_step, OptimizerState};
pub use regularize::stochastic_depth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Beta parameter of mixup; 0 disables it.
    pub mixup_alpha: f64,
    pub mixup_mode: MixupMode,
    #[serde(default)]
    pub mixup_label: LabelWeight,
    /// Stochastic-depth drop probability, constant across layers.
    pub drop_path: f64,
    /// Must agree with the model tokenizer.
    pub span_s: f64,
    pub frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub sample_mode: SampleMode,
    pub spec_time_mask: usize,
    pub spec_freq_mask: usize,
    pub visual_augment: bool,
    pub eval_crops: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            base_lr: 0.5,
            epochs: 50,
            warmup_epochs: 2.5,
            batch_size: 64,
            momentum: 0.9,
            mixup_alpha: 0.3,
            mixup_mode: MixupMode::Modality,
            mixup_label: LabelWeight::Mean,
            drop_path: 0.3,
            span_s: 8.0,
            frames: 8,
            seed: 0,
            sample_mode: SampleMode::Sync,
            spec_time_mask: 192,
            spec_freq_mask: 48,
            visual_augment: true,
            eval_crops: 4,
        }
    }

    /// Minutes on one CPU core for the desk model.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.05,
            epochs: 20,
            warmup_epochs: 1.0,
            batch_size: 16,
            momentum: 0.9,
            mixup_alpha: 0.0,
            mixup_mode: MixupMode::Standard,
            mixup_label: LabelWeight::Mean,
            drop_path: 0.0,
            span_s: 0.32,
            frames: 2,
            seed: 0,
            sample_mode: SampleMode::Sync,
            spec_time_mask: 8,
            spec_freq_mask: 2,
            visual_augment: false,
            eval_crops: 1,
        }
    }

    /// Copies span and frame count from the model tokenizer.
    pub fn matching(mut self, model: &ModelConfig) -> Self {
        self.span_s = model.tokenizer.span_s;
        self.frames = model.tokenizer.n_frames;
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" | "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (tiny, desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return bad(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.eval_crops == 0 {
            return bad("batch_size and eval_crops must be positive".into());
        }
        if self.mixup_alpha < 0.0 || self.base_lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("mixup_alpha and base_lr must be ≥ 0, momentum in [0, 1)".into());
        }
        if self.mixup_alpha > 0.0 && self.batch_size < 2 {
            return bad("mixup needs batches of at least two".into());
        }
        Ok(())
    }

    /// Error unless span and frame count agree with the model tokenizer.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        let t = &model.tokenizer;
        if (t.span_s - self.span_s).abs() > 1e-12 || t.n_frames != self.frames {
            return Err(Error::Config(format!(
                "train config span {} s / {} frames disagrees with the tokenizer's {} s / {} frames",
                self.span_s, self.frames, t.span_s, t.n_frames
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub map: Option<f64>,
    pub lr: f64,
}

pub const METRIC_HEADER: &str = "epoch,split,loss,top1,top5,map,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            r.loss,
            opt(r.top1),
            opt(r.top5),
            opt(r.map),
            r.lr
        );
    }
    s
}

pub struct TrainOutcome {
    pub model: Mbt,
    pub log: Vec<MetricRow>,
}

fn targets_for(labels: LabelSpace, data: &Dataset, idx: &[usize]) -> Result<Vec<Tensor>> {
    let widths = labels.head_widths();
    let mut heads: Vec<Vec<f64>> = widths.iter().map(|&c| Vec::with_capacity(c * idx.len())).collect();
    for &i in idx {
        for (h, row) in labels.targets(&data.clips[i].labels).into_iter().enumerate() {
            heads[h].extend(row);
        }
    }
    heads
        .into_iter()
        .zip(widths)
        .map(|(d, c)| Tensor::new(vec![idx.len(), c], d))
        .collect()
}

/// Augmented tokens for the clips at `idx`.
fn training_batch(
    model: &Mbt,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    data: &Dataset,
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let (want_rgb, want_spec) = (model.modality(Modality::Rgb).is_some(), model.modality(Modality::Spec).is_some());
    let (mut rgb, mut spec) = (Vec::new(), Vec::new());
    for &i in idx {
        let w = sample_windows(&data.clips[i], cfg.span_s, cfg.frames, cfg.sample_mode, rng)?;
        // Both streams are always augmented so the random sequence does not
        // depend on which towers the model has.
        let frames = if cfg.visual_augment { visual_augment(&w.frames, rng).0 } else { w.frames };
        let s = tok.spectrogram(&w.audio)?;
        let (s, _) = spec_augment(&s, cfg.spec_time_mask, cfg.spec_freq_mask, rng)?;
        if want_rgb {
            rgb.push(tok.visual_patches(&frames)?.patches);
        }
        if want_spec {
            spec.push(tok.spectrogram_patches(s)?.patches);
        }
    }
    Ok(Batch {
        rgb: if want_rgb { Some(stack_rows(&rgb)?) } else { None },
        spec: if want_spec { Some(stack_rows(&spec)?) } else { None },
        targets: targets_for(data.labels, data, idx)?,
    })
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    on_epoch: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    let model = init_params(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    train_model(model, cfg, train_set, eval_set, on_epoch)
}

/// Trains an existing model; the run is a pure function of its arguments.
pub fn train_model(
    mut model: Mbt,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_model(&model.config)?;
    train_set.validate()?;
    train_set.check_span(cfg.span_s)?;
    if train_set.labels.head_widths() != model.config.head.widths() {
        return Err(Error::Config(format!(
            "dataset heads {:?} do not match model heads {:?}",
            train_set.labels.head_widths(),
            model.config.head.widths()
        )));
    }
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let tok = Tokenizer::new(model.config.tokenizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_epochs * steps_per_epoch as f64).round() as usize;
    let mut opt = OptimizerState::new(&model.store, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let multilabel = matches!(train_set.labels, LabelSpace::Multilabel(_));

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let mut batch = training_batch(&model, &tok, cfg, train_set, idx, &mut rng)?;
            if cfg.mixup_alpha > 0.0 && idx.len() >= 2 {
                batch = mixup(&batch, cfg.mixup_alpha, cfg.mixup_mode, cfg.mixup_label, &mut rng)?.0;
            }
            lr = cosine_warmup_lr(step, total, cfg.base_lr, warmup);
            let mut g = Graph::new();
            let vars = model.store.bind(&mut g)?;
            let inputs = ModelInputs { rgb: batch.rgb, spec: batch.spec };
            let mut fo = ForwardOptions {
                drop_path: (cfg.drop_path > 0.0).then(|| DropPath { p: cfg.drop_path, rng: &mut drop_rng }),
                ..Default::default()
            };
            let out = model.forward(&mut g, &vars, &inputs, &mut fo)?;
            let loss = if multilabel {
                bce_loss(&mut g, out.logits[0], batch.targets[0].clone())?
            } else {
                ce_loss(&mut g, &out.logits, &batch.targets)?
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite { op: "train" });
            }
            loss_sum += lv * idx.len() as f64;
            let mut grads = g.backward(loss, vars.vars())?;
            let grads = vars.collect(&mut grads, &model.store);
            sgd_momentum_step(&mut model.store, &grads, &mut opt, lr)?;
            step += 1;
        }
        let row = MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / n as f64,
            top1: None,
            top5: None,
            map: None,
            lr,
        };
        on_epoch(&row);
        log.push(row);
        if let Some(ev) = eval_set {
            let r = evaluate(&model, &tok, ev, cfg.eval_crops, 64)?;
            let row = MetricRow { epoch, split: ev.split.clone(), loss: r.loss, top1: r.top1, top5: r.top5, map: r.map, lr };
            on_epoch(&row);
            log.push(row);
        }
    }
    Ok(TrainOutcome { model, log })
}

pub const MODEL_CONFIG_FILE: &str = "model.toml";
pub const PARAMS_FILE: &str = "params.ckpt";

/// Writes the model config and parameter archive into `dir`.
pub fn save_model(model: &Mbt, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MODEL_CONFIG_FILE), model.config.to_toml())?;
    checkpoint::save(&dir.join(PARAMS_FILE), &model.store.entries())
}

pub fn load_model(dir: &Path) -> Result<Mbt> {
    let cfg = ModelConfig::from_toml(&std::fs::read_to_string(dir.join(MODEL_CONFIG_FILE))?)?;
    let mut model = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.store.load_entries(checkpoint::load(&dir.join(PARAMS_FILE))?)?;
    Ok(model)
}
