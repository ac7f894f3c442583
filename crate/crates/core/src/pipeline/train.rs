use std::path::PathBuf;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::kv::{KvError, KvFile};
use crate::network::{backward_sample_batch, build, checkpoint, forward_sample_batch, ModelParams, NetworkVariant, Pass};
use crate::nn::{softmax_ce, LayerError};
use crate::optim::{AdamConfig, AdamState};
use crate::network::NetworkError;
use crate::sampler::{assemble_batches, materialize, plan_epoch, EpochPlan, SampleBatch, DEFAULT_BATCH_SIZE};
use crate::volume::Volume;

/// RNG stream for dropout masks, separate from initialisation and sampling.
const DROPOUT_STREAM: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: NetworkVariant,
    pub plan: EpochPlan,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    /// Seeds parameter initialisation and dropout.
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: NetworkVariant::CombinedTriplanar3D,
            plan: EpochPlan::desk(0),
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            dropout: 0.5,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Every field, for run metadata.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("variant", self.variant);
        kv.set("seed", self.seed);
        kv.set("sampler_seed", self.plan.seed);
        kv.set("samples_per_class", self.plan.samples_per_class);
        kv.set("epochs", self.plan.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("eps", self.adam.eps);
        kv.set("dropout", self.dropout);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Inverse of [`TrainConfig::to_kv`]; missing keys keep their defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self, PipelineError> {
        kv.check_keys(&Self::KEYS)?;
        let mut c = Self::default();
        if let Some(v) = kv.get("variant") {
            c.variant = v.parse().map_err(|_| KvError::BadValue {
                key: "variant".into(),
                value: v.into(),
            })?;
        }
        macro_rules! read {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = kv.parsed($key)? {
                    $field = v;
                })*
            };
        }
        read! {
            "seed" => c.seed,
            "sampler_seed" => c.plan.seed,
            "samples_per_class" => c.plan.samples_per_class,
            "epochs" => c.plan.epochs,
            "batch_size" => c.batch_size,
            "lr" => c.adam.lr,
            "beta1" => c.adam.beta1,
            "beta2" => c.adam.beta2,
            "eps" => c.adam.eps,
            "dropout" => c.dropout,
            "checkpoint_every" => c.checkpoint_every,
        }
        c.adam.validate()?;
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(PipelineError::BadDropout(c.dropout));
        }
        Ok(c)
    }

    pub const KEYS: [&'static str; 12] = [
        "variant",
        "seed",
        "sampler_seed",
        "samples_per_class",
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "dropout",
        "checkpoint_every",
    ];
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
}

/// Names the first parameter holding a non-finite value, if any.
fn diagnose(params: &ModelParams) -> String {
    params
        .all_tensors()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
        .map(|(name, _)| format!("parameter `{name}` is non-finite"))
        .unwrap_or_else(|| "logits overflowed with finite parameters".to_string())
}

/// One optimisation step on `batch`; returns the batch loss. On a non-finite
/// loss nothing is updated and the error carries epoch and batch 0.
pub fn train_step(
    params: &mut ModelParams,
    optimizer: &mut AdamState,
    batch: &SampleBatch,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, PipelineError> {
    let (logits, cache) = forward_sample_batch(params, batch, Pass::Train { dropout_rate: dropout, rng })?;
    let non_finite = |detail| PipelineError::NonFiniteLoss {
        epoch: 0,
        batch: 0,
        detail,
    };
    let (loss, grad) = match softmax_ce(&logits, &batch.labels) {
        Ok(v) => v,
        Err(LayerError::NonFiniteInput(_)) => return Err(non_finite(diagnose(params))),
        Err(e) => return Err(NetworkError::from(e).into()),
    };
    if !loss.is_finite() {
        return Err(non_finite(diagnose(params)));
    }
    let stats = cache.running_stats().expect("train pass");
    let grads = backward_sample_batch(params, cache, &grad)?;
    optimizer.step(params, &grads)?;
    stats.apply(params);
    Ok(loss)
}

/// Trains a freshly initialised model.
pub fn train(volumes: &[Volume], config: &TrainConfig) -> Result<TrainOutcome, PipelineError> {
    let params = build(config.variant, config.seed);
    let optimizer = AdamState::for_model(&params, config.adam)?;
    train_from(volumes, config, params, optimizer)
}

/// Runs `config.plan.epochs` epochs starting from the given state.
pub fn train_from(
    volumes: &[Volume],
    config: &TrainConfig,
    mut params: ModelParams,
    mut optimizer: AdamState,
) -> Result<TrainOutcome, PipelineError> {
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(PipelineError::BadDropout(config.dropout));
    }
    let need_3d = params.variant().has_volumetric();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(DROPOUT_STREAM);
    let mut epoch_losses = Vec::with_capacity(config.plan.epochs);
    let mut batch_losses = Vec::new();
    for epoch in 0..config.plan.epochs {
        let stream = plan_epoch(volumes, &config.plan, epoch)?;
        let batches = assemble_batches(&stream, config.batch_size)?;
        if batches.is_empty() {
            return Err(PipelineError::NoBatches {
                stream: stream.len(),
                batch_size: config.batch_size,
            });
        }
        let mut total = 0.0;
        for (b, samples) in batches.iter().enumerate() {
            let batch = materialize(volumes, samples, need_3d);
            let loss = train_step(&mut params, &mut optimizer, &batch, config.dropout, &mut rng).map_err(|e| match e {
                PipelineError::NonFiniteLoss { detail, .. } => PipelineError::NonFiniteLoss { epoch, batch: b, detail },
                other => other,
            })?;
            debug!("epoch {epoch} batch {b}/{}: loss {loss:.6}", batches.len());
            batch_losses.push(loss);
            total += loss;
        }
        let mean = total / batches.len() as f64;
        info!("epoch {epoch}: mean loss {mean:.6} over {} batches", batches.len());
        epoch_losses.push(mean);
        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("epoch{:03}.vseg", epoch + 1));
                checkpoint::save(&path, &params, Some(&optimizer))?;
                info!("wrote {}", path.display());
            }
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        epoch_losses,
        batch_losses,
    })
}
