//! Seeded, resumable training loop, model-backed prediction and the
//! component ablation.

use std::fmt::Write as _;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{batch_images, batch_masks, preprocess_all, split, NormStats, PreparedSample, SampleRecord};
use crate::decoder::{sample_point_prompt, PointPrompt};
use crate::error::{Error, Result};
use crate::loss::{joint_loss_tensor, LossBreakdown, MaskLogits};
use crate::metrics::{evaluate, MetricReport, Predictor};
use crate::model::SegModel;
use crate::optim::Adam;
use crate::peft::{partition_parameters, ParameterPartition};
use crate::raster::MaskPair;

/// RNG keyed by a seed and a label, independent of call order.
pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tepoch\tl_disk\tl_cup\tl_contain\ttotal";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.epoch, self.loss.l_disk, self.loss.l_cup, self.loss.l_contain, self.loss.total
        )
    }
}

/// Mean breakdown over a set of step records.
pub fn mean_loss(records: &[StepRecord]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for r in records {
        m.l_disk += r.loss.l_disk / n;
        m.l_cup += r.loss.l_cup / n;
        m.l_contain += r.loss.l_contain / n;
        m.total += r.loss.total / n;
    }
    m
}

pub struct Trainer {
    cfg: RunConfig,
    model: SegModel,
    partition: ParameterPartition,
    opt: Adam,
    norm: NormStats,
    train: Vec<PreparedSample>,
    epoch: u64,
}

impl Trainer {
    /// Fresh model; normalisation statistics come from `train` only.
    pub fn new(cfg: &RunConfig, train: Vec<PreparedSample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let norm = NormStats::fit(&train)?;
        let model = SegModel::new(&cfg.model(), cfg.seed, DType::F32, &Device::Cpu)?;
        Self::assemble(cfg, model, norm, train, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, train: Vec<PreparedSample>) -> Result<Self> {
        let cfg = ck.config()?;
        let model = SegModel::new(&cfg.model(), cfg.seed, DType::F32, &Device::Cpu)?;
        ck.restore(&model)?;
        let mut t = Self::assemble(&cfg, model, ck.norm.clone(), train, ck.epoch)?;
        if let Some(st) = &ck.optimizer {
            t.opt.load_state(st)?;
        }
        Ok(t)
    }

    fn assemble(cfg: &RunConfig, model: SegModel, norm: NormStats, train: Vec<PreparedSample>, epoch: u64) -> Result<Self> {
        let entries: Vec<_> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tag, p.var.dims().to_vec()))
            .collect();
        let partition = partition_parameters(&entries, cfg.mode)?;
        let opt = Adam::new(model.params(), &partition, cfg.adam())?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            partition,
            opt,
            norm,
            train,
            epoch,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut SegModel {
        &mut self.model
    }

    pub fn partition(&self) -> &ParameterPartition {
        &self.partition
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// One optimizer step on `batch` with the given prompts.
    pub fn step_on(&mut self, batch: &[&PreparedSample], prompts: &[PointPrompt]) -> Result<LossBreakdown> {
        let dev = Device::Cpu;
        let images = batch_images(batch, &self.norm, DType::F32, &dev)?;
        let (disc, cup) = batch_masks(batch, DType::F32, &dev)?;
        let logits = self.model.forward(&images, prompts)?;
        let (loss, breakdown) = joint_loss_tensor(&logits, &disc, &cup, &self.cfg.loss_weights())?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        Ok(breakdown)
    }

    /// Runs the next epoch. Order and prompts depend only on `(seed, epoch)`.
    pub fn train_epoch(&mut self) -> Result<Vec<StepRecord>> {
        let mut rng = keyed_rng(self.cfg.seed, &format!("epoch/{}", self.epoch));
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let mut records = Vec::new();
        let samples = std::mem::take(&mut self.train);
        let result = (|| {
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let prompts = batch
                    .iter()
                    .map(|s| sample_point_prompt(&s.masks.disc, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let loss = self.step_on(&batch, &prompts)?;
                records.push(StepRecord {
                    step: self.opt.steps_taken(),
                    epoch: self.epoch,
                    loss,
                });
            }
            Ok::<_, Error>(())
        })();
        self.train = samples;
        result?;
        self.epoch += 1;
        Ok(records)
    }

    /// Trains until `epochs` epochs are done, reporting every step.
    pub fn run(&mut self, epochs: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut all = Vec::new();
        while self.epoch < epochs {
            let recs = self.train_epoch()?;
            for r in &recs {
                on_step(r);
            }
            log::info!("epoch {} mean loss {:.5}", self.epoch, mean_loss(&recs).total);
            all.extend(recs);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.cfg, &self.model, &self.norm, self.epoch, Some(self.opt.state()?))
    }

    pub fn predictor(&self) -> ModelPredictor<'_> {
        ModelPredictor {
            model: &self.model,
            norm: &self.norm,
            seed: self.cfg.seed,
            batch_size: self.cfg.batch_size,
        }
    }
}

/// Predicts with a trained model. Each sample gets one foreground prompt
/// drawn from its own disc annotation with an RNG keyed by its id.
pub struct ModelPredictor<'a> {
    pub model: &'a SegModel,
    pub norm: &'a NormStats,
    pub seed: u64,
    pub batch_size: usize,
}

impl ModelPredictor<'_> {
    pub fn prompt_for(&self, s: &PreparedSample) -> Result<PointPrompt> {
        sample_point_prompt(&s.masks.disc, &mut keyed_rng(self.seed, &format!("eval/{}", s.id)))
    }

    /// Raw logits `(B, 2, S, S)` for a batch.
    pub fn logits(&self, batch: &[&PreparedSample]) -> Result<candle_core::Tensor> {
        let images = batch_images(batch, self.norm, DType::F32, &Device::Cpu)?;
        let prompts = batch.iter().map(|s| self.prompt_for(s)).collect::<Result<Vec<_>>>()?;
        self.model.forward(&images, &prompts)
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[PreparedSample]) -> Result<Vec<MaskPair>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let batch: Vec<&PreparedSample> = chunk.iter().collect();
            let logits = self.logits(&batch)?.to_dtype(DType::F64)?;
            for i in 0..batch.len() {
                out.push(MaskLogits::from_tensor(&logits, i)?.to_masks());
            }
        }
        Ok(out)
    }
}

/// Result of [`train_and_evaluate`].
pub struct RunOutcome {
    pub trainer: Trainer,
    pub steps: Vec<StepRecord>,
    pub report: MetricReport,
    pub test_ids: Vec<String>,
}

/// Split, preprocess, train for `cfg.epochs` and evaluate on the test split.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    records: Vec<SampleRecord>,
    on_step: impl FnMut(&StepRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = split(records, cfg.train_ratio, cfg.seed)?;
    let pipeline = cfg.pipeline();
    let prepared = preprocess_all(&train, &pipeline)?;
    let mut trainer = Trainer::new(cfg, prepared)?;
    let steps = trainer.run(cfg.epochs as u64, on_step)?;
    let report = evaluate(&trainer.predictor(), &test, &pipeline)?;
    Ok(RunOutcome {
        trainer,
        steps,
        report,
        test_ids: test.into_iter().map(|r| r.id).collect(),
    })
}

/// Component toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub cbam: bool,
    pub adapter: bool,
    pub polar: bool,
}

/// The five component combinations compared in the ablation, in table order.
pub const ABLATION_ROWS: [Toggles; 5] = [
    Toggles { cbam: false, adapter: false, polar: false },
    Toggles { cbam: true, adapter: true, polar: false },
    Toggles { cbam: true, adapter: false, polar: true },
    Toggles { cbam: false, adapter: true, polar: true },
    Toggles { cbam: true, adapter: true, polar: true },
];

impl Toggles {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            use_cbam: self.cbam,
            use_adapter: self.adapter,
            use_polar: self.polar,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub seed: u64,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let mut s = String::from("cbam\tadapter\tpt\tseed\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                mark(r.toggles.cbam),
                mark(r.toggles.adapter),
                mark(r.toggles.polar),
                r.seed,
                r.report.disc_dice,
                r.report.disc_iou,
                r.report.cup_dice,
                r.report.cup_iou
            );
        }
        s
    }
}

/// Trains and evaluates every ablation row with the same data, split, seed
/// and schedule.
pub fn ablate(base: &RunConfig, records: &[SampleRecord]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for t in ABLATION_ROWS {
        let cfg = t.apply(base);
        log::info!("ablation row cbam={} adapter={} pt={}", t.cbam, t.adapter, t.polar);
        let out = train_and_evaluate(&cfg, records.to_vec(), |_| {})?;
        let tail = out.steps.len().saturating_sub(out.steps.len().min(4));
        rows.push(AblationRow {
            toggles: t,
            seed: cfg.seed,
            final_loss: mean_loss(&out.steps[tail..]).total,
            report: out.report,
        });
    }
    Ok(AblationReport { rows })
}
