use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::detector::{hwc_to_chw, Detector};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::runner::checkpoint::{Checkpoint, RngState};
use crate::runner::config::{BankConfig, RunConfig};
use crate::runner::optim::Sgd;
use crate::style::{encode_style_image, StyleBank, StyleEncoder};
use crate::synth::Sample;

pub const LOSS_CSV_HEADER: [&str; 7] = ["step", "L_cls", "L_reg", "L_HCL", "L_RAC", "L_SEC", "total"];

/// Independent ChaCha streams of one run seed.
const INIT_STREAM: u64 = 0;
const BANK_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub fn csv_fields(&self) -> [String; 7] {
        let l = &self.loss;
        [
            self.step.to_string(),
            l.cls.to_string(),
            l.reg.to_string(),
            l.hcl.to_string(),
            l.rac.to_string(),
            l.sec.to_string(),
            l.total.to_string(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Builds the style bank of a run, or `None` when hallucination is off.
pub fn build_bank(cfg: &RunConfig, source: &[Sample]) -> Result<Option<StyleBank>> {
    if !cfg.detector.toggles.style {
        return Ok(None);
    }
    let mut rng = run_rng(cfg.seed, BANK_STREAM);
    let bank = match &cfg.bank {
        BankConfig::Synthetic { count } => StyleBank::synthetic(cfg.detector.widths, *count, &mut rng)?,
        BankConfig::Encoded { count } => {
            if source.len() < *count {
                return Err(Error::Config(format!(
                    "encoded bank needs {count} source images, only {} available",
                    source.len()
                )));
            }
            let encoder = StyleEncoder::new(&cfg.detector, &mut rng)?;
            let mut bank = StyleBank::new();
            for s in &source[..*count] {
                bank.push(encode_style_image(&hwc_to_chw(&s.image)?, &encoder, s.id.clone())?)?;
            }
            bank
        }
        BankConfig::File { path } => StyleBank::read(path)?,
    };
    Ok(Some(bank))
}

/// Trains on `source` only. `on_step` sees every logged step as it happens.
pub fn train(cfg: &RunConfig, source: &[Sample], mut on_step: impl FnMut(&LossRecord)) -> Result<TrainOutput> {
    cfg.validate()?;
    let source = match cfg.data.train_subset {
        Some(n) => &source[..n.min(source.len())],
        None => source,
    };
    if source.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    let mut detector = Detector::new(cfg.detector.clone(), &mut run_rng(cfg.seed, INIT_STREAM))?;
    let bank = build_bank(cfg, source)?;
    let mut rng = run_rng(cfg.seed, TRAIN_STREAM);
    let mut opt = Sgd::new(cfg.optimizer.clone());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<_> = chunk.iter().map(|&i| source[i].annotated()).collect();
            let mut g = Graph::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                e => e,
            };
            let sg = detector
                .training_step(&mut g, &batch, bank.as_ref(), None, &mut rng)
                .map_err(diverged)?;
            if !sg.breakdown.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            detector.params_mut().zero_grad();
            g.backward_into(sg.loss, detector.params_mut()).map_err(diverged)?;
            opt.step(detector.params_mut(), lr).map_err(|_| Error::Diverged { step })?;
            let record = LossRecord {
                step,
                loss: sg.breakdown,
            };
            on_step(&record);
            losses.push(record);
            step += 1;
        }
    }
    log::info!("trained {step} steps on {} images", source.len());
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            detector,
            step,
            rng: RngState::capture(&rng),
        },
        losses,
    })
}
