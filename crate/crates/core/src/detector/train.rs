//! Optimizer steps, epochs, metrics log and checkpoints.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use ef_tensor::optim::{AdamW, AdamWConfig};
use ef_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Progress};
use super::model::{Detector, LevelOutput};
use super::objective::{detection_objective, match_batch};
use super::schedule::PlateauSchedule;
use crate::boxes::BBox;
use crate::config::{Settings, TrainConfig};
use crate::data::{crop_resize, hflip, resize, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite.ckpt";

pub fn optimizer_for(detector: &Detector, cfg: &TrainConfig) -> AdamW {
    AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &detector.params,
    )
}

/// One forward/backward pass and optimizer update on a batch of
/// same-sized images.
pub fn train_step(
    detector: &mut Detector,
    opt: &mut AdamW,
    images: &Tensor,
    gts: &[Vec<BBox>],
    lr: f64,
) -> Result<LossReport> {
    let [n, _, h, w] = images.shape();
    if n != gts.len() {
        return Err(Error::Structure(format!("{n} images but {} target lists", gts.len())));
    }
    let anchors = detector.anchors(h, w)?;
    let matches = match_batch(&anchors, gts, &detector.config().anchors)?;
    let grads = {
        let mut tape = Tape::new(&detector.params);
        let x = tape.input(images.clone());
        let vars = detector.forward(&mut tape, x)?;
        let outputs: Vec<LevelOutput> = vars
            .iter()
            .map(|v| LevelOutput {
                level: v.level,
                cls: tape.value(v.cls).clone(),
                reg: tape.value(v.reg).clone(),
            })
            .collect();
        let obj = detection_objective(&outputs, &anchors, &matches, &detector.config().loss)?;
        let mut seeds = Vec::with_capacity(2 * vars.len());
        for (v, (gc, gr)) in vars.iter().zip(obj.cls_grads.into_iter().zip(obj.reg_grads)) {
            seeds.push((v.cls, gc));
            seeds.push((v.reg, gr));
        }
        let grads = tape.backward(seeds);
        if !grads.all_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        (grads, obj.report)
    };
    opt.step(&mut detector.params, &grads.0, lr);
    Ok(grads.1)
}

/// Per-epoch row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub best_loss: f64,
}

/// Drives epochs of shuffled, augmented batches.
pub struct Trainer {
    pub settings: Settings,
    pub schedule: PlateauSchedule,
    opt: AdamW,
    rng: ChaCha8Rng,
    steps: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(detector: &Detector, settings: &Settings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            settings: settings.clone(),
            schedule: PlateauSchedule::from_config(&settings.train),
            opt: optimizer_for(detector, &settings.train),
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
            steps: 0,
            epoch: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn augment(&mut self, s: &Sample) -> Sample {
        let cfg = &self.settings.train;
        let size = cfg.image_size;
        let mut out = if cfg.crop {
            crop_resize(s, size, &mut self.rng)
        } else if s.height() != size || s.width() != size {
            resize(s, size)
        } else {
            s.clone()
        };
        if cfg.flip && self.rng.random::<bool>() {
            out = hflip(&out);
        }
        out
    }

    /// Augments `batch`, stacks it and takes one step at the current lr.
    pub fn step(&mut self, detector: &mut Detector, batch: &[&Sample]) -> Result<LossReport> {
        let prepared: Vec<Sample> = batch.iter().map(|s| self.augment(s)).collect();
        let images = Tensor::stack(&prepared.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let gts: Vec<Vec<BBox>> = prepared.into_iter().map(|s| s.gt).collect();
        let report = train_step(detector, &mut self.opt, &images, &gts, self.schedule.lr())?;
        self.steps += 1;
        Ok(report)
    }

    /// Runs `settings.train.epochs` epochs (or until `max_steps`). With an
    /// output directory, appends to `metrics.csv` and keeps `best.ckpt` and
    /// `last.ckpt` current; a non-finite loss dumps `nonfinite.ckpt`.
    pub fn fit(&mut self, detector: &mut Detector, data: &Dataset, out_dir: Option<&Path>) -> Result<FitReport> {
        if data.is_empty() {
            return Err(Error::Config(vec!["training set is empty".into()]));
        }
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir)?),
            None => None,
        };
        let mut report = FitReport {
            best_loss: f64::INFINITY,
            ..FitReport::default()
        };
        let cfg = self.settings.train.clone();
        let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
        for _ in 0..cfg.epochs {
            if self.steps >= max_steps {
                break;
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, self.rng.random_range(0..=i));
            }
            let lr = self.schedule.lr();
            let (mut cls, mut reg, mut tot, mut n) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                if self.steps >= max_steps {
                    break;
                }
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
                let r = match self.step(detector, &batch) {
                    Ok(r) => r,
                    Err(e @ Error::NonFinite(_)) => {
                        if let Some(dir) = out_dir {
                            let dump = dir.join(NONFINITE_DUMP);
                            save_checkpoint(&dump, &self.settings, detector, self.progress())?;
                            log::error!("{e}; model state written to {}", dump.display());
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                cls += r.cls_loss;
                reg += r.reg_loss;
                tot += r.total;
                n += 1;
                report.step_losses.push(r.total);
            }
            if n == 0 {
                break;
            }
            self.epoch += 1;
            let m = EpochMetrics {
                epoch: self.epoch,
                cls_loss: cls / n as f64,
                reg_loss: reg / n as f64,
                total: tot / n as f64,
                lr,
            };
            log::info!(
                "epoch {} steps {} loss {:.5} (cls {:.5}, reg {:.5}) lr {:e}",
                m.epoch,
                self.steps,
                m.total,
                m.cls_loss,
                m.reg_loss,
                m.lr
            );
            self.schedule.step(m.total);
            if let (Some(dir), Some(log)) = (out_dir, log.as_mut()) {
                log.append(&m)?;
                if m.total < report.best_loss {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &self.settings, detector, self.progress())?;
                }
                save_checkpoint(&dir.join(LAST_CHECKPOINT), &self.settings, detector, self.progress())?;
            }
            report.best_loss = report.best_loss.min(m.total);
            report.epochs.push(m);
        }
        report.steps = self.steps;
        Ok(report)
    }

    fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch as u64,
            step: self.steps as u64,
            lr: self.schedule.lr(),
        }
    }
}

/// Append-only CSV of [`EpochMetrics`].
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(METRICS_FILE);
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(["epoch", "cls_loss", "reg_loss", "total", "lr"])?;
            writer.flush()?;
        }
        Ok(Self { path, writer })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        self.writer.write_record([
            m.epoch.to_string(),
            format!("{:?}", m.cls_loss),
            format!("{:?}", m.reg_loss),
            format!("{:?}", m.total),
            format!("{:?}", m.lr),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}
