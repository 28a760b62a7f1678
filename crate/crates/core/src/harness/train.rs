//! Minibatch SGD training and deterministic evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{argmax, fuse_addition, fuse_multiplication};
use crate::graph::Graph;
use crate::model::{Network, Prediction, SampleInput};
use crate::optim::{clip_grad_norm, cosine_value, LrSchedule, Sgd};
use crate::params::ParamStore;

use super::augment::{transform_pair, Transform};
use super::config::RunConfig;
use super::metrics::{MetricsLog, MetricsRow};
use super::store::read_dataset;
use super::synth::{generate_dataset, RgbdClip};

/// Keeps the training stream apart from the data-generation streams.
const TRAIN_SEED_SALT: u64 = 0x5DEE_CE66;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
}

/// Accuracies of each decision rule of a two-stream network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModes {
    pub rgb: f64,
    pub depth: f64,
    pub addition: f64,
    pub multiplication: f64,
    pub capf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub modes: Option<FusionModes>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn per_class(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect()
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<(Vec<RgbdClip>, Vec<RgbdClip>)> {
    let train = match &cfg.data {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(&cfg.synth_spec(false)?)?,
    };
    let eval = match &cfg.eval_data {
        Some(p) => read_dataset(p)?,
        None if cfg.eval_clips_per_class > 0 => generate_dataset(&cfg.synth_spec(true)?)?,
        None => Vec::new(),
    };
    Ok((train, eval))
}

/// Fresh network for `cfg`, optionally with weights from a checkpoint.
pub fn build_network(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<(Network, ParamStore)> {
    let (net, mut store) = Network::build(cfg.model_config()?, cfg.modality, cfg.seed)?;
    if let Some(p) = checkpoint_path {
        store.load_from(&checkpoint::load(p)?)?;
    }
    Ok((net, store))
}

fn check_labels(data: &[RgbdClip], classes: usize) -> Result<()> {
    match data.iter().find(|c| c.label >= classes) {
        Some(c) => Err(Error::Config(format!("label {} outside the model's {classes} classes", c.label))),
        None => Ok(()),
    }
}

fn prepare(net: &Network, cfg: &RunConfig, clip: &RgbdClip, tf: &Transform) -> Result<SampleInput> {
    let view = transform_pair(clip, &cfg.augment_config(), tf)?;
    net.prepare(Some(&view.rgb), Some(&view.depth))
}

/// Center-crop inference at the final sharpness.
pub fn evaluate(net: &Network, store: &ParamStore, cfg: &RunConfig, data: &[RgbdClip]) -> Result<Evaluation> {
    let classes = net.config().classes;
    check_labels(data, classes)?;
    let center = Transform::center(&cfg.augment_config());
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut predictions = Vec::with_capacity(data.len());
    let mut hits = [0usize; 5];
    for clip in data {
        let input = prepare(net, cfg, clip, &center)?;
        let mut g = Graph::new();
        let out = net.forward(&mut g, store, &input, cfg.tau_end, None, None)?;
        let pred = out.prediction;
        confusion[clip.label][pred.class()] += 1;
        if let Prediction::Multimodal { rgb, depth, capf } = &pred {
            let picks = [
                argmax(rgb),
                argmax(depth),
                fuse_addition(rgb, depth),
                fuse_multiplication(rgb, depth),
                crate::fusion::classify(rgb, depth, capf),
            ];
            for (h, p) in hits.iter_mut().zip(picks) {
                *h += usize::from(p == clip.label);
            }
        }
        predictions.push(pred);
    }
    let n = data.len().max(1) as f64;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let modes = matches!(net, Network::Multimodal(_)).then(|| FusionModes {
        rgb: hits[0] as f64 / n,
        depth: hits[1] as f64 / n,
        addition: hits[2] as f64 / n,
        multiplication: hits[3] as f64 / n,
        capf: hits[4] as f64 / n,
    });
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        confusion,
        modes,
        predictions,
    })
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: Network,
    pub store: ParamStore,
    pub train_set: Vec<RgbdClip>,
    pub eval_set: Vec<RgbdClip>,
    pub metrics: MetricsLog,
    opt: Sgd,
    schedule: LrSchedule,
    step: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (train, eval) = load_data(&config)?;
        Trainer::with_data(config, train, eval)
    }

    pub fn with_data(config: RunConfig, train_set: Vec<RgbdClip>, eval_set: Vec<RgbdClip>) -> Result<Self> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::Parameter("empty training set".into()));
        }
        let (net, store) = build_network(&config, None)?;
        check_labels(&train_set, net.config().classes)?;
        check_labels(&eval_set, net.config().classes)?;
        let steps_per_epoch = train_set.len().div_ceil(config.batch);
        let schedule = LrSchedule {
            base: config.lr,
            warmup_steps: config.warmup_epochs * steps_per_epoch,
            total_steps: config.epochs * steps_per_epoch,
        };
        let opt = Sgd::new(&store, config.lr as f32, config.momentum as f32, config.weight_decay as f32)?;
        Ok(Trainer {
            config,
            net,
            store,
            train_set,
            eval_set,
            metrics: MetricsLog::default(),
            opt,
            schedule,
            step: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule
    }

    fn tau(&self) -> Result<f64> {
        let total = self.schedule.total_steps.max(1);
        cosine_value(self.step.min(total), total, self.config.tau_start, self.config.tau_end)
    }

    pub fn train_epoch(&mut self) -> Result<EpochSummary> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_SEED_SALT);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut rng);
        let aug = cfg.augment_config();
        let (mut loss_sum, mut hits, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch) {
            let tau = self.tau()?;
            let lr = self.schedule.at(self.step + 1);
            let scale = 1.0 / batch.len() as f32;
            let mut term_sums: Vec<f64> = Vec::new();
            let mut names: Vec<String> = Vec::new();
            let (mut total, mut batch_hits) = (0.0, 0usize);
            for &i in batch {
                let clip = &self.train_set[i];
                let tf = if cfg.augment {
                    Transform::random(&aug, &mut rng)
                } else {
                    Transform::center(&aug)
                };
                let input = prepare(&self.net, cfg, clip, &tf)?;
                let mut g = Graph::new();
                let out = self.net.forward(&mut g, &self.store, &input, tau, Some(&mut rng), Some(clip.label))?;
                let (loss, report) = out.loss.ok_or_else(|| Error::Parameter("forward produced no loss".into()))?;
                if !report.total.is_finite() {
                    return Err(Error::Domain(format!("non-finite loss at step {}", self.step + 1)));
                }
                if names.is_empty() {
                    names = report.terms.iter().map(|t| t.name.clone()).collect();
                    term_sums = vec![0.0; names.len()];
                }
                for (s, t) in term_sums.iter_mut().zip(&report.terms) {
                    *s += t.value;
                }
                total += report.total;
                batch_hits += usize::from(out.prediction.class() == clip.label);
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?.accumulate_into(&mut self.store)?;
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut self.store, cfg.grad_clip as f32);
            }
            self.opt.lr = lr as f32;
            self.opt.step(&mut self.store);
            self.step += 1;
            steps += 1;
            let n = batch.len() as f64;
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            self.metrics.push(
                &name_refs,
                MetricsRow {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    tau,
                    terms: term_sums.iter().map(|s| s / n).collect(),
                    total: total / n,
                    train_acc: batch_hits as f64 / n,
                    eval_acc: None,
                },
            )?;
            loss_sum += total;
            hits += batch_hits;
            seen += batch.len();
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            mean_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
        };
        self.epoch += 1;
        Ok(summary)
    }

    pub fn evaluate(&self, data: &[RgbdClip]) -> Result<Evaluation> {
        evaluate(&self.net, &self.store, &self.config, data)
    }

    /// Held-out split when there is one, otherwise the training split.
    pub fn evaluate_default(&self) -> Result<Evaluation> {
        if self.eval_set.is_empty() {
            self.evaluate(&self.train_set)
        } else {
            self.evaluate(&self.eval_set)
        }
    }

    /// All configured epochs. Writes `config.txt`, `metrics.csv`,
    /// `best.ckpt` (best evaluation so far) and `last.ckpt` under `out`.
    pub fn run(&mut self, mut progress: impl FnMut(&EpochSummary, &Evaluation)) -> Result<Evaluation> {
        let out = self.config.out.clone();
        fs::create_dir_all(&out)?;
        fs::write(out.join("config.txt"), self.config.to_text())?;
        let mut best: Option<f64> = None;
        let mut last = None;
        while self.epoch < self.config.epochs {
            let summary = self.train_epoch()?;
            let eval = self.evaluate_default()?;
            self.metrics.set_eval(eval.accuracy);
            if best.is_none_or(|b| eval.accuracy > b) {
                best = Some(eval.accuracy);
                checkpoint::save(&out.join("best.ckpt"), &self.store)?;
            }
            progress(&summary, &eval);
            self.metrics.write(&out.join("metrics.csv"))?;
            last = Some(eval);
        }
        checkpoint::save(&out.join("last.ckpt"), &self.store)?;
        last.ok_or_else(|| Error::Parameter("no epochs to run".into()))
    }
}
