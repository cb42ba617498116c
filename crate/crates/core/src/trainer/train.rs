use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, Counts};
use super::config::TrainConfig;
use super::model::{self, LossTerms, ModelGraphs, ParamIds, StepSamples, TrainTriple};
use crate::cau;
use crate::compute::{Matrix, ParameterStore, Scalar, Tape};
use crate::data::{Dataset, InteractionGraph, KnowledgeGraph};
use crate::error::{ComputeError, Error, Result};
use crate::eval::{self, MetricReport};

/// Stream offset separating sampling randomness from initialisation.
const SAMPLING_STREAM: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// Optimisation state for one model; generic so tests can run in f64.
pub struct Trainer<'a, T: Scalar> {
    pub config: TrainConfig,
    pub graphs: ModelGraphs<'a>,
    pub params: ParameterStore<T>,
    pub ids: ParamIds,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    edges: Vec<(u32, u32)>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh Xavier-initialised tables seeded from `config.seed`.
    pub fn new(config: TrainConfig, train: &'a InteractionGraph, kg: &'a KnowledgeGraph) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model::init_params(train.n_users(), kg, config.dim, &mut init_rng);
        Self::with_params(config, train, kg, params)
    }

    pub fn with_params(
        config: TrainConfig,
        train: &'a InteractionGraph,
        kg: &'a KnowledgeGraph,
        params: ParameterStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let graphs = ModelGraphs::new(train, kg)?;
        let ids = ParamIds::of(&params)?;
        let expect = [
            (ids.users, train.n_users()),
            (ids.entities, kg.n_entities()),
            (ids.relations, kg.n_relations()),
        ];
        for (id, rows) in expect {
            if params.value(id).shape() != (rows, config.dim) {
                return Err(Error::Config(format!(
                    "table `{}` is {:?}, expected {rows}x{}",
                    params.name(id),
                    params.value(id).shape(),
                    config.dim
                )));
            }
        }
        let edges = (0..train.n_users())
            .flat_map(|u| train.items_of(u).iter().map(move |&i| (u as u32, i)))
            .collect();
        Ok(Trainer {
            adam: Adam::new(config.learning_rate, &params),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLING_STREAM),
            config,
            graphs,
            params,
            ids,
            edges,
        })
    }

    /// Negatives and regulariser samples for a slice of `(user, item)` edges.
    pub fn sample(&mut self, positives: &[(u32, u32)]) -> Result<(Vec<TrainTriple>, StepSamples), ComputeError> {
        let batch = positives
            .iter()
            .map(|&(u, i)| {
                Ok(TrainTriple {
                    user: u,
                    pos: i,
                    neg: model::sample_negative(self.graphs.train, u as usize, &mut self.rng)?,
                })
            })
            .collect::<Result<Vec<_>, ComputeError>>()?;
        let mut samples = StepSamples::default();
        let (l_align, l_uniform) = self.config.effective_cau();
        if l_align > 0.0 {
            let anchors: Vec<u32> = batch.iter().map(|t| t.pos).collect();
            let count = match self.config.align_pairs {
                0 => batch.len(),
                n => n,
            };
            samples.pairs = cau::sample_overlap_pairs(self.graphs.kg, &anchors, count, &mut self.rng);
        }
        if l_uniform > 0.0 {
            let mut distinct: Vec<u32> = batch.iter().map(|t| t.pos).collect();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() > self.config.uniform_sample {
                distinct = distinct
                    .choose_multiple(&mut self.rng, self.config.uniform_sample)
                    .copied()
                    .collect();
                distinct.sort_unstable();
            }
            samples.uniform_items = distinct;
        }
        Ok((batch, samples))
    }

    /// Loss and accumulated gradients for one batch, without updating.
    pub fn loss_and_grads(
        &mut self,
        batch: &[TrainTriple],
        samples: &StepSamples,
    ) -> Result<LossTerms, ComputeError> {
        let mut tape = Tape::new();
        let fwd = model::forward(&mut tape, &self.params, self.ids, &self.graphs, &self.config)?;
        let (loss, terms) = model::total_loss_on(&mut tape, &fwd, batch, samples, &self.config)?;
        self.params.zero_grads();
        tape.backward(loss, &mut self.params)?;
        Ok(terms)
    }

    /// One optimiser step. Parameters are left untouched when the loss or
    /// any gradient is non-finite.
    pub fn step(&mut self, batch: &[TrainTriple], samples: &StepSamples) -> Result<LossTerms, ComputeError> {
        let terms = self.loss_and_grads(batch, samples)?;
        if !terms.total.is_finite() {
            return Err(ComputeError::NonFinite { op: "loss" });
        }
        if self.params.ids().any(|id| !self.params.grad(id).is_finite()) {
            return Err(ComputeError::NonFinite { op: "gradient" });
        }
        self.adam.step(&mut self.params);
        Ok(terms)
    }

    /// One pass over the shuffled training edges; returns per-batch mean terms.
    pub fn epoch(&mut self) -> Result<LossTerms, ComputeError> {
        let mut edges = std::mem::take(&mut self.edges);
        edges.shuffle(&mut self.rng);
        let mut sum = LossTerms::default();
        let mut batches = 0usize;
        let result = (|| {
            for chunk in edges.chunks(self.config.batch_size) {
                let (batch, samples) = self.sample(chunk)?;
                sum.add(&self.step(&batch, &samples)?);
                batches += 1;
            }
            Ok(())
        })();
        self.edges = edges;
        result?;
        let n = batches.max(1) as f64;
        Ok(LossTerms {
            bpr: sum.bpr / n,
            align: sum.align / n,
            uniform: sum.uniform / n,
            reg: sum.reg / n,
            total: sum.total / n,
        })
    }

    /// Final user and item representations.
    pub fn embeddings(&self) -> Result<(Matrix<T>, Matrix<T>), ComputeError> {
        embeddings(&self.params, self.ids, &self.graphs, &self.config)
    }
}

fn embeddings<T: Scalar>(
    params: &ParameterStore<T>,
    ids: ParamIds,
    graphs: &ModelGraphs<'_>,
    config: &TrainConfig,
) -> Result<(Matrix<T>, Matrix<T>), ComputeError> {
    let mut tape = Tape::new();
    let fwd = model::forward(&mut tape, params, ids, graphs, config)?;
    Ok((tape.value(fwd.users).clone(), tape.value(fwd.items).clone()))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossTerms,
    pub valid_recall: Option<f64>,
    pub valid_ndcg: Option<f64>,
    pub seconds: f64,
}

pub fn log_csv(log: &[EpochLog], valid_k: usize) -> String {
    let mut out = format!(
        "epoch,loss,bpr,align,uniform,reg,valid_recall@{valid_k},valid_ndcg@{valid_k},seconds\n"
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            e.epoch,
            e.loss.total,
            e.loss.bpr,
            e.loss.align,
            e.loss.uniform,
            e.loss.reg,
            opt(e.valid_recall),
            opt(e.valid_ndcg),
            e.seconds
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation recall (or the last one when the
    /// dataset has no validation items).
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss; the checkpoint is
    /// then the last good one.
    pub diverged: Option<(usize, ComputeError)>,
    pub stopped_early: bool,
}

fn counts(dataset: &Dataset) -> Counts {
    Counts {
        users: dataset.n_users(),
        items: dataset.n_items(),
        entities: dataset.kg.n_entities(),
        relations: dataset.kg.n_relations(),
    }
}

fn validate<T: Scalar>(trainer: &Trainer<'_, T>, dataset: &Dataset) -> Result<MetricReport> {
    let (users, items) = trainer.embeddings()?;
    eval::evaluate_embeddings(
        &users,
        &items,
        &dataset.train,
        &dataset.split.valid,
        &dataset.kg,
        &[trainer.config.valid_k],
    )
}

/// Trains with early stopping on validation recall at `valid_k`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<f32>::new(config.clone(), &dataset.train, &dataset.kg)?;
    let has_valid = dataset.split.valid.iter().any(|v| !v.is_empty());
    if !has_valid {
        warn!("no validation items; training runs for max_epochs without early stopping");
    }
    let snapshot = |trainer: &Trainer<'_, f32>, epoch: usize, metric: f64| Checkpoint {
        config: config.clone(),
        counts: counts(dataset),
        epoch,
        best_metric: metric,
        params: trainer.params.cast(),
    };
    let initial = if has_valid {
        validate(&trainer, dataset)?.mean[0].recall
    } else {
        0.0
    };
    let mut best = snapshot(&trainer, 0, initial);
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let mut diverged = None;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let loss = match trainer.epoch() {
            Ok(l) => l,
            Err(e) if e.is_non_finite() => {
                warn!("epoch {epoch}: {e}; keeping checkpoint from epoch {}", best.epoch);
                diverged = Some((epoch, e));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let (recall, ndcg) = if has_valid {
            let report = validate(&trainer, dataset)?;
            (Some(report.mean[0].recall), Some(report.mean[0].ndcg))
        } else {
            (None, None)
        };
        let seconds = start.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: loss {:.5} (bpr {:.5} align {:.5} uniform {:.5} reg {:.5}) valid recall@{} {} in {seconds:.2}s",
            loss.total,
            loss.bpr,
            loss.align,
            loss.uniform,
            loss.reg,
            config.valid_k,
            recall.map_or("-".into(), |r| format!("{r:.5}")),
        );
        log.push(EpochLog {
            epoch,
            loss,
            valid_recall: recall,
            valid_ndcg: ndcg,
            seconds,
        });
        match recall {
            Some(r) if r > best.best_metric || best.epoch == 0 && r >= best.best_metric => {
                best = snapshot(&trainer, epoch, r);
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= config.patience {
                    info!("early stop at epoch {epoch}; best epoch {}", best.epoch);
                    stopped_early = true;
                    break;
                }
            }
            None => best = snapshot(&trainer, epoch, 0.0),
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        diverged,
        stopped_early,
    })
}

/// Final representations stored in a checkpoint, checked against `dataset`.
pub fn checkpoint_embeddings(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
) -> Result<(Matrix<f32>, Matrix<f32>)> {
    if checkpoint.counts != counts(dataset) {
        return Err(Error::Checkpoint(format!(
            "checkpoint sizes {:?} do not match dataset {:?}",
            checkpoint.counts,
            counts(dataset)
        )));
    }
    let graphs = ModelGraphs::new(&dataset.train, &dataset.kg)?;
    let ids = ParamIds::of(&checkpoint.params)?;
    Ok(embeddings(&checkpoint.params, ids, &graphs, &checkpoint.config)?)
}

/// Metrics of a checkpoint against `targets` (test or validation lists).
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    targets: &[Vec<u32>],
    ks: &[usize],
) -> Result<MetricReport> {
    let (users, items) = checkpoint_embeddings(checkpoint, dataset)?;
    eval::evaluate_embeddings(&users, &items, &dataset.train, targets, &dataset.kg, ks)
}
