//! Training runs over a corpus, periodic evaluation and the files they leave behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dape_core::checkpoint;
use dape_core::loss::contrastive_loss_value;
use dape_core::model::{Batch, ImageInput, TextInput};
use dape_core::{train_step, CostReport, DapeModel, Module, StepReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};
use crate::runcfg::{ensure_dir, write_file, RunConfig};

pub const METRICS_CSV: &str = "metrics.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const CONFIG_ECHO: &str = "config.json";

const SHUFFLE_SALT: u64 = 0x5348_5546_4c45;

/// One evaluation point. MAC columns are per (image, text) pair over the eval score matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_hash: String,
    pub step: usize,
    /// Mean contrastive loss over the fixed training probe batches.
    pub loss: f64,
    pub eval_loss: f64,
    /// Held-out retrieval, mean of image→text and text→image.
    pub r1: f64,
    pub r5: f64,
    pub temperature: f64,
    pub macs_coarse: f64,
    pub macs_cwa: f64,
    pub macs_nfa: f64,
    pub macs_phi: f64,
    pub macs_head: f64,
    pub macs_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: usize,
    /// Seconds spent in training steps so far, evaluation excluded.
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub batch_loss: f64,
    pub grad_norm: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub eval_loss: f64,
    pub r1: f64,
    pub r5: f64,
    pub cost: CostReport,
    pub pairs: usize,
}

/// Fraction of queries whose match ranks in the top `k`, averaged over both directions.
/// Ties count against the query.
pub fn recall_at(scores: &Tensor<f64>, k: usize) -> f64 {
    let n = scores.rows();
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 0..n {
        let own = scores.get2(i, i);
        let row_rank = (0..n).filter(|&j| j != i && scores.get2(i, j) >= own).count();
        let col_rank = (0..n).filter(|&j| j != i && scores.get2(j, i) >= own).count();
        hits += usize::from(row_rank < k) + usize::from(col_rank < k);
    }
    hits as f64 / (2 * n) as f64
}

/// Precomputed model inputs for every scene of a corpus.
pub struct Inputs {
    pub images: Vec<ImageInput<f64>>,
    pub texts: Vec<TextInput<f64>>,
}

impl Inputs {
    pub fn new(corpus: &Corpus, cutoff_frac: f64) -> Result<Self> {
        let all: Vec<usize> = (0..corpus.len()).collect();
        Ok(Inputs { images: corpus.image_inputs(&all, cutoff_frac)?, texts: corpus.text_inputs(&all) })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<f64>> {
        let images = idx.iter().map(|&i| self.images[i].clone()).collect();
        let texts = idx.iter().map(|&i| self.texts[i].clone()).collect();
        Ok(Batch::new(images, texts)?)
    }

    pub fn scores(&self, model: &DapeModel<f64>, idx: &[usize]) -> Result<(Tensor<f64>, CostReport)> {
        let images: Vec<_> = idx.iter().map(|&i| self.images[i].clone()).collect();
        let texts: Vec<_> = idx.iter().map(|&i| self.texts[i].clone()).collect();
        Ok(model.score_matrix(&images, &texts)?)
    }
}

/// Training indices cut into consecutive batches of `b`, remainder dropped.
pub fn probe_batches(train: &[usize], b: usize) -> Vec<Vec<usize>> {
    train.chunks_exact(b).map(<[usize]>::to_vec).collect()
}

pub fn evaluate(model: &DapeModel<f64>, corpus: &Corpus, inputs: &Inputs) -> Result<Evaluation> {
    let b = model.config.batch_size;
    let probes = probe_batches(&corpus.manifest.train, b);
    if probes.is_empty() {
        return Err(HarnessError::Usage(format!("{} training scenes cannot fill a batch of {b}", corpus.manifest.train.len())));
    }
    let mut loss = 0.0;
    for p in &probes {
        loss += contrastive_loss_value(&inputs.scores(model, p)?.0, model.temperature)?;
    }
    let eval = &corpus.manifest.eval;
    if eval.len() < 2 {
        return Err(HarnessError::Usage("retrieval needs at least 2 held-out scenes".into()));
    }
    let (scores, cost) = inputs.scores(model, eval)?;
    Ok(Evaluation {
        loss: loss / probes.len() as f64,
        eval_loss: contrastive_loss_value(&scores, model.temperature)?,
        r1: recall_at(&scores, 1),
        r5: recall_at(&scores, 5),
        cost,
        pairs: eval.len() * eval.len(),
    })
}

fn row(cfg: &RunConfig, step: usize, model: &DapeModel<f64>, e: &Evaluation) -> MetricsRow {
    let per = |m: u64| m as f64 / e.pairs as f64;
    MetricsRow {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        step,
        loss: e.loss,
        eval_loss: e.eval_loss,
        r1: e.r1,
        r5: e.r5,
        temperature: model.temperature,
        macs_coarse: per(e.cost.macs(Module::Coarse)),
        macs_cwa: per(e.cost.macs(Module::Cwa)),
        macs_nfa: per(e.cost.macs(Module::Nfa)),
        macs_phi: per(e.cost.macs(Module::Phi)),
        macs_head: per(e.cost.macs(Module::Head)),
        macs_total: per(e.cost.total_macs),
    }
}

/// Reshuffles the training set each epoch and deals out full batches.
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    b: usize,
}

impl BatchSchedule {
    pub fn new(train: &[usize], b: usize, seed: u64) -> Result<Self> {
        if b < 2 || b > train.len() {
            return Err(HarnessError::Usage(format!("batch size {b} does not fit {} training scenes", train.len())));
        }
        Ok(BatchSchedule { rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT), pool: train.to_vec(), order: Vec::new(), cursor: 0, b })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.b > self.order.len() {
            self.order = self.pool.clone();
            for k in (1..self.order.len()).rev() {
                let j = self.rng.gen_range(0..=k as u32) as usize;
                self.order.swap(k, j);
            }
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.b].to_vec();
        self.cursor += self.b;
        out
    }
}

pub struct TrainOutcome {
    pub model: DapeModel<f64>,
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRow>,
    pub timing: Vec<TimingRow>,
}

impl TrainOutcome {
    pub fn steps_per_sec(&self) -> f64 {
        match self.timing.last() {
            Some(t) if t.step > 0 && t.train_seconds > 0.0 => t.step as f64 / t.train_seconds,
            _ => 0.0,
        }
    }

    pub fn first(&self) -> &MetricsRow {
        &self.metrics[0]
    }

    pub fn last(&self) -> &MetricsRow {
        self.metrics.last().expect("step 0 is always evaluated")
    }
}

/// Train from the seeded initialisation; `on_row` sees every metrics row as it is produced.
pub fn run_training(cfg: &RunConfig, corpus: &Corpus, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    corpus.check_model(&cfg.model)?;
    let mut model = DapeModel::<f64>::new(cfg.model.clone())?;
    let inputs = Inputs::new(corpus, cfg.model.cutoff_frac)?;
    let mut schedule = BatchSchedule::new(&corpus.manifest.train, cfg.model.batch_size, cfg.model.seed)?;
    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    let mut timing = vec![TimingRow { step: 0, train_seconds: 0.0 }];
    let first = row(cfg, 0, &model, &evaluate(&model, corpus, &inputs)?);
    on_row(&first);
    metrics.push(first);
    let mut elapsed = 0.0;
    for step in 1..=cfg.train.steps {
        let batch = inputs.batch(&schedule.next_batch())?;
        let t0 = Instant::now();
        let StepReport { loss, grad_norm, temperature } = train_step(&mut model, &batch)?;
        elapsed += t0.elapsed().as_secs_f64();
        steps.push(StepRow { step, batch_loss: loss, grad_norm, temperature });
        timing.push(TimingRow { step, train_seconds: elapsed });
        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let r = row(cfg, step, &model, &evaluate(&model, corpus, &inputs)?);
            on_row(&r);
            metrics.push(r);
        }
    }
    Ok(TrainOutcome { model, metrics, steps, timing })
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Check(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| HarnessError::Check(format!("csv: {e}")))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::format(path, format!("{other:?}")),
    })?;
    r.deserialize().map(|x| x.map_err(|e| HarnessError::format(path, e))).collect()
}

/// Write the outcome into `dir`: config echo, metrics, per-step log, timing and checkpoint.
pub fn write_outcome(cfg: &RunConfig, out: &TrainOutcome, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_file(&dir.join(CONFIG_ECHO), cfg.to_json())?;
    write_file(&dir.join(METRICS_CSV), csv_bytes(&out.metrics)?)?;
    write_file(&dir.join(STEPS_CSV), csv_bytes(&out.steps)?)?;
    write_file(&dir.join(TIMING_CSV), csv_bytes(&out.timing)?)?;
    let ck = dir.join(CHECKPOINT);
    write_file(&ck, checkpoint::to_bytes(&out.model)?)
}

/// `dape train`: everything lands in `root/<run id>`.
pub fn cmd_train(cfg: &RunConfig, root: &Path, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<(TrainOutcome, PathBuf)> {
    let dir = root.join(cfg.run_id());
    ensure_dir(&dir)?;
    let corpus = cfg.materialize_corpus(&dir)?;
    let out = run_training(cfg, &corpus, on_row)?;
    write_outcome(cfg, &out, &dir)?;
    Ok((out, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_counts_both_directions() {
        let s = Tensor::<f64>::from_f64(&[3, 3], &[0.9, 0.1, 0.0, 0.2, 0.1, 0.5, 0.0, 0.0, 0.8]).unwrap();
        // rows: 0 hit, 1 miss, 2 hit; columns: 0 hit, 1 miss (0.1 ties 0.1), 2 hit
        assert!((recall_at(&s, 1) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(recall_at(&s, 3), 1.0);
        assert_eq!(recall_at(&Tensor::<f64>::zeros(&[4, 4]), 1), 0.0);
    }

    #[test]
    fn schedule_covers_each_epoch_without_repeats() {
        let train: Vec<usize> = (10..27).collect();
        let mut s = BatchSchedule::new(&train, 4, 3).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
        let mut again = BatchSchedule::new(&train, 4, 3).unwrap();
        let mut s = BatchSchedule::new(&train, 4, 3).unwrap();
        for _ in 0..9 {
            assert_eq!(s.next_batch(), again.next_batch());
        }
        assert!(BatchSchedule::new(&train, 18, 0).is_err());
        assert_eq!(probe_batches(&train, 4).len(), 4);
    }
}
