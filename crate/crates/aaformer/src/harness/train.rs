//! Training loop: PK-sampled batches, Adam with warmup + step decay,
//! metric logging, checkpointing, and bit-reproducible resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::LayerTrace;
use crate::loss::{loss_total, ClassifierBank};
use crate::model::{forward, init_parameters, ModelParams};
use crate::tensor::{backward, ParameterStore, Tensor};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, VERSION};
use super::config::RunConfig;
use super::data::{Split, SyntheticDataset};
use super::maps::export_maps;
use super::optim::{lr_at, Adam};
use super::HarnessError;

/// Per-step log record; these are the columns of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_tri: f64,
}

/// Live training state. Construct fresh from a config + seed or resume from
/// a checkpoint; both paths produce the same trajectory for the same seed.
pub struct TrainRun {
    pub run: RunConfig,
    pub seed: u64,
    pub store: ParameterStore,
    pub params: ModelParams,
    pub bank: ClassifierBank,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub dataset: SyntheticDataset,
    pub step: u64,
    /// Alignment traces of the first image of the most recent batch, kept for
    /// the non-finite-loss diagnostic dump.
    pub last_traces: Option<Vec<LayerTrace>>,
}

fn choose_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

impl TrainRun {
    pub fn new(run: RunConfig, seed: u64) -> Result<Self, HarnessError> {
        run.validate()?;
        let dataset = SyntheticDataset::generate(&run.model, &run.data, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = init_parameters(&run.model, &mut rng)?;
        let bank = ClassifierBank::init(
            &mut store,
            run.model.num_parts() + 1,
            run.model.embed_dim,
            run.data.num_identities,
            &mut rng,
        )?;
        let params = ModelParams::from_store(&store, &run.model)?;
        let adam = Adam::new(run.train.beta1, run.train.beta2, run.train.adam_eps);
        Ok(Self {
            run,
            seed,
            store,
            params,
            bank,
            adam,
            rng,
            dataset,
            step: 0,
            last_traces: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, HarnessError> {
        ck.run.validate()?;
        let dataset = SyntheticDataset::generate(&ck.run.model, &ck.run.data, ck.seed)?;
        let mut store = ParameterStore::new();
        for (name, shape, values) in &ck.tensors {
            store.insert(name.clone(), Tensor::parameter(shape, values.clone())?)?;
        }
        let params = ModelParams::from_store(&store, &ck.run.model)?;
        let bank = ClassifierBank::from_store(&store, ck.run.model.num_parts() + 1)?;
        let mut adam = Adam::new(ck.run.train.beta1, ck.run.train.beta2, ck.run.train.adam_eps);
        adam.import_state(ck.adam);
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_word_pos(ck.rng.word_pos);
        Ok(Self {
            run: ck.run,
            seed: ck.seed,
            store,
            params,
            bank,
            adam,
            rng,
            dataset,
            step: ck.step,
            last_traces: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: VERSION,
            run: self.run.clone(),
            seed: self.seed,
            step: self.step,
            epoch: self.step / self.steps_per_epoch() as u64,
            tensors: self
                .store
                .iter()
                .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.to_vec()))
                .collect(),
            adam: self.adam.export_state(),
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        let total_images = self.run.data.num_identities * self.run.data.train_per_identity;
        let batch = self.run.train.pk_identities * self.run.train.pk_images;
        (total_images / batch).max(1)
    }

    pub fn total_steps(&self) -> u64 {
        match self.run.train.max_steps {
            Some(s) => s as u64,
            None => (self.run.train.epochs * self.steps_per_epoch()) as u64,
        }
    }

    /// One PK batch: `pk_identities` distinct identities, `pk_images`
    /// distinct training images each.
    fn sample_batch(&mut self) -> Vec<(usize, usize)> {
        let ids = choose_distinct(
            &mut self.rng,
            self.run.data.num_identities,
            self.run.train.pk_identities,
        );
        let mut batch = Vec::with_capacity(ids.len() * self.run.train.pk_images);
        for id in ids {
            for idx in choose_distinct(
                &mut self.rng,
                self.run.data.train_per_identity,
                self.run.train.pk_images,
            ) {
                batch.push((id, idx));
            }
        }
        batch
    }

    /// One optimizer step: sample, forward, loss, backward, Adam update.
    pub fn step_once(&mut self) -> Result<StepMetrics, HarnessError> {
        let lr = lr_at(
            &self.run.train,
            self.step as f64 / self.steps_per_epoch() as f64,
        );
        let batch = self.sample_batch();
        let images: Vec<Tensor> = batch
            .iter()
            .map(|&(id, idx)| self.dataset.image(id, Split::Train, idx))
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&(id, _)| id).collect();

        let mut outputs = forward(&images, &self.params, &self.run.model, self.run.train.assignment)?;
        let breakdown = loss_total(
            &outputs,
            &labels,
            &self.bank,
            self.run.model.label_smoothing,
            self.run.model.triplet_margin,
        )?;
        let total = breakdown.total.item()?;
        self.last_traces = Some(std::mem::take(&mut outputs[0].traces));
        if !total.is_finite() {
            return Err(HarnessError::NonFiniteLoss { step: self.step });
        }

        self.store.zero_grads();
        backward(&breakdown.total, &self.store)?;
        self.adam.step(&self.store, lr);
        let metrics = StepMetrics {
            step: self.step,
            lr,
            loss_total: total,
            loss_cls: breakdown.cls.item()?,
            loss_tri: breakdown.triplet.item()?,
        };
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

fn write_nan_dump(
    run: &TrainRun,
    out_dir: &Path,
    step: u64,
) -> Result<Option<PathBuf>, HarnessError> {
    let Some(traces) = &run.last_traces else { return Ok(None) };
    let dump_dir = out_dir.join(format!("nan_dump_step{step:06}"));
    let grid = (run.run.model.grid_h(), run.run.model.grid_w());
    for (layer, trace) in traces.iter().enumerate() {
        for head in 0..run.run.model.heads {
            export_maps(trace, layer, head, grid, &dump_dir)?;
        }
    }
    Ok(Some(dump_dir))
}

/// Drive a run to its configured step budget, streaming rows to
/// `metrics.csv` and checkpoints into `out_dir`. A non-finite loss aborts
/// after dumping the last recorded alignment traces.
pub fn run_training(
    mut run: TrainRun,
    out_dir: &Path,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.csv"))?);
    writeln!(csv, "step,lr,loss_total,loss_cls,loss_tri")?;
    let mut metrics = Vec::new();
    let total = run.total_steps();
    while run.step < total {
        let step = run.step;
        let m = match run.step_once() {
            Ok(m) => m,
            Err(e) => {
                csv.flush()?;
                if let Some(dump) = write_nan_dump(&run, out_dir, step)? {
                    return Err(HarnessError::Aborted {
                        step,
                        dump: dump.display().to_string(),
                        source: Box::new(e),
                    });
                }
                return Err(e);
            }
        };
        writeln!(
            csv,
            "{},{},{},{},{}",
            m.step, m.lr, m.loss_total, m.loss_cls, m.loss_tri
        )?;
        progress(&m);
        metrics.push(m);
        let every = run.run.train.checkpoint_every;
        if every > 0 && run.step % every as u64 == 0 && run.step < total {
            save_checkpoint(&out_dir.join(format!("step{:06}.aafk", run.step)), &run.to_checkpoint())?;
        }
    }
    csv.flush()?;
    let final_path = out_dir.join("final.aafk");
    save_checkpoint(&final_path, &run.to_checkpoint())?;
    Ok(TrainOutcome { metrics, final_checkpoint: final_path })
}

/// Convenience for resuming from a file.
pub fn resume_from(path: &Path) -> Result<TrainRun, HarnessError> {
    TrainRun::from_checkpoint(load_checkpoint(path)?)
}
