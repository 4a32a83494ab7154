use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::batchnorm::Mode;
use crate::degrade::{Degradation, Triplet};
use crate::error::{Error, Result};
use crate::gdu::{init_params, GduParams, StatsLog};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::loss::{objective_graph, ObjectiveWeights};
use crate::train::{OptState, TrainConfig, MAX_CONSECUTIVE_SKIPS};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub objective: f64,
    /// Mean squared error per element of each unrolled estimate.
    pub mse_steps: Vec<f64>,
    pub wallclock_s: f64,
    pub skipped: bool,
}

impl LogRow {
    pub fn csv_header(steps: usize) -> String {
        let mut cols = vec!["iter".to_string(), "objective".to_string()];
        cols.extend((1..=steps).map(|t| format!("mse_step{t}")));
        cols.push("wallclock_s".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.iter.to_string(), self.objective.to_string()];
        cols.extend(self.mse_steps.iter().map(f64::to_string));
        cols.push(format!("{:.3}", self.wallclock_s));
        cols.join(",")
    }
}

/// A mini-batch ready for the graph.
pub struct Batch<T> {
    pub truth: Tensor<T>,
    pub observed: Tensor<T>,
    pub ops: Arc<[Degradation]>,
}

/// Samples a batch: uniform picks with replacement, then an optional random
/// square crop shared by truth and observation.
pub fn sample_batch<T: Scalar>(
    data: &[Triplet],
    batch_size: usize,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut truth = Vec::with_capacity(batch_size);
    let mut observed = Vec::with_capacity(batch_size);
    let mut ops = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let t = &data[rng.gen_range(0..data.len())];
        let s = t.truth.shape();
        let (x, y) = match crop {
            Some(c) if c < s.h || c < s.w => {
                if c > s.h || c > s.w {
                    return Err(Error::invalid(format!(
                        "crop {c} exceeds a {}x{} training image",
                        s.h, s.w
                    )));
                }
                let top = rng.gen_range(0..=s.h - c);
                let left = rng.gen_range(0..=s.w - c);
                (t.truth.crop(top, left, c, c)?, t.observed.crop(top, left, c, c)?)
            }
            _ => (t.truth.clone(), t.observed.clone()),
        };
        truth.push(x.cast::<T>());
        observed.push(y.cast::<T>());
        ops.push(t.degradation.clone());
    }
    Ok(Batch {
        truth: Tensor::stack(&truth.iter().collect::<Vec<_>>())?,
        observed: Tensor::stack(&observed.iter().collect::<Vec<_>>())?,
        ops: Arc::from(ops),
    })
}

/// Owns parameters and optimizer state for the duration of training.
pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    data: &'a [Triplet],
    params: GduParams<T>,
    opt: OptState<T>,
    rng: ChaCha8Rng,
    iter: usize,
    skips_in_row: usize,
    started: Instant,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Starts from `init`, or from seeded random parameters.
    pub fn new(cfg: TrainConfig, data: &'a [Triplet], init: Option<GduParams<T>>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let params = match init {
            Some(p) => {
                if p.topology != cfg.topology || p.subnets != cfg.subnets {
                    return Err(Error::invalid("initial parameters do not match the configuration"));
                }
                p
            }
            None => init_params(cfg.topology, cfg.subnets, cfg.seed)?,
        };
        let opt = OptState::new(params.trainable());
        // decorrelate batch sampling from initialization
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
        Ok(Trainer {
            cfg,
            data,
            params,
            opt,
            rng,
            iter: 0,
            skips_in_row: 0,
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &GduParams<T> {
        &self.params
    }

    pub fn into_params(self) -> GduParams<T> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &OptState<T> {
        &self.opt
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.iterations
    }

    /// Unroll, objective, backward and Adam on one batch.
    pub fn step(&mut self) -> Result<LogRow> {
        let batch = sample_batch::<T>(self.data, self.cfg.batch_size, self.cfg.crop, &mut self.rng)?;
        self.iter += 1;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let y = g.constant(batch.observed);
        let mut stats = StatsLog::default();
        let outs =
            self.params
                .unroll_graph(&mut g, &vars, y, y, &batch.ops, self.cfg.steps, Mode::Train, &mut stats)?;
        let truth = Arc::new(batch.truth);
        let weights = ObjectiveWeights {
            kappa: &self.cfg.kappa,
            tau: self.cfg.tau,
        };
        let loss = objective_graph(&mut g, &truth, &outs, &weights)?;
        let objective = g.value(loss).data()[0].to_f64_lossy();
        let n = truth.len() as f64;
        let mse_steps = outs
            .iter()
            .map(|&o| {
                g.value(o)
                    .data()
                    .iter()
                    .zip(truth.data())
                    .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
                    .sum::<f64>()
                    / n
            })
            .collect();

        let mut applied = false;
        if objective.is_finite() {
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .trainable()
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            drop(g);
            applied = self
                .opt
                .update(self.params.trainable_mut(), &grads, self.cfg.learning_rate)?;
        }
        if applied {
            self.params.absorb_stats(&stats);
            self.skips_in_row = 0;
        } else {
            self.skips_in_row += 1;
            log::warn!(
                "iteration {}: non-finite objective or gradient, batch skipped",
                self.iter
            );
            if self.skips_in_row > MAX_CONSECUTIVE_SKIPS {
                return Err(Error::NonFinite(format!(
                    "{} consecutive batches skipped at iteration {}",
                    self.skips_in_row, self.iter
                )));
            }
        }
        Ok(LogRow {
            iter: self.iter,
            objective,
            mse_steps,
            wallclock_s: self.started.elapsed().as_secs_f64(),
            skipped: !applied,
        })
    }

    /// Runs the remaining iterations. `on_row` sees every log row with the
    /// parameters after that iteration.
    pub fn run(&mut self, mut on_row: impl FnMut(&LogRow, &GduParams<T>) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let row = self.step()?;
            on_row(&row, &self.params)?;
        }
        Ok(())
    }
}

/// Trains to completion and returns the parameters with the full log.
pub fn train_loop<T: Scalar>(data: &[Triplet], cfg: &TrainConfig) -> Result<(GduParams<T>, Vec<LogRow>)> {
    let mut trainer = Trainer::<T>::new(cfg.clone(), data, None)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    trainer.run(|row, _| {
        rows.push(row.clone());
        Ok(())
    })?;
    Ok((trainer.into_params(), rows))
}

pub fn write_log(out: &mut impl Write, steps: usize, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(out, "{}", LogRow::csv_header(steps))?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}
