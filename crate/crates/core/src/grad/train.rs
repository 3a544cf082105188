use super::{adam_step, AdamMoments, AdamParams, Tape};
use crate::error::{Error, Result};
use crate::filters::{record_filters, write_checkpoint, FilterBank};
use crate::shells::{record_pipeline, write_text, PreparedShape, Schedule, ShellConfig};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub adam: AdamParams,
    pub epochs: usize,
    /// Ordered pairs whose gradients are averaged per optimizer step.
    pub pairs_per_step: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub shell: ShellConfig,
    /// Writes `checkpoint_<step>.dshl` into `output_dir` every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Receives `loss.csv`, checkpoints and `final.dshl`.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            adam: AdamParams::default(),
            epochs: 1,
            pairs_per_step: 1,
            seed: 0,
            schedule: Schedule::training(),
            shell: ShellConfig::default(),
            checkpoint_every: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub pair: (usize, usize),
    pub loss: f64,
    pub data_term: f64,
    pub entropy_term: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub bank: FilterBank,
    pub records: Vec<LossRecord>,
    pub steps: usize,
}

/// Matching loss of one ordered pair and its gradient in the filter weights.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub loss: f64,
    pub data_term: f64,
    pub entropy_term: f64,
    /// Empty when `loss` is not finite.
    pub weights: DMatrix<f64>,
}

/// Loss and `∂loss/∂Γ` for one ordered pair.
pub fn pair_gradient(
    x: &PreparedShape,
    y: &PreparedShape,
    bank: &FilterBank,
    schedule: &Schedule,
    cfg: &ShellConfig,
) -> Result<PairGradient> {
    let mut tape = Tape::new();
    let gamma = tape.leaf("gamma", bank.weights().clone());
    let gx = record_filters(&mut tape, bank, gamma, &x.basis, &x.mass, &x.features)?;
    let gy = record_filters(&mut tape, bank, gamma, &y.basis, &y.mass, &y.features)?;
    let run = record_pipeline(&mut tape, x, y, gx, gy, schedule, cfg)?;
    let loss = tape.scalar(run.loss);
    let n = run.state.energy_trace.len() as f64;
    let data = run.state.energy_trace.iter().map(|r| r.energy.data).sum::<f64>() / n;
    let entropy = run.state.energy_trace.iter().map(|r| r.energy.entropy).sum::<f64>() / n;
    let weights = if loss.is_finite() {
        tape.backward(run.loss)?.by_name("gamma")?.clone()
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(PairGradient {
        loss,
        data_term: data,
        entropy_term: entropy,
        weights,
    })
}

/// Unsupervised training over every ordered pair `(i, j)`, `i ≠ j`, in a
/// seeded shuffle per epoch. Aborts on the first non-finite loss.
pub fn train(shapes: &[PreparedShape], mut bank: FilterBank, cfg: &TrainerConfig) -> Result<TrainingOutcome> {
    if shapes.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two shapes".into()));
    }
    if cfg.pairs_per_step == 0 {
        return Err(Error::InvalidArgument("pairs_per_step must be positive".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..shapes.len())
        .flat_map(|i| (0..shapes.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (rows, cols) = bank.weights().shape();
    let mut moments = AdamMoments::zeros(rows, cols);
    let mut records = Vec::new();
    let mut csv = String::from("step,pair_x,pair_y,loss,data_term,entropy_term\n");
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        for batch in pairs.chunks(cfg.pairs_per_step) {
            step += 1;
            let results: Vec<Result<_>> = batch
                .par_iter()
                .map(|&(i, j)| pair_gradient(&shapes[i], &shapes[j], &bank, &cfg.schedule, &cfg.shell))
                .collect();
            let mut grad = DMatrix::zeros(rows, cols);
            for (&(i, j), res) in batch.iter().zip(results) {
                let PairGradient {
                    loss,
                    data_term: data,
                    entropy_term: entropy,
                    weights: g,
                } = res?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} for pair ({i}, {j}) at step {step}"
                    )));
                }
                grad += g;
                writeln!(csv, "{step},{i},{j},{loss},{data},{entropy}").unwrap();
                records.push(LossRecord {
                    step,
                    pair: (i, j),
                    loss,
                    data_term: data,
                    entropy_term: entropy,
                });
            }
            grad /= batch.len() as f64;
            let mut w = bank.weights().clone();
            adam_step(&mut w, &grad, &mut moments, &cfg.adam, step as u64)?;
            bank.set_weights(w)?;
            let mean = records[records.len() - batch.len()..].iter().map(|r| r.loss).sum::<f64>() / batch.len() as f64;
            log::info!("epoch {epoch} step {step}: loss {mean:.6}");
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.output_dir) {
                if every > 0 && step % every == 0 {
                    std::fs::create_dir_all(dir)?;
                    write_checkpoint(&bank, dir.join(format!("checkpoint_{step}.dshl")))?;
                }
            }
        }
    }
    if let Some(dir) = &cfg.output_dir {
        write_text(dir.join("loss.csv"), csv)?;
        write_checkpoint(&bank, dir.join("final.dshl"))?;
    }
    Ok(TrainingOutcome {
        bank,
        records,
        steps: step,
    })
}
