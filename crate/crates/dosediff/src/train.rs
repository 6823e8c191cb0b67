//! Training loop: Adam over the epsilon-prediction loss with the
//! piecewise learning-rate law, per-step loss logging, and a
//! checkpoint per epoch. Every random draw comes from one ChaCha
//! stream that is captured in the checkpoint, so a resumed run
//! continues the exact trajectory of an uninterrupted one.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::{self, Checkpoint, ParamRecord, RngState};
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, training_loss, eps_from_clean_head};
use crate::error::{Error, Result};
use crate::net::{count_parameters, DoseModel};
use crate::optim::{learning_rate, Adam};
use crate::phantom::{Dataset, Phantom, Split, STRUCTURE_CHANNELS};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub param_count: usize,
    pub sec_per_iter: f64,
    pub checkpoint_path: PathBuf,
}

/// Stacks phantoms into (B, 1, H, W) dose and (B, 2+O, H, W)
/// structure tensors.
pub fn batch_tensors(phantoms: &[&Phantom]) -> (Tensor, Tensor) {
    let (h, w) = (phantoms[0].dose.height, phantoms[0].dose.width);
    let b = phantoms.len();
    let mut dose = Vec::with_capacity(b * h * w);
    let mut cond = Vec::with_capacity(b * STRUCTURE_CHANNELS * h * w);
    for p in phantoms {
        dose.extend_from_slice(&p.dose.data);
        cond.extend_from_slice(&p.structure.data);
    }
    (
        Tensor::new(dose, &[b, 1, h, w]).expect("dose batch shape"),
        Tensor::new(cond, &[b, STRUCTURE_CHANNELS, h, w]).expect("cond batch shape"),
    )
}

/// Rebuilds a model (and its config) from a checkpoint, verifying the
/// stored parameter names against the freshly constructed model.
/// `use_ema` loads the averaged weights (the sampling default)
/// instead of the raw optimizer iterates.
pub fn restore_model_weights(ck: &Checkpoint, use_ema: bool) -> Result<(DoseModel, RunConfig)> {
    let config = ck.config.clone();
    let mut init_rng = ChaCha20Rng::seed_from_u64(config.training.seed);
    let model = DoseModel::init(&config.model, &mut init_rng)?;
    let params = model.params();
    if params.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            params.len(),
            ck.params.len()
        )));
    }
    for ((name, tensor), rec) in params.iter().zip(ck.params.iter()) {
        if *name != rec.name || tensor.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: model {name} {:?} vs checkpoint {} {:?}",
                tensor.shape(),
                rec.name,
                rec.shape
            )));
        }
        let src = if use_ema { &rec.ema } else { &rec.data };
        tensor.data_mut().copy_from_slice(src);
    }
    Ok((model, config))
}

/// [`restore_model_weights`] with the raw (non-averaged) weights.
pub fn restore_model(ck: &Checkpoint) -> Result<(DoseModel, RunConfig)> {
    restore_model_weights(ck, false)
}

/// Per-step decay of the parameter average used for sampling.
pub const EMA_DECAY: f64 = 0.995;

fn snapshot(
    config: &RunConfig,
    model: &DoseModel,
    adam: &Adam,
    ema: &[Vec<f64>],
    rng: &ChaCha20Rng,
    epoch: usize,
) -> Checkpoint {
    let params = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, (name, t))| ParamRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
            adam_m: adam.m[i].clone(),
            adam_v: adam.v[i].clone(),
            ema: ema[i].clone(),
        })
        .collect();
    Checkpoint {
        config: config.clone(),
        epoch,
        adam_step: adam.step_count,
        rng: RngState::capture(rng),
        params,
    }
}

/// Runs (or resumes) training on the dataset's train split, writing
/// `loss.csv`, `config.toml`, and `checkpoint.bin` into `out_dir`.
/// `stop_after` caps the number of completed epochs without touching
/// the learning-rate law, mimicking an interrupted run.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: bool,
    quiet: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let loss_path = out_dir.join("loss.csv");

    let train_ids = dataset.split_ids(Split::Train).to_vec();
    if train_ids.is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }
    let phantoms: Vec<Phantom> = train_ids
        .iter()
        .map(|&id| dataset.load(id))
        .collect::<Result<_>>()?;
    let (h, w) = (phantoms[0].dose.height, phantoms[0].dose.width);
    if h != config.model.image_size || w != config.model.image_size {
        return Err(Error::Training(format!(
            "dataset grid {h}x{w} does not match model image_size {}",
            config.model.image_size
        )));
    }

    let sched = make_schedule(
        config.schedule.t_steps,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )?;

    // fresh state or checkpoint restore
    let (model, mut adam, mut ema, mut rng, start_epoch, config) = if resume
        && checkpoint_path.exists()
    {
        let ck = checkpoint::load(&checkpoint_path)?;
        let (model, ck_config) = restore_model(&ck)?;
        let mut adam = Adam::new(ck_config.optimizer.clone(), &model.params());
        for (i, rec) in ck.params.iter().enumerate() {
            adam.m[i] = rec.adam_m.clone();
            adam.v[i] = rec.adam_v.clone();
        }
        adam.step_count = ck.adam_step;
        let ema: Vec<Vec<f64>> = ck.params.iter().map(|rec| rec.ema.clone()).collect();
        (model, adam, ema, ck.rng.restore(), ck.epoch, ck_config)
    } else {
        let mut init_rng = ChaCha20Rng::seed_from_u64(config.training.seed);
        let model = DoseModel::init(&config.model, &mut init_rng)?;
        let adam = Adam::new(config.optimizer.clone(), &model.params());
        let ema: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.to_vec()).collect();
        // dedicated stream for data order and noise draws
        let mut rng = ChaCha20Rng::seed_from_u64(config.training.seed);
        rng.set_stream(1);
        (model, adam, ema, rng, 0, config.clone())
    };

    crate::util::write_atomic(&out_dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    let params = model.params();
    let param_count = count_parameters(&params);
    if !quiet {
        println!("parameters: {param_count}");
    }

    let mut loss_log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_path)?;
    if start_epoch == 0 && loss_log.metadata()?.len() == 0 {
        writeln!(loss_log, "step,epoch,lr,loss")?;
    }

    let mut epoch_losses = Vec::new();
    let mut step: u64 = adam.step_count;
    let mut iter_seconds = 0.0;
    let mut iter_count = 0u64;

    let end_epoch = stop_after
        .unwrap_or(config.training.epochs)
        .min(config.training.epochs);
    for epoch in start_epoch..end_epoch {
        let lr = learning_rate(
            config.optimizer.lr,
            config.optimizer.lr_min,
            config.training.epochs,
            epoch,
        );
        let mut order: Vec<usize> = (0..phantoms.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.training.batch_size) {
            let t0 = Instant::now();
            let batch: Vec<&Phantom> = chunk.iter().map(|&i| &phantoms[i]).collect();
            let (x0, cond) = batch_tensors(&batch);
            let t_max = sched.t_steps;
            let predict = eps_from_clean_head(
                |xt: &Tensor, ts: &[usize]| model.predict(xt, ts, t_max, &cond),
                &sched,
            );
            let loss = training_loss(&predict, &x0, &sched, &mut rng)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            let grads = loss.backward()?;
            adam.step(&params, &grads, lr)?;
            for (i, (_, p)) in params.iter().enumerate() {
                let pd = p.data();
                for (e, x) in ema[i].iter_mut().zip(pd.iter()) {
                    *e = EMA_DECAY * *e + (1.0 - EMA_DECAY) * x;
                }
            }
            step += 1;
            iter_seconds += t0.elapsed().as_secs_f64();
            iter_count += 1;
            epoch_loss += loss_value;
            batches += 1.0;
            writeln!(loss_log, "{step},{epoch},{lr},{loss_value}")?;
        }
        let mean_loss = epoch_loss / batches;
        epoch_losses.push(mean_loss);
        checkpoint::save(
            &checkpoint_path,
            &snapshot(&config, &model, &adam, &ema, &rng, epoch + 1),
        )?;
        if !quiet {
            println!(
                "epoch {epoch:>4}  lr {lr:.3e}  loss {mean_loss:.4}  ({:.3} s/iter)",
                iter_seconds / iter_count as f64
            );
        }
    }
    loss_log.flush()?;

    Ok(TrainOutcome {
        epoch_losses,
        param_count,
        sec_per_iter: if iter_count > 0 {
            iter_seconds / iter_count as f64
        } else {
            0.0
        },
        checkpoint_path,
    })
}

/// Appends a formatted diagnostics CSV for one sampling chain.
pub fn diagnostics_csv(diags: &[crate::diffusion::StepDiag], sample: &str) -> String {
    let mut out = String::new();
    for d in diags {
        let _ = writeln!(out, "{sample},{},{},{}", d.step, d.mean, d.std);
    }
    out
}
