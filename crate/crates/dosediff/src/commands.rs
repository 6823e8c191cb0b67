//! Command implementations behind the CLI: dataset generation,
//! training, sampling, and evaluation. Each takes a plain argument
//! struct so integration tests drive the same code paths as `main`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, sample, eps_from_clean_head};
use crate::error::{Error, Result};
use crate::metrics::{
    dvh_curve, dvh_curves_csv, evaluate_sample, reports_csv, MetricReport, Structure,
    StructureKind,
};
use crate::phantom::{
    self, build_dataset, Dataset, Phantom, PhantomSpec, Split, CH_CORD, CH_HEART, CH_LUNGS,
    CH_PTV,
};
use crate::tensor::{no_grad, Tensor};
use crate::train::{self, restore_model_weights};
use crate::util::write_atomic;

/// Dose values outside this range are clamped when a sampled map is
/// converted to a dose file; the clamped fraction is reported.
pub const DOSE_RANGE: (f64, f64) = (0.0, 1.2);

/// Per-step bound on the sampler's clean-image estimate: the dose
/// range with margin, so chain error cannot compound unboundedly.
pub const SAMPLE_X0_CLIP: (f64, f64) = (0.0, 1.2);

// ── gen ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    /// Patching requirements the grid must satisfy (patch * 2^depth).
    pub patch_size: usize,
    pub depth: usize,
    pub force: bool,
}

impl Default for GenArgs {
    fn default() -> Self {
        // 10:1:4 split ratio at desk scale
        GenArgs {
            out: PathBuf::from("data"),
            n_train: 50,
            n_val: 5,
            n_test: 20,
            size: 64,
            seed: 0,
            patch_size: 4,
            depth: 4,
            force: false,
        }
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let divisor = args.patch_size << args.depth;
    if args.size < 32 || divisor == 0 || args.size % divisor != 0 {
        return Err(Error::InvalidConfig(format!(
            "size {} must be >= 32 and divisible by patch_size * 2^depth = {divisor}",
            args.size
        )));
    }
    let mut spec = PhantomSpec::desk(args.seed);
    spec.height = args.size;
    spec.width = args.size;
    // keep dose falloff proportional to the grid
    spec.falloff *= args.size as f64 / 64.0;
    let manifest = build_dataset(
        &args.out,
        args.n_train,
        args.n_val,
        args.n_test,
        args.seed,
        &spec,
        args.force,
    )?;
    println!(
        "dataset: {} ({} train / {} val / {} test, {}x{}, base seed {})",
        args.out.display(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len(),
        args.size,
        args.size,
        args.seed
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub resume: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.training.epochs = e;
    }
    if let Some(s) = args.seed {
        config.training.seed = s;
    }
    if let Some(b) = args.batch_size {
        config.training.batch_size = b;
    }
    config.validate()?;
    let dataset = Dataset::open(&args.data)?;
    let outcome = train::train(&config, &dataset, &args.out, args.resume, false, None)?;
    println!(
        "trained {} epochs: parameters {}, {:.3} s/iter, final epoch loss {:.4}",
        outcome.epoch_losses.len(),
        outcome.param_count,
        outcome.sec_per_iter,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

// ── sample ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: Split,
    pub n: usize,
    pub seed: u64,
    /// Overrides the configured sampler stride when set.
    pub stride: Option<usize>,
}

pub fn pred_file_name(id: usize) -> String {
    format!("pred_{id:04}.bin")
}

/// Samples a dose map for one structure image with a fresh rng stream;
/// returns the clamped map and the fraction of pixels that needed
/// clamping.
pub fn sample_dose_map(
    model: &crate::net::DoseModel,
    phantom: &Phantom,
    sched: &crate::diffusion::DiffusionSchedule,
    rng: &mut ChaCha20Rng,
    stride: usize,
) -> Result<(Vec<f64>, Vec<crate::diffusion::StepDiag>, f64)> {
    let (h, w) = (phantom.dose.height, phantom.dose.width);
    let cond = phantom.structure.to_tensor();
    no_grad(|| {
        // the condition is time-invariant: encode once per chain
        let feats = model.encoder.forward(&cond)?;
        let t_max = sched.t_steps;
        let predict = eps_from_clean_head(
            |xt: &Tensor, ts: &[usize]| model.predict_with_feats(xt, ts, t_max, &feats),
            sched,
        );
        let (x0, diags) = sample(&predict, &[1, 1, h, w], sched, rng, stride, Some(SAMPLE_X0_CLIP))?;
        let raw = x0.to_vec();
        let clamped_count = raw
            .iter()
            .filter(|v| **v < DOSE_RANGE.0 || **v > DOSE_RANGE.1)
            .count();
        let dose: Vec<f64> = raw
            .iter()
            .map(|v| v.clamp(DOSE_RANGE.0, DOSE_RANGE.1))
            .collect();
        Ok((dose, diags, clamped_count as f64 / raw.len() as f64))
    })
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let (model, config) = restore_model_weights(&ck, true)?;
    let dataset = Dataset::open(&args.data)?;
    let ids = dataset.split_ids(args.split).to_vec();
    if args.n > ids.len() {
        return Err(Error::Sampling(format!(
            "requested {} samples but split '{}' holds {}",
            args.n,
            args.split.name(),
            ids.len()
        )));
    }
    let sched = make_schedule(
        config.schedule.t_steps,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )?;
    let stride = args.stride.unwrap_or(config.training.sample_stride);
    std::fs::create_dir_all(&args.out)?;

    let mut diag_csv = String::from("sample,step,mean,std\n");
    let mut clamped_total = 0.0;
    for &id in &ids[..args.n] {
        let phantom = dataset.load(id)?;
        if phantom.dose.height != config.model.image_size
            || phantom.dose.width != config.model.image_size
        {
            return Err(Error::Sampling(format!(
                "dataset grid {}x{} does not match checkpoint image_size {}",
                phantom.dose.height, phantom.dose.width, config.model.image_size
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
        rng.set_stream(id as u64);
        let (dose, diags, clamped) = sample_dose_map(&model, &phantom, &sched, &mut rng, stride)?;
        clamped_total += clamped;
        let (h, w) = (phantom.dose.height, phantom.dose.width);
        phantom::write_array_file(
            &args.out.join(pred_file_name(id)),
            &[
                ("pred", vec![1, h, w], dose.as_slice()),
                ("gt", vec![1, h, w], phantom.dose.data.as_slice()),
                ("body", vec![1, h, w], phantom.body.as_slice()),
            ],
        )?;
        diag_csv.push_str(&train::diagnostics_csv(&diags, &format!("{id:04}")));
    }
    write_atomic(&args.out.join("diagnostics.csv"), diag_csv.as_bytes())?;
    println!(
        "sampled {} dose maps (stride {stride}) -> {}; clamped pixel fraction {:.4}",
        args.n,
        args.out.display(),
        clamped_total / args.n.max(1) as f64
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: Split,
}

/// Standard structure set of a phantom for metric evaluation.
pub fn phantom_structures(p: &Phantom) -> Vec<(&'static str, &[f64], StructureKind)> {
    vec![
        ("ptv", p.structure.channel(CH_PTV), StructureKind::Target),
        ("heart", p.structure.channel(CH_HEART), StructureKind::Oar),
        ("lungs", p.structure.channel(CH_LUNGS), StructureKind::Oar),
        ("cord", p.structure.channel(CH_CORD), StructureKind::Oar),
    ]
}

fn load_prediction(path: &Path) -> Result<Vec<f64>> {
    let arrays = phantom::read_array_file(path)?;
    let map: BTreeMap<String, Vec<f64>> =
        arrays.into_iter().map(|(n, _, d)| (n, d)).collect();
    map.get("pred")
        .cloned()
        .ok_or_else(|| Error::Dataset(format!("{}: missing 'pred' array", path.display())))
}

/// Evaluates stored predictions for one split; returns per-sample
/// reports in id order.
pub fn evaluate_predictions(
    pred_dir: &Path,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<(usize, MetricReport)>> {
    let ids = dataset.split_ids(split).to_vec();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !pred_dir.join(pred_file_name(**id)).exists())
        .map(|id| format!("{id:04}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing predictions for samples: {}",
            missing.join(", ")
        )));
    }
    let mut reports = Vec::with_capacity(ids.len());
    for &id in &ids {
        let phantom = dataset.load(id)?;
        let pred = load_prediction(&pred_dir.join(pred_file_name(id)))?;
        let structures: Vec<Structure> = phantom_structures(&phantom)
            .iter()
            .map(|(name, mask, kind)| Structure {
                name,
                mask,
                kind: *kind,
            })
            .collect();
        let report = evaluate_sample(&pred, &phantom.dose.data, &phantom.body, &structures)?;
        reports.push((id, report));
    }
    Ok(reports)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let reports = evaluate_predictions(&args.pred, &dataset, args.split)?;
    std::fs::create_dir_all(&args.out)?;

    let named: Vec<(String, MetricReport)> = reports
        .iter()
        .map(|(id, r)| (format!("{id:04}"), r.clone()))
        .collect();
    let csv = reports_csv(&named);
    write_atomic(&args.out.join("metrics.csv"), csv.as_bytes())?;

    // DVH curves for predictions and references, per structure
    let mut dvh_rows = String::from("sample,source,structure,threshold,volume_fraction\n");
    for (id, _) in &reports {
        let phantom = dataset.load(*id)?;
        let pred = load_prediction(&args.pred.join(pred_file_name(*id)))?;
        for (name, mask, _) in phantom_structures(&phantom) {
            for (source, dose) in [("pred", &pred), ("gt", &phantom.dose.data)] {
                let curve = dvh_curve(dose, mask)?;
                let mut block = String::new();
                for (t, f) in curve.thresholds.iter().zip(curve.volume_fraction.iter()) {
                    let _ = writeln!(block, "{id:04},{source},{name},{t},{f}");
                }
                dvh_rows.push_str(&block);
            }
        }
    }
    write_atomic(&args.out.join("dvh.csv"), dvh_rows.as_bytes())?;

    let n = reports.len() as f64;
    let mean = |get: fn(&MetricReport) -> f64| {
        reports.iter().map(|(_, r)| get(r)).sum::<f64>() / n
    };
    let std = |get: fn(&MetricReport) -> f64, mean: f64| {
        (reports
            .iter()
            .map(|(_, r)| (get(r) - mean) * (get(r) - mean))
            .sum::<f64>()
            / n)
            .sqrt()
    };
    for (id, r) in &reports {
        println!(
            "{id:04}  dose_score {:.4}  dvh_score {:.4}  hi {:.4}",
            r.dose_score, r.dvh_score, r.hi
        );
    }
    let (md, mv, mh) = (
        mean(|r| r.dose_score),
        mean(|r| r.dvh_score),
        mean(|r| r.hi),
    );
    println!(
        "mean  dose_score {:.4} +/- {:.4}  dvh_score {:.4} +/- {:.4}  hi {:.4} +/- {:.4}",
        md,
        std(|r| r.dose_score, md),
        mv,
        std(|r| r.dvh_score, mv),
        mh,
        std(|r| r.hi, mh),
    );
    println!("wrote {} and {}", args.out.join("metrics.csv").display(), args.out.join("dvh.csv").display());
    Ok(())
}

/// Convenience for the undirected CSV curve export used in tests.
pub fn curves_for(phantom: &Phantom, dose: &[f64]) -> Result<String> {
    let mut curves = Vec::new();
    for (name, mask, _) in phantom_structures(phantom) {
        curves.push((name.to_string(), dvh_curve(dose, mask)?));
    }
    Ok(dvh_curves_csv(&curves))
}
