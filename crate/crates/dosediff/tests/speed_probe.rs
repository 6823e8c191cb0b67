use dosediff::commands::sample_dose_map;
use dosediff::config::RunConfig;
use dosediff::diffusion::make_schedule;
use dosediff::metrics::dose_score;
use dosediff::net::DoseModel;
use dosediff::phantom::{build_dataset, Dataset, PhantomSpec, Split};
use dosediff::train::{restore_model_weights, train};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::PathBuf;

#[test]
#[ignore = "manual speed probe"]
fn probe_desk_training_speed() {
    let batch: usize = std::env::var("PROBE_BATCH").map(|v| v.parse().unwrap()).unwrap_or(1);
    let lr: f64 = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let use_ema = std::env::var("PROBE_EMA").map(|v| v == "1").unwrap_or(true);

    let dir = PathBuf::from(std::env::var("PROBE_DIR").unwrap_or("/tmp/probe".into()));
    let data_dir = dir.join("data");
    if !data_dir.join("manifest.json").exists() {
        build_dataset(&data_dir, 50, 5, 20, 0, &PhantomSpec::desk(0), false).unwrap();
    }
    let ds = Dataset::open(&data_dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.training.epochs = 60;
    cfg.training.batch_size = batch;
    cfg.optimizer.lr = lr;
    cfg.optimizer.lr_min = lr / std::env::var("PROBE_LRMIN_DIV").map(|v| v.parse::<f64>().unwrap()).unwrap_or(100.0);
    let run_dir = dir.join("run");
    if !run_dir.join("checkpoint.bin").exists() {
        let t1 = std::time::Instant::now();
        let out = train(&cfg, &ds, &run_dir, false, true, None).unwrap();
        eprintln!(
            "batch {batch} lr {lr:.1e}: train {:.0}s, loss first {:.0} last {:.0}",
            t1.elapsed().as_secs_f64(),
            out.epoch_losses[0],
            out.epoch_losses.last().unwrap()
        );
    }
    let ck = dosediff::checkpoint::load(&run_dir.join("checkpoint.bin")).unwrap();
    let (trained, config) = restore_model_weights(&ck, use_ema).unwrap();
    let sched = make_schedule(
        config.schedule.t_steps,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )
    .unwrap();
    let test_ids = ds.split_ids(Split::Test).to_vec();
    let mut rng_init = ChaCha20Rng::seed_from_u64(12345);
    let untrained = DoseModel::init(&config.model, &mut rng_init).unwrap();
    for stride in [1usize, 3, 5, 10] {
        let mut t_scores = Vec::new();
        let mut u_scores = Vec::new();
        for &id in &test_ids[..12] {
            let ph = ds.load(id).unwrap();
            for (model, scores) in [(&trained, &mut t_scores), (&untrained, &mut u_scores)] {
                let mut rng = ChaCha20Rng::seed_from_u64(7);
                rng.set_stream(id as u64);
                let (pred, _d, _c) = sample_dose_map(model, &ph, &sched, &mut rng, stride).unwrap();
                scores.push(dose_score(&pred, &ph.dose.data, &ph.body).unwrap());
            }
        }
        let tm = t_scores.iter().sum::<f64>() / t_scores.len() as f64;
        let um = u_scores.iter().sum::<f64>() / u_scores.len() as f64;
        eprintln!(
            "ema {use_ema} stride {stride}: trained {tm:.4} untrained {um:.4} ratio {:.2}",
            um / tm
        );
    }
}
