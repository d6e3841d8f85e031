use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use super::metrics::MetricsRecord;
use super::trainer::Trainer;
use super::{Corpus, RunConfig, TrainError};
use crate::moe::RoutingMode;
use crate::tensor::Scalar;

/// One finished training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub mode: RoutingMode,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// `(step, val_loss)` at every evaluation.
    pub val_curve: Vec<(u64, f64)>,
    pub final_val_loss: f64,
    /// Median training throughput over all steps.
    pub tokens_per_sec: f64,
}

/// Steps each mode needed to reach the first mode's final validation loss
/// for one seed.
#[derive(Debug, Clone, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub target: f64,
    /// Same order as the compared modes; `None` if never reached.
    pub steps_to_target: Vec<Option<u64>>,
    pub final_val_loss: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: RoutingMode,
    pub final_val_mean: f64,
    pub final_val_std: f64,
    /// Seeds on which this mode reached the baseline's final loss.
    pub reached: usize,
    /// Mean and sample std of `steps_to_target / baseline steps_to_target`
    /// over seeds where both reached the target.
    pub step_ratio_mean: Option<f64>,
    pub step_ratio_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub modes: Vec<RoutingMode>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedComparison>,
    pub per_mode: Vec<ModeSummary>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

impl Comparison {
    pub fn run(&self, mode: RoutingMode, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed)
    }
}

/// First evaluated step whose validation loss is at or below `target`.
pub fn steps_to_target(curve: &[(u64, f64)], target: f64) -> Option<u64> {
    curve.iter().find(|&&(_, l)| l <= target).map(|&(s, _)| s)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Trains `config` once per `(mode, seed)` with identical data order across
/// modes, then measures how many steps each mode needs to reach the first
/// mode's final validation loss. Runs fan out over up to `threads` threads.
/// `on_record` sees every step of every run.
pub fn compare_runs<T: Scalar>(
    config: &RunConfig,
    corpus: Arc<Corpus>,
    modes: &[RoutingMode],
    seeds: &[u64],
    threads: usize,
    on_record: &(dyn Fn(&MetricsRecord) + Sync),
) -> Result<Comparison, TrainError> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config(
            "compare needs at least one mode and one seed".into(),
        ));
    }
    for (i, m) in modes.iter().enumerate() {
        if modes[..i].contains(m) {
            return Err(TrainError::Config(format!("mode {m} listed twice")));
        }
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(TrainError::Config(format!("seed {s} listed twice")));
        }
    }
    config.validate()?;

    let jobs: Vec<(RoutingMode, u64)> = seeds
        .iter()
        .flat_map(|&s| modes.iter().map(move |&m| (m, s)))
        .collect();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<RunResult, TrainError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(mode, seed)) = jobs.get(idx) else {
                    break;
                };
                let r = run_one::<T>(config, Arc::clone(&corpus), mode, seed, on_record);
                results.lock().unwrap()[idx] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let find = |m: RoutingMode, s: u64| runs.iter().find(|r| r.mode == m && r.seed == s).unwrap();
    let mut per_seed = Vec::new();
    for &s in seeds {
        let target = find(modes[0], s).final_val_loss;
        per_seed.push(SeedComparison {
            seed: s,
            target,
            steps_to_target: modes
                .iter()
                .map(|&m| steps_to_target(&find(m, s).val_curve, target))
                .collect(),
            final_val_loss: modes.iter().map(|&m| find(m, s).final_val_loss).collect(),
        });
    }
    let per_mode = modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let finals: Vec<f64> = per_seed.iter().map(|c| c.final_val_loss[mi]).collect();
            let (final_val_mean, final_val_std) = mean_std(&finals);
            let ratios: Vec<f64> = per_seed
                .iter()
                .filter_map(|c| match (c.steps_to_target[mi], c.steps_to_target[0]) {
                    (Some(a), Some(b)) => Some(a as f64 / b as f64),
                    _ => None,
                })
                .collect();
            let (rm, rs) = if ratios.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&ratios);
                (Some(m), Some(s))
            };
            ModeSummary {
                mode,
                final_val_mean,
                final_val_std,
                reached: per_seed
                    .iter()
                    .filter(|c| c.steps_to_target[mi].is_some())
                    .count(),
                step_ratio_mean: rm,
                step_ratio_std: rs,
            }
        })
        .collect();
    Ok(Comparison {
        modes: modes.to_vec(),
        seeds: seeds.to_vec(),
        per_seed,
        per_mode,
        runs,
    })
}

fn run_one<T: Scalar>(
    config: &RunConfig,
    corpus: Arc<Corpus>,
    mode: RoutingMode,
    seed: u64,
    on_record: &(dyn Fn(&MetricsRecord) + Sync),
) -> Result<RunResult, TrainError> {
    let mut cfg = config.clone();
    cfg.model.moe.mode = mode;
    cfg.model.seed = seed;
    cfg.train.checkpoint_path = None;
    let mut trainer = Trainer::<T>::new(cfg, corpus)?;
    let records = trainer.run(|r| {
        on_record(r);
        Ok(())
    })?;
    let val_curve: Vec<(u64, f64)> = records
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (r.step, v)))
        .collect();
    let final_val_loss = val_curve
        .last()
        .map(|&(_, v)| v)
        .ok_or(TrainError::EmptyValidation)?;
    let tokens_per_sec = median(records.iter().map(|r| r.tokens_per_sec).collect());
    Ok(RunResult {
        mode,
        seed,
        records,
        val_curve,
        final_val_loss,
        tokens_per_sec,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputResult {
    pub mode: RoutingMode,
    pub median_tokens_per_sec: f64,
    /// Tokens per second of each timed window.
    pub windows: Vec<f64>,
    pub bank_memory_scalars: usize,
}

/// Training throughput per mode. Every mode starts from the same
/// initialization, takes `warmup` untimed steps, then `windows` timed windows
/// of `steps_per_window` steps each. Windows are interleaved across modes so
/// drift in machine speed hits all modes alike.
pub fn throughput_bench<T: Scalar>(
    config: &RunConfig,
    corpus: Arc<Corpus>,
    modes: &[RoutingMode],
    warmup: u64,
    windows: usize,
    steps_per_window: u64,
) -> Result<Vec<ThroughputResult>, TrainError> {
    let mut trainers = modes
        .iter()
        .map(|&m| {
            let mut cfg = config.clone();
            cfg.model.moe.mode = m;
            cfg.train.steps = cfg
                .train
                .steps
                .max(warmup + windows as u64 * steps_per_window);
            cfg.train.checkpoint_path = None;
            Trainer::<T>::new(cfg, Arc::clone(&corpus))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for t in trainers.iter_mut() {
        for _ in 0..warmup {
            t.train_step()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(windows); modes.len()];
    for _ in 0..windows {
        for (t, s) in trainers.iter_mut().zip(samples.iter_mut()) {
            let tokens =
                (t.config.train.batch_size * t.config.train.seq_len) as u64 * steps_per_window;
            let start = Instant::now();
            for _ in 0..steps_per_window {
                t.train_step()?;
            }
            s.push(tokens as f64 / start.elapsed().as_secs_f64().max(1e-9));
        }
    }
    Ok(modes
        .iter()
        .zip(samples)
        .zip(&trainers)
        .map(|((&mode, windows), t)| ThroughputResult {
            mode,
            median_tokens_per_sec: median(windows.clone()),
            windows,
            bank_memory_scalars: t.model.bank_memory_scalars(),
        })
        .collect())
}
