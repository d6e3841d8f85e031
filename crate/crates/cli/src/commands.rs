use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use default_moe::analysis::{analyze_model, write_analysis, AnalysisError};
pub use default_moe::grad::DEFAULT_FD_STEP;
use default_moe::grad::{
    gradsim_seed, model_gradcheck, FdOptions, GradError, GradReport, GradsimPhase, GradsimSettings,
};
use default_moe::moe::RoutingMode;
use default_moe::tensor::Scalar;
use default_moe::train::{
    checkpoint_header, compare_runs, eval_windows, load_checkpoint, load_corpus, sample_batch,
    throughput_bench, Corpus, MetricsRecord, MetricsWriter, RunConfig, TrainError, Trainer,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::Validation(m)
            | CliError::Numeric(m)
            | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if matches!(e, TrainError::Io { .. }) {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::Model(t) => t.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Io { .. } => CliError::Io(e.to_string()),
            AnalysisError::Empty => CliError::Validation(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct GradsimArgs {
    pub k: Vec<usize>,
    pub warmup_steps: u64,
    pub absorb_batches: u64,
    pub batches: usize,
    pub batch_size: usize,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&c.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var("DEFAULT_MOE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "DEFAULT_MOE_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn out_dir(c: &Common, command: &str) -> Result<PathBuf> {
    let dir = c
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn corpus(cfg: &RunConfig) -> Result<Arc<Corpus>> {
    Ok(Arc::new(load_corpus(
        &cfg.train.corpus,
        cfg.train.train_ratio,
    )?))
}

fn seeds(c: &Common, cfg: &RunConfig) -> Vec<u64> {
    if c.seeds.is_empty() {
        vec![cfg.model.seed]
    } else {
        c.seeds.clone()
    }
}

fn modes(c: &Common, default: &[RoutingMode]) -> Vec<RoutingMode> {
    if c.modes.is_empty() {
        default.to_vec()
    } else {
        c.modes.clone()
    }
}

fn precision(c: &Common, default: u32) -> u32 {
    c.precision
        .as_deref()
        .map_or(default, |p| p.parse().expect("clap restricts precision"))
}

fn single<T: Copy + fmt::Display>(what: &str, xs: &[T]) -> Result<T> {
    match xs {
        [x] => Ok(*x),
        _ => Err(CliError::Usage(format!(
            "train takes exactly one {what}, got {}",
            xs.len()
        ))),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    config: &'a RunConfig,
    seeds: &'a [u64],
    modes: &'a [RoutingMode],
    precision: u32,
    corpus: &'a Corpus,
}

impl Manifest<'_> {
    /// Writes `manifest.json` with the content hash of every artifact.
    /// Throughput fields are wall-clock measurements and differ between
    /// otherwise identical runs; the manifest lists them.
    fn write(&self, dir: &Path, artifacts: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for a in artifacts {
            let name = a.strip_prefix(dir).unwrap_or(a).display().to_string();
            hashes.insert(name, sha256_file(a)?);
        }
        let m = json!({
            "command": self.command,
            "argv": self.argv.get(1..).unwrap_or_default(),
            "config": serde_json::to_value(self.config).expect("config serializes"),
            "config_hash": self.config.hash(),
            "seeds": self.seeds,
            "modes": self.modes,
            "precision": self.precision,
            "corpus_checksum": self.corpus.checksum(),
            "artifacts": hashes,
            "wall_clock_fields": ["tokens_per_sec"],
        });
        write(
            &dir.join("manifest.json"),
            &(serde_json::to_string_pretty(&m).expect("json") + "\n"),
        )
    }
}

fn stem(mode: RoutingMode, seed: u64) -> String {
    format!("{mode}_seed{seed}")
}

fn metric_files(dir: &Path, stem: &str) -> [PathBuf; 2] {
    [
        dir.join(format!("{stem}.csv")),
        dir.join(format!("{stem}.jsonl")),
    ]
}

fn print_eval(r: &MetricsRecord) {
    if let (Some(v), Some(p)) = (r.val_loss, r.ppl) {
        println!(
            "{} seed {} step {:>6}  train {:.4}  val {:.4}  ppl {:.3}",
            r.mode, r.seed, r.step, r.train_loss, v, p
        );
    }
}

pub fn train(c: &Common, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(c)?;
    let mode = single("mode", &modes(c, &[cfg.model.moe.mode]))?;
    let seed = single("seed", &seeds(c, &cfg))?;
    cfg.model.moe.mode = mode;
    cfg.model.seed = seed;
    let dir = out_dir(c, "train")?;
    if cfg.train.checkpoint_path.is_none() {
        cfg.train.checkpoint_path = Some(dir.join("checkpoint.bin").display().to_string());
    }
    let corpus = corpus(&cfg)?;
    let bits = precision(c, 32);
    match bits {
        64 => train_as::<f64>(&cfg, Arc::clone(&corpus), &dir)?,
        _ => train_as::<f32>(&cfg, Arc::clone(&corpus), &dir)?,
    }
    let mut artifacts = metric_files(&dir, &stem(mode, seed)).to_vec();
    let ckpt = PathBuf::from(cfg.train.checkpoint_path.as_deref().expect("set above"));
    if ckpt.starts_with(&dir) {
        artifacts.push(ckpt);
    }
    Manifest {
        command: "train",
        argv,
        config: &cfg,
        seeds: &[seed],
        modes: &[mode],
        precision: bits,
        corpus: &corpus,
    }
    .write(&dir, &artifacts)
}

fn train_as<T: Scalar>(cfg: &RunConfig, corpus: Arc<Corpus>, dir: &Path) -> Result<()> {
    let mut t = Trainer::<T>::new(cfg.clone(), corpus)?;
    let mut w = MetricsWriter::create(dir, &stem(t.mode(), t.seed()))?;
    let res = t.run(|r| {
        print_eval(r);
        w.record(r)
    });
    if let Err(e) = &res {
        w.event(&json!({"event": "error", "step": t.step, "message": e.to_string()}))?;
    }
    w.flush()?;
    res?;
    Ok(())
}

pub fn compare(c: &Common, argv: &[String]) -> Result<()> {
    let cfg = load_config(c)?;
    let modes = modes(c, &[RoutingMode::TopK, RoutingMode::Default]);
    let seeds = seeds(c, &cfg);
    let dir = out_dir(c, "compare")?;
    let corpus = corpus(&cfg)?;
    let bits = precision(c, 32);

    let mut writers = BTreeMap::new();
    for &m in &modes {
        for &s in &seeds {
            writers.insert((m.as_str(), s), MetricsWriter::create(&dir, &stem(m, s))?);
        }
    }
    let writers = Mutex::new(writers);
    let failure: Mutex<Option<TrainError>> = Mutex::new(None);
    let on_record = |r: &MetricsRecord| {
        print_eval(r);
        let mut ws = writers.lock().unwrap();
        if let Some(w) = ws.get_mut(&(r.mode.as_str(), r.seed)) {
            if let Err(e) = w.record(r) {
                failure.lock().unwrap().get_or_insert(e);
            }
        }
    };
    let threads = threads()?;
    let cmp = match bits {
        64 => compare_runs::<f64>(
            &cfg,
            Arc::clone(&corpus),
            &modes,
            &seeds,
            threads,
            &on_record,
        ),
        _ => compare_runs::<f32>(
            &cfg,
            Arc::clone(&corpus),
            &modes,
            &seeds,
            threads,
            &on_record,
        ),
    };
    let mut artifacts = Vec::new();
    for (&(m, s), w) in writers.into_inner().unwrap().iter_mut() {
        w.flush()?;
        artifacts.extend(metric_files(&dir, &format!("{m}_seed{s}")));
    }
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e.into());
    }
    let cmp = cmp?;
    for s in &cmp.per_mode {
        println!(
            "{}: final val {:.4} ± {:.4}, reached target on {}/{} seeds, step ratio {}",
            s.mode,
            s.final_val_mean,
            s.final_val_std,
            s.reached,
            seeds.len(),
            match (s.step_ratio_mean, s.step_ratio_std) {
                (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
                _ => "n/a".into(),
            }
        );
    }
    let summary = dir.join("summary.json");
    write(
        &summary,
        &(serde_json::to_string_pretty(&cmp).expect("json") + "\n"),
    )?;
    artifacts.push(summary);
    Manifest {
        command: "compare",
        argv,
        config: &cfg,
        seeds: &seeds,
        modes: &modes,
        precision: bits,
        corpus: &corpus,
    }
    .write(&dir, &artifacts)
}

pub fn gradcheck(
    c: &Common,
    argv: &[String],
    tolerance: f64,
    fd_step: f64,
    batch_size: usize,
    seq_len: usize,
) -> Result<()> {
    if precision(c, 64) != 64 {
        return Err(CliError::Usage(
            "gradcheck runs at 64-bit precision only".into(),
        ));
    }
    let cfg = load_config(c)?;
    if seq_len == 0 || batch_size == 0 || seq_len > cfg.model.max_seq_len {
        return Err(CliError::Validation(format!(
            "batch {batch_size}x{seq_len} is empty or longer than model.max_seq_len {}",
            cfg.model.max_seq_len
        )));
    }
    let modes = modes(
        c,
        &[RoutingMode::TopK, RoutingMode::Dense, RoutingMode::Default],
    );
    let seeds = seeds(c, &cfg);
    let dir = out_dir(c, "gradcheck")?;
    let corpus = corpus(&cfg)?;
    let opts = FdOptions {
        step: fd_step,
        ..Default::default()
    };
    let mut results = Vec::new();
    let mut breaches = Vec::new();
    for &seed in &seeds {
        let mut run = cfg.clone();
        run.model.seed = seed;
        let t = Trainer::<f64>::new(run, Arc::clone(&corpus))?;
        let batch = sample_batch(
            &corpus.train,
            &corpus.train_tags,
            batch_size,
            seq_len,
            seed,
            0,
        )?;
        for &mode in &modes {
            let r = model_gradcheck(&t.model, &batch, mode, &opts)?;
            let worst = r.worst().map_or("-", |b| b.name.as_str());
            let pass = r.max_rel_err < tolerance;
            println!(
                "{} {mode} seed {seed}: max relative error {:.3e} ({worst})",
                if pass { "PASS" } else { "FAIL" },
                r.max_rel_err
            );
            if !pass {
                breaches.push(format!(
                    "{mode} seed {seed}: {:.3e} at {worst}",
                    r.max_rel_err
                ));
            }
            results.push(json!({"seed": seed, "tolerance": tolerance, "fd_step": fd_step, "pass": pass, "result": r}));
        }
    }
    let report = dir.join("gradcheck.json");
    write(
        &report,
        &(serde_json::to_string_pretty(&results).expect("json") + "\n"),
    )?;
    Manifest {
        command: "gradcheck",
        argv,
        config: &cfg,
        seeds: &seeds,
        modes: &modes,
        precision: 64,
        corpus: &corpus,
    }
    .write(&dir, &[report])?;
    if breaches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check above tolerance {tolerance:e}: {}",
            breaches.join("; ")
        )))
    }
}

pub fn gradsim(c: &Common, argv: &[String], a: &GradsimArgs) -> Result<()> {
    let cfg = load_config(c)?;
    let n = cfg.model.moe.num_experts;
    let ks = if a.k.is_empty() {
        (1..n.max(2)).collect()
    } else {
        a.k.clone()
    };
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(CliError::Validation(format!("K = {k} outside 1..={n}")));
    }
    if a.batches == 0 || a.batch_size == 0 {
        return Err(CliError::Validation(
            "gradsim needs at least one batch of at least one sequence".into(),
        ));
    }
    let modes = modes(c, &[RoutingMode::TopK, RoutingMode::Default]);
    let seeds = seeds(c, &cfg);
    let dir = out_dir(c, "gradsim")?;
    let corpus = corpus(&cfg)?;
    let bits = precision(c, 32);
    let settings = GradsimSettings {
        modes: modes.clone(),
        ks: ks.clone(),
        warmup_steps: a.warmup_steps,
        absorb_batches: a.absorb_batches,
        batches: a.batches,
        batch_size: a.batch_size,
    };

    let next = Mutex::new(0usize);
    let results: Mutex<
        Vec<Option<std::result::Result<Vec<(GradsimPhase, GradReport)>, GradError>>>,
    > = Mutex::new(seeds.iter().map(|_| None).collect());
    let workers = threads()?.min(seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    *n += 1;
                    *n - 1
                };
                let Some(&seed) = seeds.get(i) else { break };
                let r = match bits {
                    64 => gradsim_seed::<f64>(&cfg, Arc::clone(&corpus), seed, &settings),
                    _ => gradsim_seed::<f32>(&cfg, Arc::clone(&corpus), seed, &settings),
                };
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });

    let mut phases: BTreeMap<&str, GradReport> = BTreeMap::new();
    for r in results.into_inner().unwrap() {
        for (phase, rep) in r.expect("every seed ran")? {
            phases
                .entry(phase.as_str())
                .or_default()
                .rows
                .extend(rep.rows);
        }
    }
    let mut artifacts = Vec::new();
    let mut summary = Vec::new();
    for (phase, rep) in &phases {
        for (ext, text) in [("csv", rep.to_csv()), ("jsonl", rep.to_jsonl())] {
            let p = dir.join(format!("gradsim_{phase}.{ext}"));
            write(&p, &text)?;
            artifacts.push(p);
        }
        for &k in &ks {
            for &mode in &modes {
                let means = rep.mode_means(mode, k);
                if let Some((cos, eps)) = means {
                    println!("{phase} K={k} {mode}: cosine {cos:.4}  |eps| {eps:.4e}");
                }
                summary.push(json!({
                    "phase": phase,
                    "K": k,
                    "mode": mode,
                    "mean_cosine": means.map(|m| m.0),
                    "mean_eps_norm": means.map(|m| m.1),
                }));
            }
        }
    }
    let p = dir.join("gradsim_summary.json");
    write(
        &p,
        &(serde_json::to_string_pretty(&Value::Array(summary)).expect("json") + "\n"),
    )?;
    artifacts.push(p);
    Manifest {
        command: "gradsim",
        argv,
        config: &cfg,
        seeds: &seeds,
        modes: &modes,
        precision: bits,
        corpus: &corpus,
    }
    .write(&dir, &artifacts)
}

pub fn analyze(c: &Common, argv: &[String], checkpoint: &Path, windows: usize) -> Result<()> {
    if !checkpoint.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let (bits, stored) = checkpoint_header(checkpoint)?;
    let cfg = if c.config.is_some() || !c.overrides.is_empty() {
        load_config(c)?
    } else {
        stored
    };
    let dir = out_dir(c, "analyze")?;
    let corpus = corpus(&cfg)?;
    let mode = match c.modes.as_slice() {
        [] => None,
        [m] => Some(*m),
        _ => return Err(CliError::Usage("analyze takes at most one mode".into())),
    };
    let written = match bits {
        64 => analyze_as::<f64>(checkpoint, Arc::clone(&corpus), mode, windows, &dir)?,
        _ => analyze_as::<f32>(checkpoint, Arc::clone(&corpus), mode, windows, &dir)?,
    };
    Manifest {
        command: "analyze",
        argv,
        config: &cfg,
        seeds: &[cfg.model.seed],
        modes: &[mode.unwrap_or(cfg.model.moe.mode)],
        precision: bits as u32,
        corpus: &corpus,
    }
    .write(&dir, &written)
}

fn analyze_as<T: Scalar>(
    checkpoint: &Path,
    corpus: Arc<Corpus>,
    mode: Option<RoutingMode>,
    windows: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut t = load_checkpoint::<T>(checkpoint, Arc::clone(&corpus))?;
    let mode = mode.unwrap_or(t.mode());
    let batch = eval_windows(
        &corpus.val,
        &corpus.val_tags,
        t.config.train.seq_len,
        windows,
    )?;
    let a = analyze_model(&mut t.model, &batch, mode, &corpus.tag_names)?;
    for l in &a.layers {
        println!(
            "layer {}: entropy {:.4} nats, max/min routing frequency {:.3}",
            l.layer,
            l.entropy,
            l.frequency.max_min_ratio()
        );
    }
    Ok(write_analysis(dir, &a)?)
}

pub fn bench(
    c: &Common,
    argv: &[String],
    warmup: u64,
    windows: usize,
    steps_per_window: u64,
) -> Result<()> {
    if windows == 0 || steps_per_window == 0 {
        return Err(CliError::Validation(
            "bench needs at least one window of at least one step".into(),
        ));
    }
    let cfg = load_config(c)?;
    let modes = modes(
        c,
        &[RoutingMode::TopK, RoutingMode::Default, RoutingMode::Dense],
    );
    let dir = out_dir(c, "bench")?;
    let corpus = corpus(&cfg)?;
    let bits = precision(c, 32);
    let res = match bits {
        64 => throughput_bench::<f64>(
            &cfg,
            Arc::clone(&corpus),
            &modes,
            warmup,
            windows,
            steps_per_window,
        )?,
        _ => throughput_bench::<f32>(
            &cfg,
            Arc::clone(&corpus),
            &modes,
            warmup,
            windows,
            steps_per_window,
        )?,
    };
    for r in &res {
        println!(
            "{}: {:.0} tokens/s (median of {}), bank {} scalars",
            r.mode,
            r.median_tokens_per_sec,
            r.windows.len(),
            r.bank_memory_scalars
        );
    }
    let p = dir.join("bench.json");
    write(
        &p,
        &(serde_json::to_string_pretty(&res).expect("json") + "\n"),
    )?;
    Manifest {
        command: "bench",
        argv,
        config: &cfg,
        seeds: &[cfg.model.seed],
        modes: &modes,
        precision: bits,
        corpus: &corpus,
    }
    .write(&dir, &[p])
}
