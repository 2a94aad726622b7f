//! Fully resolved commands and their execution.
//!
//! Flags are turned into a [`Job`] before anything runs: every default is
//! filled in and every input path made absolute. The job is what a run
//! manifest records, so replaying a manifest repeats exactly the same work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use cdds_core::embed_io::{read_container, write_container, write_manifest, DatasetManifest};
use cdds_core::eval::{evaluate, pca_2d, RetrievalReport};
use cdds_core::semalign::{sparsify, Axis, CorrelationState};
use cdds_core::trainer::{
    load_checkpoint, metrics_csv, save_checkpoint, timing_csv, Ablation, CddsModel, CorrelationMode, Modality,
    StepRecord, TrainConfig, Trainer,
};
use cdds_core::{generate_synthetic, Aggregation, EmbeddingBatch, SyntheticConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, BenchArgs, Command, EvalArgs, GenSynthArgs, InspectArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::run::{latest_run, read_manifest, RunDir, RunManifest, MANIFEST};

pub const TRAIN_FILE: &str = "train.cdds";
pub const TEST_FILE: &str = "test.cdds";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchData {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenSynth {
        generator: SyntheticConfig,
        test_pairs: usize,
    },
    Train {
        data: PathBuf,
        config: TrainConfig,
        resume: Option<PathBuf>,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        aggregation: Aggregation,
        /// Seed the checkpoint was trained with.
        seed: u64,
    },
    Ablate {
        train: PathBuf,
        test: PathBuf,
        config: TrainConfig,
        threads: usize,
        aggregation: Aggregation,
    },
    BenchModes {
        data: BenchData,
        config: TrainConfig,
        steps: usize,
    },
    Inspect {
        checkpoint: PathBuf,
        data: PathBuf,
        seed: u64,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::GenSynth { .. } => "gen-synth",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Ablate { .. } => "ablate",
            Job::BenchModes { .. } => "bench-modes",
            Job::Inspect { .. } => "inspect",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::GenSynth { generator, .. } => generator.seed,
            Job::Train { config, .. } | Job::Ablate { config, .. } | Job::BenchModes { config, .. } => config.seed,
            Job::Eval { seed, .. } | Job::Inspect { seed, .. } => *seed,
        }
    }
}

fn existing(path: &Path) -> CliResult<PathBuf> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    Ok(fs::canonicalize(path)?)
}

fn from_latest(root: &Path, command: &str, file: &str) -> CliResult<PathBuf> {
    match latest_run(root, command) {
        Some(dir) => existing(&dir.join(file)),
        None => Err(CliError::MissingInput(root.join(format!("<latest {command} run>")).join(file))),
    }
}

fn read_data(path: &Path) -> CliResult<EmbeddingBatch> {
    existing(path)?;
    Ok(read_container(path)?)
}

/// Test container next to the data a checkpoint was trained on.
fn test_data_for(checkpoint: &Path) -> CliResult<PathBuf> {
    let manifest = checkpoint.parent().map(|d| d.join(MANIFEST)).unwrap_or_default();
    let trained_on = match read_manifest(&manifest)?.job {
        Job::Train { data, .. } => data,
        other => return Err(CliError::Config(format!("{} is not a train run", other.name()))),
    };
    existing(&trained_on.with_file_name(TEST_FILE))
}

fn resolve_checkpoint(arg: &Option<PathBuf>, root: &Path) -> CliResult<PathBuf> {
    match arg {
        Some(p) => existing(p),
        None => from_latest(root, "train", CHECKPOINT_FILE),
    }
}

fn resolve_gen(a: &GenSynthArgs) -> CliResult<Job> {
    let (generator, test_pairs) = a.resolve();
    generator.validate()?;
    if test_pairs == 0 || test_pairs >= generator.n_pairs {
        return Err(CliError::Config("need at least one training and one test pair".into()));
    }
    Ok(Job::GenSynth { generator, test_pairs })
}

fn resolve_train(a: &TrainArgs, root: &Path) -> CliResult<Job> {
    let data = match &a.data {
        Some(p) => existing(p)?,
        None => from_latest(root, "gen-synth", TRAIN_FILE)?,
    };
    let (config, resume) = match &a.resume {
        Some(p) => {
            let p = existing(p)?;
            let mut cfg = load_checkpoint(&p)?.header.config;
            // run length may be extended; everything else stays
            if let Some(e) = a.model.epochs {
                cfg.epochs = e;
            }
            if a.model.max_steps.is_some() {
                cfg.max_steps = a.model.max_steps;
            }
            cfg.validate()?;
            (cfg, Some(p))
        }
        None => (a.model.config(read_data(&data)?.d, &a.ablate)?, None),
    };
    Ok(Job::Train { data, config, resume })
}

fn resolve_eval(a: &EvalArgs, root: &Path) -> CliResult<Job> {
    let checkpoint = resolve_checkpoint(&a.checkpoint, root)?;
    let data = match &a.data {
        Some(p) => existing(p)?,
        None => test_data_for(&checkpoint)?,
    };
    let seed = load_checkpoint(&checkpoint)?.header.config.seed;
    Ok(Job::Eval { checkpoint, data, aggregation: a.aggregation.into(), seed })
}

fn resolve_ablate(a: &AblateArgs, root: &Path) -> CliResult<Job> {
    let pick = |arg: &Option<PathBuf>, file: &str| match arg {
        Some(p) => existing(p),
        None => from_latest(root, "gen-synth", file),
    };
    let train = pick(&a.train, TRAIN_FILE)?;
    let test = pick(&a.test, TEST_FILE)?;
    let config = a.model.config(read_data(&train)?.d, &[])?;
    let threads = a
        .threads
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    Ok(Job::Ablate { train, test, config, threads, aggregation: a.aggregation.into() })
}

fn resolve_bench(a: &BenchArgs) -> CliResult<Job> {
    let p = a.model.profile.defaults();
    let (data, d) = match &a.data {
        Some(path) => {
            let path = existing(path)?;
            let d = read_data(&path)?.d;
            (BenchData::File(path), d)
        }
        None => {
            let synth = SyntheticConfig {
                n_pairs: a.pairs,
                n_v: p.n_v,
                n_t: p.n_t,
                d: a.d,
                d_latent: p.d_latent.min(a.d),
                seed: a.model.seed,
                ..SyntheticConfig::default()
            };
            synth.validate()?;
            (BenchData::Synthetic(synth), a.d)
        }
    };
    if a.steps == 0 {
        return Err(CliError::Config("steps must be positive".into()));
    }
    let config = a.model.config(d, &[])?;
    Ok(Job::BenchModes { data, config, steps: a.steps })
}

fn resolve_inspect(a: &InspectArgs, root: &Path) -> CliResult<Job> {
    let checkpoint = resolve_checkpoint(&a.checkpoint, root)?;
    let data = match &a.data {
        Some(p) => existing(p)?,
        None => test_data_for(&checkpoint)?,
    };
    let seed = load_checkpoint(&checkpoint)?.header.config.seed;
    Ok(Job::Inspect { checkpoint, data, seed })
}

pub fn resolve(cmd: &Command, root: &Path) -> CliResult<Job> {
    match cmd {
        Command::GenSynth(a) => resolve_gen(a),
        Command::Train(a) => resolve_train(a, root),
        Command::Eval(a) => resolve_eval(a, root),
        Command::Ablate(a) => resolve_ablate(a, root),
        Command::BenchModes(a) => resolve_bench(a),
        Command::Inspect(a) => resolve_inspect(a, root),
    }
}

/// Creates a run directory under `root`, executes `job` in it and writes
/// the final manifest.
pub fn run_job(job: &Job, argv: Vec<String>, root: &Path) -> CliResult<RunManifest> {
    let run = RunDir::create(root, job, argv)?;
    let outputs = match job {
        Job::GenSynth { generator, test_pairs } => exec_gen(&run, generator, *test_pairs)?,
        Job::Train { data, config, resume } => exec_train(&run, data, config, resume.as_deref())?,
        Job::Eval { checkpoint, data, aggregation, .. } => exec_eval(&run, checkpoint, data, *aggregation)?,
        Job::Ablate { train, test, config, threads, aggregation } => {
            exec_ablate(&run, train, test, config, *threads, *aggregation)?
        }
        Job::BenchModes { data, config, steps } => exec_bench(&run, data, config, *steps)?,
        Job::Inspect { checkpoint, data, .. } => exec_inspect(&run, checkpoint, data)?,
    };
    run.finish(outputs)
}

fn exec_gen(run: &RunDir, generator: &SyntheticConfig, test_pairs: usize) -> CliResult<Vec<PathBuf>> {
    let (all, _) = generate_synthetic(generator)?;
    let (train, test) = all.split_images(generator.n_pairs - test_pairs)?;
    let mut out = Vec::new();
    for (batch, file, sidecar) in [(&train, TRAIN_FILE, "train.dataset.json"), (&test, TEST_FILE, "test.dataset.json")] {
        write_container(batch, run.file(file))?;
        write_manifest(&DatasetManifest::describe(batch, Some(generator)), run.file(sidecar))?;
        out.extend([run.file(file), run.file(sidecar)]);
    }
    say!(
        "{} train / {} test pairs, d = {}, {} patches, {} words",
        train.pairs.len(),
        test.pairs.len(),
        generator.d,
        generator.n_v,
        generator.n_t
    );
    Ok(out)
}

/// Trains to completion, reporting once per epoch.
pub fn train_to_end(trainer: &mut Trainer, data: &EmbeddingBatch, verbose: bool) -> CliResult<()> {
    let total = trainer.total_steps(data);
    let spe = trainer.steps_per_epoch(data);
    while trainer.step < total {
        let next = (trainer.step / spe + 1) * spe;
        trainer.run_until(data, next)?;
        if verbose {
            let last = trainer.history.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            eprintln!("epoch {:>3}  step {:>6}  total {last:.5}", trainer.step.div_ceil(spe), trainer.step);
        }
    }
    Ok(())
}

fn write_histories(dir: &Path, history: &[StepRecord]) -> CliResult<Vec<PathBuf>> {
    let (m, t) = (dir.join("metrics.csv"), dir.join("timing.csv"));
    fs::write(&m, metrics_csv(history))?;
    fs::write(&t, timing_csv(history))?;
    Ok(vec![m, t])
}

fn exec_train(run: &RunDir, data: &Path, config: &TrainConfig, resume: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let batch = read_data(data)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(&load_checkpoint(p)?, &batch)?;
            t.config.epochs = config.epochs;
            t.config.max_steps = config.max_steps;
            t
        }
        None => Trainer::new(config.clone(), &batch)?,
    };
    train_to_end(&mut trainer, &batch, true)?;
    let mut out = write_histories(&run.path, &trainer.history)?;
    let ckpt = run.file(CHECKPOINT_FILE);
    save_checkpoint(&trainer.checkpoint()?, &ckpt)?;
    out.extend([ckpt.clone(), ckpt.with_extension("json")]);
    if let Some(last) = trainer.history.last() {
        say!("{} steps, final total loss {:.5}", trainer.step, last.loss.total);
    }
    Ok(out)
}

fn load_model(checkpoint: &Path, data: &EmbeddingBatch) -> CliResult<CddsModel> {
    let model = CddsModel::from_checkpoint(&load_checkpoint(checkpoint)?)?;
    if (model.d, model.n_v, model.n_t) != (data.d, data.n_v, data.n_t) {
        return Err(CliError::Config(format!(
            "checkpoint expects d = {}, {} patches, {} words; data has {}, {}, {}",
            model.d, model.n_v, model.n_t, data.d, data.n_v, data.n_t
        )));
    }
    Ok(model)
}

pub fn report_line(r: &RetrievalReport) -> String {
    let (a, b) = (&r.image_to_text, &r.text_to_image);
    format!(
        "i2t R@1 {:.1} R@5 {:.1} R@10 {:.1} | t2i R@1 {:.1} R@5 {:.1} R@10 {:.1} | rSum {:.1}",
        a.r1, a.r5, a.r10, b.r1, b.r5, b.r10, r.rsum
    )
}

fn exec_eval(run: &RunDir, checkpoint: &Path, data: &Path, agg: Aggregation) -> CliResult<Vec<PathBuf>> {
    let batch = read_data(data)?;
    let report = evaluate(&load_model(checkpoint, &batch)?, &batch, agg)?;
    let (json, csv) = (run.file("report.json"), run.file("report.csv"));
    report.write(&json, &csv)?;
    say!("{}", report_line(&report));
    Ok(vec![json, csv])
}

/// Percentage change of `rsum` relative to `base`.
pub fn change_rate(rsum: f64, base: f64) -> f64 {
    if base == 0.0 {
        return 0.0;
    }
    100.0 * (rsum - base) / base
}

pub fn variant_name(a: Option<Ablation>) -> String {
    match a {
        None => "full".into(),
        Some(a) => format!("w/o {a}"),
    }
}

/// One row per variant, full model first; `cr` relative to the full rSum.
pub fn ablation_table(rows: &[(String, RetrievalReport)]) -> String {
    let base = rows.first().map_or(0.0, |r| r.1.rsum);
    let mut s = String::from("variant,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,rsum,cr\n");
    for (name, r) in rows {
        let (a, b) = (&r.image_to_text, &r.text_to_image);
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{},{:.2}",
            a.r1,
            a.r5,
            a.r10,
            b.r1,
            b.r5,
            b.r10,
            r.rsum,
            change_rate(r.rsum, base)
        );
    }
    s
}

pub type AblationResult = (String, RetrievalReport, Vec<StepRecord>);

/// Trains the full model and each single ablation, `threads` at a time.
pub fn run_ablations(
    train: &EmbeddingBatch,
    test: &EmbeddingBatch,
    config: &TrainConfig,
    threads: usize,
    agg: Aggregation,
) -> CliResult<Vec<AblationResult>> {
    let variants: Vec<Option<Ablation>> = std::iter::once(None).chain(Ablation::ALL.map(Some)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<AblationResult>>>> = Mutex::new(variants.iter().map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..threads.clamp(1, variants.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&v) = variants.get(k) else { break };
                let run = || -> CliResult<AblationResult> {
                    let cfg = match v {
                        Some(a) => config.clone().with_ablation(a),
                        None => config.clone(),
                    };
                    let mut trainer = Trainer::new(cfg, train)?;
                    train_to_end(&mut trainer, train, false)?;
                    let report = evaluate(&trainer.model, test, agg)?;
                    eprintln!("{:<10} {}", variant_name(v), report_line(&report));
                    Ok((variant_name(v), report, trainer.history))
                };
                let r = run();
                results.lock().expect("no poisoned workers")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every variant ran"))
        .collect()
}

fn exec_ablate(
    run: &RunDir,
    train: &Path,
    test: &Path,
    config: &TrainConfig,
    threads: usize,
    agg: Aggregation,
) -> CliResult<Vec<PathBuf>> {
    let (train, test) = (read_data(train)?, read_data(test)?);
    let results = run_ablations(&train, &test, config, threads, agg)?;
    let mut out = Vec::new();
    for (name, report, history) in &results {
        let dir = run.file(&name.replace("w/o ", "without-"));
        fs::create_dir_all(&dir)?;
        out.extend(write_histories(&dir, history)?);
        let (json, csv) = (dir.join("report.json"), dir.join("report.csv"));
        report.write(&json, &csv)?;
        out.extend([json, csv]);
    }
    let rows: Vec<(String, RetrievalReport)> = results.into_iter().map(|(n, r, _)| (n, r)).collect();
    let table = ablation_table(&rows);
    let path = run.file("ablation.csv");
    fs::write(&path, &table)?;
    say!("{}", table.trim_end());
    out.push(path);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub mode: CorrelationMode,
    pub steps: usize,
    /// Mean wall time of a whole training step.
    pub batch_wall_ms: f64,
    /// Mean time of the correlation stage within a step.
    pub batch_corr_ms: f64,
    /// One-off full-dataset computation before the first step.
    pub setup_corr_ms: f64,
    pub correlation_calls: usize,
}

pub fn time_modes(data: &EmbeddingBatch, config: &TrainConfig, steps: usize) -> CliResult<Vec<ModeTiming>> {
    CorrelationMode::ALL
        .into_iter()
        .map(|mode| {
            let cfg = TrainConfig { correlation_mode: mode, max_steps: Some(steps), ..config.clone() };
            let mut trainer = Trainer::new(cfg, data)?;
            trainer.run_until(data, steps)?;
            let n = trainer.history.len().max(1) as f64;
            Ok(ModeTiming {
                mode,
                steps: trainer.history.len(),
                batch_wall_ms: trainer.history.iter().map(|r| r.wall_ms).sum::<f64>() / n,
                batch_corr_ms: trainer.history.iter().map(|r| r.corr_ms).sum::<f64>() / n,
                setup_corr_ms: trainer.setup_corr_ms,
                correlation_calls: trainer.correlation_calls,
            })
        })
        .collect()
}

pub fn timing_table(rows: &[ModeTiming]) -> String {
    let mut s = String::from("mode,steps,batch_wall_ms,batch_corr_ms,setup_corr_ms,correlation_calls\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{}",
            r.mode, r.steps, r.batch_wall_ms, r.batch_corr_ms, r.setup_corr_ms, r.correlation_calls
        );
    }
    s
}

fn exec_bench(run: &RunDir, data: &BenchData, config: &TrainConfig, steps: usize) -> CliResult<Vec<PathBuf>> {
    let batch = match data {
        BenchData::Synthetic(cfg) => generate_synthetic(cfg)?.0,
        BenchData::File(p) => read_data(p)?,
    };
    let rows = time_modes(&batch, config, steps)?;
    let table = timing_table(&rows);
    let path = run.file("bench_modes.csv");
    fs::write(&path, &table)?;
    say!("{}", table.trim_end());
    Ok(vec![path])
}

pub fn matrix_csv(t: &Tensor) -> CliResult<String> {
    let (r, _) = t.dims2()?;
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn exec_inspect(run: &RunDir, checkpoint: &Path, data: &Path) -> CliResult<Vec<PathBuf>> {
    let batch = read_data(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = load_model(checkpoint, &batch)?;
    let vs = model.semantic(&batch.stacked_images()?, Modality::Image)?;
    let ts = model.semantic(&batch.stacked_texts()?, Modality::Text)?;
    let state = CorrelationState::compute(&vs, &ts, ckpt.header.config.bins)?;
    let alpha_v = model.store.get(model.alpha_v).data().to_vec();
    let alpha_t = model.store.get(model.alpha_t).data().to_vec();
    let sv = sparsify(&state.s, &alpha_v, Axis::Row)?;
    let st = sparsify(&state.s, &alpha_t, Axis::Column)?;

    let mut out = Vec::new();
    let mut put = |name: &str, body: String| -> CliResult<()> {
        let p = run.file(name);
        fs::write(&p, body)?;
        out.push(p);
        Ok(())
    };
    put("correlation.csv", matrix_csv(&state.s)?)?;
    put("mask_image.csv", matrix_csv(&sv.mask)?)?;
    put("mask_text.csv", matrix_csv(&st.mask)?)?;
    let mut thr = String::from("index,alpha_image,threshold_image,alpha_text,threshold_text\n");
    for k in 0..model.d {
        let _ = writeln!(thr, "{k},{},{},{},{}", alpha_v[k], sv.thresholds[k], alpha_t[k], st.thresholds[k]);
    }
    put("thresholds.csv", thr)?;

    // Both modalities projected onto shared axes.
    let proj = pca_2d(&Tensor::vstack(&[&vs, &ts])?)?;
    let mut csv = String::from("modality,item,row,x,y\n");
    let n_img_rows = vs.rows()?;
    for r in 0..proj.rows()? {
        let (modality, item, row) = if r < n_img_rows {
            ("image", r / batch.n_v, r % batch.n_v)
        } else {
            let k = r - n_img_rows;
            ("text", k / batch.n_t, k % batch.n_t)
        };
        let _ = writeln!(csv, "{modality},{item},{row},{},{}", proj.get(r, 0), proj.get(r, 1));
    }
    put("projection.csv", csv)?;
    let kept = |m: &Tensor| m.data().iter().filter(|&&v| v > 0.0).count();
    say!(
        "d = {}, kept {} image-side and {} text-side correlations",
        model.d,
        kept(&sv.mask),
        kept(&st.mask)
    );
    Ok(out)
}
