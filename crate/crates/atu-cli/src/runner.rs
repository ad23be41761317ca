//! End-to-end experiment execution: builds the trainer for a
//! configuration, runs it with periodic checkpointing, evaluates the
//! result, and writes artifacts (config echo, loss curve, checkpoint,
//! generated-task dump, results file) into the run directory.
//!
//! Random streams per seed: 0 task sampling, 1 up-sampler/augmentation,
//! 2 parameter initialization, 3 evaluation tasks, 4 classification base
//! pool. A rerun with the same config and seed reproduces every metric
//! bit-exactly; an interrupted regression run resumes from its checkpoint
//! and lands on the same final state. Classification runs are short and
//! simply restart if interrupted.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use atu_core::classify::{class_atu_train, class_maml_train, ClassArch, ClassUpsamplerParams};
use atu_core::meta::{self, EvalReport, LossKind, MetaModel};
use atu_core::tasks::{sample_meta_test_set, sample_synth_class_task, task_to_vector, ClassPool,
    DomainRanges, Task};
use atu_core::upsampler::{fps_patch, upsample, AtuTrainer, PerturbationSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Augment, DomainPreset, ExperimentConfig, Learner, Track};
use crate::results::{write_results, ResultRow};
use crate::taskio;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const RESULTS_FILE: &str = "results.csv";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const GENERATED_FILE: &str = "generated_tasks.txt";

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs one experiment end to end, returning its result rows (also written
/// to `<out-dir>/results.csv`).
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_canonical_string())?;
    let rows = match cfg.track {
        Track::Regression => run_regression(cfg, &out_dir)?,
        Track::SynthClass => run_synth_class(cfg, &out_dir)?,
    };
    write_results(&out_dir.join(RESULTS_FILE), &rows)?;
    Ok(rows)
}

/// Builds a fresh regression trainer for the configuration (initialization
/// stream 2; task and up-sampler streams are derived inside from the seed).
fn build_regression_trainer(cfg: &ExperimentConfig) -> Result<AtuTrainer> {
    let mut init_rng = stream_rng(cfg.seed, 2);
    let mut model = MetaModel::new(
        &[1, 40, 40, 1],
        LossKind::SquaredError,
        cfg.inner_steps,
        cfg.inner_lr,
        &mut init_rng,
    )?;
    if cfg.learner == Learner::MetaSgd {
        model = model.into_learned_rates();
    }
    Ok(AtuTrainer::new(
        cfg.augment.train_mode(),
        model,
        cfg.atu_config(),
        DomainRanges::training_default(),
        cfg.k_support,
        cfg.k_query,
        cfg.meta_batch,
        cfg.meta_lr,
        cfg.seed,
        &mut init_rng,
    )?)
}

/// Keeps the header and the first `cycles` data lines; drops anything a
/// crashed run appended past the last checkpoint.
fn trim_loss_curve(path: &Path, cycles: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let keep: Vec<&str> = text.lines().take(1 + cycles).collect();
    std::fs::write(path, keep.join("\n") + "\n")?;
    Ok(())
}

fn run_regression(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let digest = cfg.digest();
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let curve_path = out_dir.join(LOSS_CURVE_FILE);

    let mut trainer = if ckpt_path.exists() {
        let loaded = checkpoint::load_trainer(&ckpt_path)?;
        ensure!(
            loaded.digest == digest && loaded.seed == cfg.seed,
            "checkpoint in {} belongs to digest {} seed {}, not {} seed {}",
            out_dir.display(),
            loaded.digest,
            loaded.seed,
            digest,
            cfg.seed
        );
        trim_loss_curve(&curve_path, loaded.trainer.cycles_done)?;
        loaded.trainer
    } else {
        std::fs::write(&curve_path, "cycle,meta_loss,upsampler_loss,emd_term\n")?;
        build_regression_trainer(cfg)?
    };

    let total_cycles = cfg.cycles();
    ensure!(
        trainer.cycles_done <= total_cycles,
        "checkpoint has {} cycles done but the config asks for {total_cycles}",
        trainer.cycles_done
    );
    let mut curve = OpenOptions::new().append(true).open(&curve_path)?;
    while trainer.cycles_done < total_cycles {
        let report = trainer.run_cycle()?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            curve,
            "{},{},{},{}",
            trainer.cycles_done,
            report.mean_meta_loss,
            fmt_opt(report.upsampler_loss),
            fmt_opt(report.emd_term)
        )?;
        if trainer.cycles_done % cfg.checkpoint_every == 0 || trainer.cycles_done == total_cycles {
            curve.flush()?;
            checkpoint::save_trainer(&ckpt_path, &digest, cfg.seed, &trainer)?;
        }
    }
    curve.flush()?;
    checkpoint::save_trainer(&ckpt_path, &digest, cfg.seed, &trainer)?;

    if cfg.augment != Augment::None {
        dump_generated_tasks(&mut trainer, out_dir)?;
    }

    let report = eval_regression_model(
        &trainer.model,
        cfg.domain,
        cfg.eval_tasks,
        cfg.eval_query,
        cfg.k_support,
        cfg.inner_steps,
        cfg.seed,
    )?;
    Ok(vec![ResultRow {
        digest,
        label: cfg.label.clone(),
        metric: String::from("mse"),
        mean: report.mean,
        ci95: report.half_width,
        n: report.n,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    }])
}

/// Writes one final batch of generated tasks (a full pool pass through the
/// trained up-sampler) for plotting.
fn dump_generated_tasks(trainer: &mut AtuTrainer, out_dir: &Path) -> Result<()> {
    let mut pool = Vec::with_capacity(trainer.cfg.pool_size);
    for _ in 0..trainer.cfg.pool_size {
        let task = atu_core::tasks::sample_sine_task(
            &trainer.ranges,
            trainer.k_support,
            trainer.k_query,
            &mut trainer.task_rng,
        )?;
        pool.push(task_to_vector(&task)?);
    }
    let patch = fps_patch(&pool, trainer.cfg.n_patch)?;
    let z = PerturbationSet::sample(trainer.cfg.r_detail, &mut trainer.up_rng);
    let generated = upsample(&trainer.upsampler, &patch, &z)?;
    let vectors = generated
        .iter()
        .map(task_to_vector)
        .collect::<Result<Vec<_>, _>>()?;
    taskio::write_task_vectors(&out_dir.join(GENERATED_FILE), &vectors)
}

/// Meta-test protocol: fresh tasks from the chosen domain (stream 3),
/// dense query grid, adaptation on the first `k_support` supports.
pub fn eval_regression_model(
    model: &MetaModel,
    domain: DomainPreset,
    eval_tasks: usize,
    eval_query: usize,
    k_support: usize,
    inner_steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = stream_rng(seed, 3);
    let tasks = sample_meta_test_set(&domain.ranges(), eval_tasks, k_support, eval_query, &mut rng)?;
    Ok(meta::evaluate(model, &tasks, k_support, inner_steps)?)
}

/// Evaluates a checkpointed learner on a (possibly shifted) domain without
/// further training.
pub fn eval_checkpoint(
    ckpt_path: &Path,
    domain: DomainPreset,
    eval_tasks: usize,
    eval_query: usize,
    seed: u64,
) -> Result<ResultRow> {
    let start = Instant::now();
    let loaded = checkpoint::load_trainer(ckpt_path)?;
    let trainer = loaded.trainer;
    let report = eval_regression_model(
        &trainer.model,
        domain,
        eval_tasks,
        eval_query,
        trainer.k_support,
        trainer.model.inner_steps,
        seed,
    )?;
    Ok(ResultRow {
        digest: loaded.digest,
        label: format!("eval-{domain}"),
        metric: String::from("mse"),
        mean: report.mean,
        ci95: report.half_width,
        n: report.n,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed,
    })
}

fn run_synth_class(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let digest = cfg.digest();
    let ccfg = cfg.class_atu_config();
    let pool = ClassPool::sample(
        cfg.class_pool_classes,
        cfg.class_dim,
        cfg.class_stddev,
        &mut stream_rng(cfg.seed, 4),
    );
    let mut init_rng = stream_rng(cfg.seed, 2);
    let mut model = MetaModel::new(
        &[cfg.class_dim, 64, 64, cfg.class_n_way],
        LossKind::CrossEntropy,
        cfg.class_inner_steps,
        cfg.inner_lr,
        &mut init_rng,
    )?;
    if cfg.learner == Learner::MetaSgd {
        model = model.into_learned_rates();
    }
    let mut task_rng = stream_rng(cfg.seed, 0);

    let mut curve = String::from("iteration,meta_loss,upsampler_loss\n");
    match cfg.augment {
        Augment::None => {
            let losses = class_maml_train(
                &mut model,
                &pool,
                cfg.class_n_way,
                cfg.class_k_support,
                cfg.class_k_query,
                &ccfg,
                cfg.class_iterations,
                &mut task_rng,
            )?;
            for (i, loss) in losses.iter().enumerate() {
                curve.push_str(&format!("{},{loss},\n", i + 1));
            }
        }
        Augment::Tu | Augment::Atu => {
            let arch = ClassArch {
                channels: cfg.class_channels,
                ..ClassArch::with_default_widths(
                    cfg.class_dim,
                    cfg.class_n_way,
                    cfg.class_k_support,
                    cfg.class_k_query,
                    &ccfg,
                )
            };
            let mut up = ClassUpsamplerParams::new(arch, &mut init_rng);
            let mut aug_rng = stream_rng(cfg.seed, 1);
            let stats = class_atu_train(
                &mut model,
                &mut up,
                &pool,
                &ccfg,
                cfg.class_iterations,
                &mut task_rng,
                &mut aug_rng,
            )?;
            for (i, (meta, ups)) in stats
                .meta_losses
                .iter()
                .zip(&stats.upsampler_losses)
                .enumerate()
            {
                curve.push_str(&format!("{},{meta},{ups}\n", i + 1));
            }
        }
    }
    std::fs::write(out_dir.join(LOSS_CURVE_FILE), curve)?;

    let mut eval_rng = stream_rng(cfg.seed, 3);
    let tasks: Vec<Task> = (0..cfg.class_eval_tasks)
        .map(|_| {
            sample_synth_class_task(
                &pool,
                cfg.class_n_way,
                cfg.class_k_support,
                cfg.class_eval_query,
                &mut eval_rng,
            )
        })
        .collect::<Result<_, _>>()?;
    let report = meta::evaluate(&model, &tasks, cfg.class_k_support, cfg.class_inner_steps)?;
    let accuracy = report
        .accuracy_mean
        .context("classifier evaluation must report accuracy")?;
    let accuracy_ci = report.accuracy_half_width.unwrap_or(0.0);
    let wall = start.elapsed().as_secs_f64();
    Ok(vec![
        ResultRow {
            digest: digest.clone(),
            label: cfg.label.clone(),
            metric: String::from("accuracy"),
            mean: accuracy,
            ci95: accuracy_ci,
            n: report.n,
            wall_seconds: wall,
            seed: cfg.seed,
        },
        ResultRow {
            digest,
            label: cfg.label.clone(),
            metric: String::from("query-ce"),
            mean: report.mean,
            ci95: report.half_width,
            n: report.n,
            wall_seconds: wall,
            seed: cfg.seed,
        },
    ])
}

/// Runs one configuration per value of `axis`, all with the same seed, and
/// writes the merged rows to `<out-dir>/sweep-results.csv`. Runs execute
/// sequentially (model state is single-threaded; see the core trainer).
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<ResultRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value for axis '{axis}'");
    }
    // Recognized-axis check before any work.
    base.clone()
        .set(axis, &values[0])
        .with_context(|| format!("axis '{axis}' is not a recognized config field"))?;
    let sweep_dir = PathBuf::from(&base.out_dir);
    std::fs::create_dir_all(&sweep_dir)?;
    let mut merged = Vec::new();
    for value in values {
        let mut cfg = base.clone();
        cfg.set(axis, value)?;
        cfg.label = format!("{axis}={value}");
        cfg.out_dir = sweep_dir
            .join(format!("{axis}-{value}"))
            .to_string_lossy()
            .into_owned();
        merged.extend(run(&cfg)?);
    }
    write_results(&sweep_dir.join("sweep-results.csv"), &merged)?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    /// A configuration small enough to train in well under a second.
    pub fn tiny_regression(dir: &Path, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.set("r-coarse", "2").unwrap();
        cfg.set("r-detail", "2").unwrap();
        cfg.set("n-patch", "2").unwrap();
        cfg.set("pool-size", "8").unwrap();
        cfg.set("meta-batch", "2").unwrap();
        cfg.set("outer-steps", "8").unwrap(); // 2 cycles
        cfg.set("k-support", "3").unwrap();
        cfg.set("k-query", "3").unwrap();
        cfg.set("eval-tasks", "4").unwrap();
        cfg.set("eval-query", "7").unwrap();
        cfg.set("checkpoint-every", "1").unwrap();
        cfg.set("augment", "atu").unwrap();
        cfg.seed = seed;
        cfg.out_dir = dir.to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn regression_run_writes_all_artifacts_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let rows1 = run(&tiny_regression(&d1, 5)).unwrap();
        assert_eq!(rows1.len(), 1);
        assert_eq!(rows1[0].metric, "mse");
        assert!(rows1[0].mean.is_finite());
        for f in [CONFIG_FILE, RESULTS_FILE, LOSS_CURVE_FILE, CHECKPOINT_FILE, GENERATED_FILE] {
            assert!(d1.join(f).exists(), "missing {f}");
        }
        let curve = std::fs::read_to_string(d1.join(LOSS_CURVE_FILE)).unwrap();
        assert_eq!(curve.lines().count(), 3); // header + 2 cycles
        let dumped = taskio::read_task_vectors(&d1.join(GENERATED_FILE)).unwrap();
        assert_eq!(dumped.len(), 8); // r * n_patch

        let d2 = dir.path().join("b");
        let rows2 = run(&tiny_regression(&d2, 5)).unwrap();
        assert_eq!(rows1[0].mean.to_bits(), rows2[0].mean.to_bits());
        assert_eq!(rows1[0].digest, rows2[0].digest);
    }

    #[test]
    fn finished_run_is_a_no_op_to_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(dir.path(), 2);
        let rows1 = run(&cfg).unwrap();
        // Second invocation resumes from the final checkpoint: no cycles
        // left, evaluation repeats identically.
        let rows2 = run(&cfg).unwrap();
        assert_eq!(rows1[0].mean.to_bits(), rows2[0].mean.to_bits());
    }

    #[test]
    fn checkpoint_from_other_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(dir.path(), 2);
        run(&cfg).unwrap();
        let mut other = cfg.clone();
        other.set("eta3", "0.25").unwrap();
        let err = run(&other).unwrap_err().to_string();
        assert!(err.contains("belongs to digest"), "got: {err}");
    }

    #[test]
    fn synth_class_run_reports_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.set("track", "synth-class").unwrap();
        cfg.set("augment", "atu").unwrap();
        cfg.set("class-n-way", "2").unwrap();
        cfg.set("class-pool-classes", "5").unwrap();
        cfg.set("class-dim", "4").unwrap();
        cfg.set("class-k-query", "2").unwrap();
        cfg.set("class-k-memory", "2").unwrap();
        cfg.set("class-channels", "8").unwrap();
        cfg.set("class-iterations", "2").unwrap();
        cfg.set("class-eval-tasks", "6").unwrap();
        cfg.set("class-eval-query", "3").unwrap();
        cfg.set("meta-batch", "2").unwrap();
        cfg.seed = 9;
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        let rows = run(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metric, "accuracy");
        assert!((0.0..=1.0).contains(&rows[0].mean));
        assert_eq!(rows[1].metric, "query-ce");
    }

    #[test]
    fn sweep_shares_seed_and_merges_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny_regression(&dir.path().join("sweep"), 4);
        base.label = String::from("base");
        let rows = sweep(
            &base,
            "augment-ratio",
            &[String::from("0"), String::from("0.5")],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.seed == 4));
        assert_eq!(rows[0].label, "augment-ratio=0");
        assert_ne!(rows[0].digest, rows[1].digest);
        assert!(dir.path().join("sweep/sweep-results.csv").exists());

        assert!(sweep(&base, "augment-ratio", &[]).is_err());
        assert!(sweep(&base, "not-a-key", &[String::from("1")]).is_err());
    }
}
