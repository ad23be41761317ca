//! Turns run artifacts into plain x,y text files any plotting tool can
//! read: per-task scatter blocks of generated tasks, pre/post-adaptation
//! prediction curves on the dense query grid, and training loss curves.

use std::path::Path;

use anyhow::{bail, Context, Result};
use atu_core::meta::MetaModel;
use atu_core::tasks::sample_meta_test_set;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::runner::{GENERATED_FILE, LOSS_CURVE_FILE};
use crate::taskio;

/// One comma-separated block of (x, y) pairs per dumped task, support
/// samples first, blocks separated by blank lines.
pub fn generated_tasks(run_dir: &Path, out: &Path) -> Result<()> {
    let tasks = taskio::read_task_vectors(&run_dir.join(GENERATED_FILE))?;
    if tasks.is_empty() {
        bail!("no generated tasks in {}", run_dir.display());
    }
    let mut text = String::from("# one block per generated task; columns x,y\n");
    for (i, t) in tasks.iter().enumerate() {
        text.push_str(&format!("# task {i}\n"));
        for pair in t.values.chunks(2) {
            text.push_str(&format!("{},{}\n", pair[0], pair[1]));
        }
        text.push('\n');
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Samples one meta-test task with the given seed, adapts the checkpointed
/// learner on its support set, and writes the dense-grid predictions:
/// columns `x,true_y,pre_adapt,post_adapt`, support points echoed as
/// comments.
pub fn adaptation_curve(ckpt_path: &Path, out: &Path, seed: u64, grid: usize) -> Result<()> {
    let loaded = checkpoint::load_trainer(ckpt_path)?;
    let trainer = loaded.trainer;
    let model: &MetaModel = &trainer.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let task = sample_meta_test_set(&trainer.ranges, 1, trainer.k_support, grid, &mut rng)?
        .into_iter()
        .next()
        .expect("one task requested");

    let tape = atu_core::autodiff::Tape::new();
    let placed = model.place(&tape)?;
    let tt = model.task_tensors(&tape, &task)?;
    let phi = model.inner_adapt(
        &tape,
        &placed,
        &tt.support_x,
        &tt.support_y,
        model.inner_steps,
        false,
    )?;
    let pre = model.forward(&tape, &placed.theta, &tt.query_x)?.values();
    let post = model.forward(&tape, &phi, &tt.query_x)?.values();

    let mut text = String::new();
    for (x, y) in task.support_x.iter().zip(&task.support_y) {
        text.push_str(&format!("# support {},{}\n", x[0], y[0]));
    }
    text.push_str("x,true_y,pre_adapt,post_adapt\n");
    for (i, (x, y)) in task.query_x.iter().zip(&task.query_y).enumerate() {
        text.push_str(&format!("{},{},{},{}\n", x[0], y[0], pre[i], post[i]));
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Copies the loss curve out of a run directory, checking the iteration
/// column is the strictly increasing append order.
pub fn loss_curve(run_dir: &Path, out: &Path) -> Result<()> {
    let path = run_dir.join(LOSS_CURVE_FILE);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut last = 0usize;
    for (i, line) in text.lines().enumerate().skip(1) {
        let first = line
            .split(',')
            .next()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let it: usize = first
            .parse()
            .with_context(|| format!("{}:{}: bad iteration '{first}'", path.display(), i + 1))?;
        if it <= last {
            bail!(
                "{}:{}: iteration {it} does not increase past {last}",
                path.display(),
                i + 1
            );
        }
        last = it;
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use atu_core::tasks::TaskVector;

    #[test]
    fn generated_blocks_match_task_count() {
        let dir = tempfile::tempdir().unwrap();
        let tasks: Vec<TaskVector> = (0..5)
            .map(|i| TaskVector {
                k_support: 2,
                k_query: 1,
                values: vec![i as f64; 6],
            })
            .collect();
        taskio::write_task_vectors(&dir.path().join(GENERATED_FILE), &tasks).unwrap();
        let out = dir.path().join("plot.txt");
        generated_tasks(dir.path(), &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.matches("# task ").count(), 5);
        // 3 samples per task.
        assert_eq!(text.lines().filter(|l| l.contains(',') && !l.starts_with('#')).count(), 15);
    }

    #[test]
    fn loss_curve_requires_increasing_iterations() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(LOSS_CURVE_FILE),
            "cycle,meta_loss,upsampler_loss,emd_term\n1,0.5,,\n2,0.4,,\n",
        )
        .unwrap();
        let out = dir.path().join("curve.csv");
        loss_curve(dir.path(), &out).unwrap();
        assert!(std::fs::read_to_string(&out).unwrap().contains("2,0.4"));

        std::fs::write(
            dir.path().join(LOSS_CURVE_FILE),
            "cycle,meta_loss,upsampler_loss,emd_term\n2,0.5,,\n2,0.4,,\n",
        )
        .unwrap();
        assert!(loss_curve(dir.path(), &out).is_err());
    }
}
