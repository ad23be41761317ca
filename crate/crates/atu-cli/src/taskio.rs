//! Text format for dumped task sets (e.g. the generated tasks written at
//! the end of an augmented regression run).
//!
//! One task per line: `k_support k_query v0 v1 ... v_{2(ks+kq)-1}`, space
//! separated, where the values interleave (x, y) pairs — support samples
//! first, then query samples, matching the flattened task-vector layout.
//! Floats use shortest round-trip form, so read(write(t)) is bit-exact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use atu_core::tasks::TaskVector;

pub fn write_task_vectors(path: &Path, tasks: &[TaskVector]) -> Result<()> {
    let mut text = String::new();
    for t in tasks {
        text.push_str(&t.k_support.to_string());
        text.push(' ');
        text.push_str(&t.k_query.to_string());
        for v in &t.values {
            text.push(' ');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_task_vectors(path: &Path) -> Result<Vec<TaskVector>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let context = || format!("{}:{}", path.display(), i + 1);
        let k_support: usize = fields
            .next()
            .with_context(context)?
            .parse()
            .with_context(context)?;
        let k_query: usize = fields
            .next()
            .with_context(context)?
            .parse()
            .with_context(context)?;
        let values: Vec<f64> = fields
            .map(|f| f.parse().with_context(context))
            .collect::<Result<_>>()?;
        if values.len() != 2 * (k_support + k_query) {
            bail!(
                "{}: task line declares {}+{} samples but carries {} values",
                context(),
                k_support,
                k_query,
                values.len()
            );
        }
        out.push(TaskVector {
            k_support,
            k_query,
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.txt");
        let tasks = vec![
            TaskVector {
                k_support: 2,
                k_query: 1,
                values: vec![0.1 + 0.2, -1.5, 3.0, f64::MIN_POSITIVE, 2.5e-17, -0.0],
            },
            TaskVector {
                k_support: 1,
                k_query: 1,
                values: vec![1.0, 2.0, 3.0, 4.0],
            },
        ];
        write_task_vectors(&path, &tasks).unwrap();
        let back = read_task_vectors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&tasks) {
            assert_eq!(a.k_support, b.k_support);
            assert_eq!(a.k_query, b.k_query);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "2 1 0.5 0.5\n").unwrap();
        assert!(read_task_vectors(&path).is_err());
    }
}
