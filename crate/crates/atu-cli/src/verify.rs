//! Self-contained oracle and property checks, runnable any time via the
//! `verify` subcommand. Each check compares a fast implementation against
//! an independent reference (exhaustive search, central finite
//! differences, or a closed-form identity) on freshly generated random
//! instances. The acceptance suite reuses these helpers at larger sizes.

use anyhow::{ensure, Result};
use atu_core::autodiff::{ParamTensor, Tape};
use atu_core::emd::{matched_assignment, solve_assignment, PointSet};
use atu_core::meta::{LossKind, MetaModel};
use atu_core::tasks::{sample_sine_task, DomainRanges, Task};
use atu_core::upsampler::{train_upsampler, AtuConfig, UpsamplerArch, UpsamplerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum assignment cost by trying every permutation (reference for the
/// polynomial solver; factorial time, so keep `n` small).
pub fn brute_force_assignment_cost(costs: &[f64], n: usize) -> f64 {
    fn recurse(costs: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..n {
            if !used[col] {
                used[col] = true;
                recurse(costs, n, row + 1, used, acc + costs[row * n + col], best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    recurse(costs, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

/// Checks the assignment solver against exhaustive search on random
/// matrices with sizes cycling through `1..=max_n`.
pub fn check_emd_oracle(n_matrices: usize, max_n: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_matrices {
        let n = 1 + i % max_n;
        let costs: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 10.0).collect();
        let fast = solve_assignment(&costs, n)
            .map_err(|e| anyhow::anyhow!("solver failed on matrix {i}: {e}"))?
            .cost;
        let slow = brute_force_assignment_cost(&costs, n);
        ensure!(
            (fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()),
            "matrix {i} (n={n}): solver cost {fast} != exhaustive {slow}"
        );
    }
    Ok(())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, f64::max(a.abs(), b.abs()))
}

/// A smooth composite scalar function of a weight matrix, built twice: once
/// on a tape for reverse-mode gradients, once as a plain value for central
/// finite differences.
fn composite_value(w_values: &[f64], x_values: &[f64]) -> f64 {
    composite_graph(w_values, x_values).1
}

fn composite_graph(w_values: &[f64], x_values: &[f64]) -> (Vec<f64>, f64) {
    let tape = Tape::new();
    let w = tape
        .param(&ParamTensor::new("w", 2, 3, w_values.to_vec()))
        .unwrap();
    let x = tape.constant(3, 2, x_values.to_vec()).unwrap();
    let h = tape.matmul(&w, &x).unwrap();
    let s = tape.log_softmax_cols(&h).unwrap();
    let p = tape.exp(&s).unwrap();
    let q = tape.mul(&p, &h).unwrap();
    let lifted = tape.sqrt(&tape.exp(&tape.scale(&h, 0.1).unwrap()).unwrap()).unwrap();
    let z = tape.mean_all(&tape.add(&q, &lifted).unwrap()).unwrap();
    let g = tape.grad(&z, &[&w], false).unwrap();
    (g[0].values(), z.item())
}

/// Reverse-mode gradients of a smooth composite graph against central
/// finite differences. Returns the worst relative error seen.
pub fn check_autodiff_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let w: Vec<f64> = (0..6).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        let x: Vec<f64> = (0..6).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
        let (grad, _) = composite_graph(&w, &x);
        let eps = 1e-5;
        for k in 0..w.len() {
            let mut plus = w.clone();
            plus[k] += eps;
            let mut minus = w.clone();
            minus[k] -= eps;
            let fd = (composite_value(&plus, &x) - composite_value(&minus, &x)) / (2.0 * eps);
            let err = rel_err(grad[k], fd);
            ensure!(
                err < 1e-4,
                "instance {i} coordinate {k}: reverse {} vs central difference {fd} (rel {err:.2e})",
                grad[k]
            );
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn meta_objective(model: &MetaModel, task: &Task) -> f64 {
    let tape = Tape::new();
    let placed = model.place(&tape).unwrap();
    let tt = model.task_tensors(&tape, task).unwrap();
    let phi = model
        .inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, 1, false)
        .unwrap();
    model.loss(&tape, &phi, &tt.query_x, &tt.query_y).unwrap().item()
}

/// Full second-order meta-gradient (one adaptation step, query loss)
/// against central finite differences over every initial parameter.
/// Returns the worst relative error.
pub fn check_meta_grad_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = DomainRanges::training_default();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let model = MetaModel::new(&[1, 4, 1], LossKind::SquaredError, 1, 0.01, &mut rng)?;
        let task = sample_sine_task(&ranges, 3, 4, &mut rng)?;

        let tape = Tape::new();
        let placed = model.place(&tape)?;
        let tt = model.task_tensors(&tape, &task)?;
        let phi = model.inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, 1, true)?;
        let loss = model.loss(&tape, &phi, &tt.query_x, &tt.query_y)?;
        let refs: Vec<&_> = placed.theta.iter().collect();
        let grads = tape.grad(&loss, &refs, false)?;

        let eps = 1e-5;
        for (p, g) in grads.iter().enumerate() {
            let gv = g.values();
            for k in 0..gv.len() {
                let perturbed = |delta: f64| {
                    let mut m = model.clone();
                    m.trainables_mut()[p].values[k] += delta;
                    meta_objective(&m, &task)
                };
                let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                let err = rel_err(gv[k], fd);
                ensure!(
                    err < 1e-4,
                    "instance {i} tensor {p} coord {k}: meta-gradient {} vs \
                     central difference {fd} (rel {err:.2e})",
                    gv[k]
                );
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

/// Outcome of the interpolated-linear-task identity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyOneReport {
    pub pairs: usize,
    /// Worst `lhs - bound` (negative when the inequality holds strictly).
    pub max_excess: f64,
    /// Worst residual at the interpolation endpoints.
    pub max_endpoint: f64,
}

/// For random pairs of linear tasks mixed along the optimal matching, the
/// fit residual of the interpolated parameters obeys
/// `sum_j ||y_u_j - theta_u x_u_j|| <= n^2 * lambda(1-lambda) * ||W1-W2||_F * d`
/// where `d` is the input-set distance under the optimal matching, and is
/// exactly zero at the endpoints. Verifies both over a lambda grid.
pub fn check_property_one(n_pairs: usize, seed: u64) -> Result<PropertyOneReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut report = PropertyOneReport {
        pairs: n_pairs,
        max_excess: f64::NEG_INFINITY,
        max_endpoint: 0.0,
    };
    for i in 0..n_pairs {
        let d = 1 + rng.gen_range(0..3usize);
        let m = 1 + rng.gen_range(0..3usize);
        let n = 2 + rng.gen_range(0..5usize);
        let mat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..m * d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect()
        };
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect())
                .collect()
        };
        let (w1, w2) = (mat(&mut rng), mat(&mut rng));
        let (x1, x2) = (pts(&mut rng), pts(&mut rng));
        let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
            (0..m)
                .map(|r| (0..d).map(|c| w[r * d + c] * x[c]).sum())
                .collect()
        };

        let asg = matched_assignment(&PointSet::new(&x1)?, &PointSet::new(&x2)?)?;
        let d_emd = asg.cost / n as f64;
        let dw_frob = {
            let s: f64 = w1
                .iter()
                .zip(&w2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s.sqrt()
        };

        for &lambda in &lambdas {
            let mut lhs = 0.0;
            for j in 0..n {
                let xj = &x1[j];
                let xm = &x2[asg.perm[j]];
                let x_u: Vec<f64> = xj
                    .iter()
                    .zip(xm)
                    .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                    .collect();
                let y_u: Vec<f64> = matvec(&w1, xj)
                    .iter()
                    .zip(&matvec(&w2, xm))
                    .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                    .collect();
                let theta_u: Vec<f64> = w1
                    .iter()
                    .zip(&w2)
                    .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                    .collect();
                let fit = matvec(&theta_u, &x_u);
                let res: f64 = y_u
                    .iter()
                    .zip(&fit)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                lhs += res;
            }
            let bound = (n * n) as f64 * lambda * (1.0 - lambda) * dw_frob * d_emd;
            if lambda == 0.0 || lambda == 1.0 {
                ensure!(
                    lhs <= 1e-10,
                    "pair {i}: endpoint lambda={lambda} residual {lhs:e} exceeds 1e-10"
                );
                report.max_endpoint = report.max_endpoint.max(lhs);
            } else {
                ensure!(
                    lhs <= bound + 1e-9,
                    "pair {i}: lambda={lambda} residual {lhs} exceeds bound {bound}"
                );
            }
            report.max_excess = report.max_excess.max(lhs - bound);
        }
    }
    Ok(report)
}

/// The learner's initial parameters must be bit-identical across
/// up-sampler training (its objective reads them but never writes).
pub fn check_gradient_isolation(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MetaModel::regression_default(&mut rng);
    let before: Vec<u64> = model
        .theta()
        .iter()
        .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
        .collect();
    let cfg = AtuConfig {
        r_coarse: 2,
        r_detail: 2,
        n_patch: 2,
        pool_size: 8,
        ..AtuConfig::default()
    };
    let arch = UpsamplerArch::regression_default(3, 3, &cfg);
    let mut up = UpsamplerParams::new(arch, &mut rng);
    train_upsampler(
        &mut up,
        &model,
        &cfg,
        &DomainRanges::training_default(),
        2,
        &mut rng,
    )?;
    let after: Vec<u64> = model
        .theta()
        .iter()
        .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
        .collect();
    ensure!(
        before == after,
        "learner parameters drifted during up-sampler training"
    );
    Ok(())
}

/// Runs every check at verification sizes, printing one line per check.
pub fn run_all() -> Result<()> {
    check_emd_oracle(200, 5, 101)?;
    println!("[PASS] assignment solver matches exhaustive search (200 matrices, n <= 5)");
    let worst = check_autodiff_fd(20, 102)?;
    println!("[PASS] reverse-mode gradients match finite differences (worst rel {worst:.2e})");
    let worst = check_meta_grad_fd(3, 103)?;
    println!("[PASS] one-step meta-gradient matches finite differences (worst rel {worst:.2e})");
    let report = check_property_one(200, 104)?;
    println!(
        "[PASS] interpolated linear tasks stay within the closeness bound \
         (200 pairs, worst endpoint residual {:.1e})",
        report.max_endpoint
    );
    check_gradient_isolation(105)?;
    println!("[PASS] up-sampler training leaves the learner bit-identical");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_handles_known_matrix() {
        // 2x2 matrix where the diagonal is worse than the anti-diagonal.
        let costs = vec![5.0, 1.0, 2.0, 5.0];
        assert_eq!(brute_force_assignment_cost(&costs, 2), 3.0);
        assert_eq!(brute_force_assignment_cost(&[7.0], 1), 7.0);
    }

    #[test]
    fn verify_checks_pass_at_small_sizes() {
        check_emd_oracle(40, 4, 1).unwrap();
        assert!(check_autodiff_fd(3, 2).unwrap() < 1e-4);
        assert!(check_meta_grad_fd(1, 3).unwrap() < 1e-4);
        let report = check_property_one(40, 4).unwrap();
        assert!(report.max_endpoint <= 1e-10);
        check_gradient_isolation(5).unwrap();
    }
}
