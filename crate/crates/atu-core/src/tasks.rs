//! Task families: sinusoid regression episodes, their canonical vector
//! encoding, domain-range presets for cross-domain evaluation, and a
//! Gaussian-blob classification pool for the synthetic few-shot track.
//!
//! A regression task holds `K^s` support and `K^q` query pairs from one
//! curve `y = A sin(w x + b)`. Its [`TaskVector`] encoding interleaves
//! coordinates as `[x^s_1, y^s_1, ..., x^q_1, y^q_1, ...]` with each block
//! sorted ascending by `x` (ties by `y`), so two tasks with the same sample
//! multiset encode identically.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fmath;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("task vector length {got} is not 2*(k_support + k_query) = {expect}")]
    BadVectorLength { got: usize, expect: usize },
    #[error("task vector length {got} is odd")]
    OddVectorLength { got: usize },
    #[error("vector encoding requires scalar inputs and targets")]
    NonScalarSamples,
    #[error("shot counts must be positive (k_support={k_support}, k_query={k_query})")]
    BadShotCount { k_support: usize, k_query: usize },
    #[error("class pool has {have} classes but {need} are required")]
    PoolTooSmall { need: usize, have: usize },
    #[error("query grid needs at least one point")]
    EmptyQueryGrid,
}

/// Parameters of one sinusoid `y = amplitude * sin(frequency * x + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl SineParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * fmath::sin(self.frequency * x + self.phase)
    }
}

/// One few-shot episode: support and query samples, with optional
/// provenance (the generating sinusoid, or the pool classes behind each
/// label).
///
/// Inputs and targets are stored as vectors so the same type carries scalar
/// regression samples (`len == 1`) and feature-vector classification
/// samples (targets hold the integer label as `[label as f64]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support_x: Vec<Vec<f64>>,
    pub support_y: Vec<Vec<f64>>,
    pub query_x: Vec<Vec<f64>>,
    pub query_y: Vec<Vec<f64>>,
    pub sine: Option<SineParams>,
    /// For classification tasks: pool class index behind each label
    /// `0..n_way`.
    pub classes: Option<Vec<usize>>,
}

impl Task {
    pub fn support_len(&self) -> usize {
        self.support_x.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_x.len()
    }

    pub fn input_dim(&self) -> usize {
        self.support_x.first().map_or(0, Vec::len)
    }

    /// True when both inputs and targets are scalars (regression layout).
    pub fn is_scalar(&self) -> bool {
        self.support_x.iter().chain(&self.query_x).all(|v| v.len() == 1)
            && self.support_y.iter().chain(&self.query_y).all(|v| v.len() == 1)
    }
}

/// Canonical flat encoding of a scalar task; see the module docs for the
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub k_support: usize,
    pub k_query: usize,
    pub values: Vec<f64>,
}

impl TaskVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn sorted_pairs(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, TaskError> {
    let mut pairs = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        if x.len() != 1 || y.len() != 1 {
            return Err(TaskError::NonScalarSamples);
        }
        pairs.push((x[0], y[0]));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pairs)
}

/// Encodes a scalar task as its canonical [`TaskVector`]. The support and
/// query blocks are sorted independently, so the encoding is invariant to
/// sample order within each block.
pub fn task_to_vector(task: &Task) -> Result<TaskVector, TaskError> {
    let support = sorted_pairs(&task.support_x, &task.support_y)?;
    let query = sorted_pairs(&task.query_x, &task.query_y)?;
    let mut values = Vec::with_capacity(2 * (support.len() + query.len()));
    for (x, y) in support.iter().chain(query.iter()) {
        values.push(*x);
        values.push(*y);
    }
    Ok(TaskVector {
        k_support: support.len(),
        k_query: query.len(),
        values,
    })
}

/// Decodes a flat vector back into a task. The length must be exactly
/// `2 * (k_support + k_query)`; odd lengths are reported separately since
/// they cannot split into pairs at all.
pub fn vector_to_task(values: &[f64], k_support: usize, k_query: usize) -> Result<Task, TaskError> {
    if values.len() % 2 != 0 {
        return Err(TaskError::OddVectorLength { got: values.len() });
    }
    let expect = 2 * (k_support + k_query);
    if values.len() != expect {
        return Err(TaskError::BadVectorLength {
            got: values.len(),
            expect,
        });
    }
    let mut support_x = Vec::with_capacity(k_support);
    let mut support_y = Vec::with_capacity(k_support);
    let mut query_x = Vec::with_capacity(k_query);
    let mut query_y = Vec::with_capacity(k_query);
    for i in 0..k_support {
        support_x.push(vec![values[2 * i]]);
        support_y.push(vec![values[2 * i + 1]]);
    }
    let off = 2 * k_support;
    for i in 0..k_query {
        query_x.push(vec![values[off + 2 * i]]);
        query_y.push(vec![values[off + 2 * i + 1]]);
    }
    Ok(Task {
        support_x,
        support_y,
        query_x,
        query_y,
        sine: None,
        classes: None,
    })
}

/// Sampling intervals for the sinusoid family and its inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainRanges {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub input: (f64, f64),
}

impl DomainRanges {
    /// The meta-training domain: `A in [0.1, 5]`, `w in [0.8, 1.2]`,
    /// `b in [0, pi]`, `x in [-5, 5]`.
    pub fn training_default() -> Self {
        DomainRanges {
            amplitude: (0.1, 5.0),
            frequency: (0.8, 1.2),
            phase: (0.0, core::f64::consts::PI),
            input: (-5.0, 5.0),
        }
    }

    /// Frequency shifted below the training interval: `w in [0.4, 0.8]`.
    pub fn frequency_shifted() -> Self {
        DomainRanges {
            frequency: (0.4, 0.8),
            ..Self::training_default()
        }
    }

    /// Amplitude shifted above the training interval: `A in [5, 6]`.
    pub fn amplitude_shifted() -> Self {
        DomainRanges {
            amplitude: (5.0, 6.0),
            ..Self::training_default()
        }
    }

    /// Phase mirrored below the training interval: `b in [-pi, 0]`.
    pub fn phase_shifted() -> Self {
        DomainRanges {
            phase: (-core::f64::consts::PI, 0.0),
            ..Self::training_default()
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.gen::<f64>()
}

/// Draws one sinusoid episode: parameters uniform over `ranges`, inputs
/// uniform over the input interval, targets exactly on the curve.
pub fn sample_sine_task(
    ranges: &DomainRanges,
    k_support: usize,
    k_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Task, TaskError> {
    if k_support == 0 || k_query == 0 {
        return Err(TaskError::BadShotCount {
            k_support,
            k_query,
        });
    }
    let sine = SineParams {
        amplitude: uniform(rng, ranges.amplitude),
        frequency: uniform(rng, ranges.frequency),
        phase: uniform(rng, ranges.phase),
    };
    let mut draw = |n: usize| {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = uniform(rng, ranges.input);
            xs.push(vec![x]);
            ys.push(vec![sine.eval(x)]);
        }
        (xs, ys)
    };
    let (support_x, support_y) = draw(k_support);
    let (query_x, query_y) = draw(k_query);
    Ok(Task {
        support_x,
        support_y,
        query_x,
        query_y,
        sine: Some(sine),
        classes: None,
    })
}

/// Builds a fixed evaluation set: `n_tasks` fresh sinusoids, each with
/// `k_support` uniform support points and `n_query` query points evenly
/// spaced across the input interval (endpoints included).
pub fn sample_meta_test_set(
    ranges: &DomainRanges,
    n_tasks: usize,
    k_support: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Task>, TaskError> {
    if n_query == 0 {
        return Err(TaskError::EmptyQueryGrid);
    }
    let (lo, hi) = ranges.input;
    let grid: Vec<f64> = if n_query == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..n_query)
            .map(|i| lo + (hi - lo) * i as f64 / (n_query - 1) as f64)
            .collect()
    };
    let mut tasks = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let mut t = sample_sine_task(ranges, k_support, 1, rng)?;
        let sine = t.sine.expect("sampled task has provenance");
        t.query_x = grid.iter().map(|&x| vec![x]).collect();
        t.query_y = grid.iter().map(|&x| vec![sine.eval(x)]).collect();
        tasks.push(t);
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// Synthetic classification pool
// ---------------------------------------------------------------------------

/// Pool of Gaussian-blob classes in `dim` dimensions: class `c` draws
/// `x = mean_c + stddev * N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub stddev: f64,
}

impl ClassPool {
    /// Samples `n_classes` blob centres from a unit Gaussian.
    pub fn sample(n_classes: usize, dim: usize, stddev: f64, rng: &mut ChaCha8Rng) -> Self {
        let means = (0..n_classes)
            .map(|_| (0..dim).map(|_| standard_normal(rng)).collect())
            .collect();
        ClassPool {
            dim,
            means,
            stddev,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    /// One observation of class `c`.
    pub fn draw(&self, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.means[c]
            .iter()
            .map(|m| m + self.stddev * standard_normal(rng))
            .collect()
    }
}

/// Draws an `n_way`-way episode from the pool: distinct classes, class-major
/// sample layout (all of label 0's support first, then label 1's, ...),
/// targets holding the label index. The chosen pool classes are recorded in
/// [`Task::classes`] so callers can build memory banks from disjoint
/// classes.
pub fn sample_synth_class_task(
    pool: &ClassPool,
    n_way: usize,
    k_support: usize,
    k_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Task, TaskError> {
    if n_way == 0 || k_support == 0 || k_query == 0 {
        return Err(TaskError::BadShotCount {
            k_support,
            k_query,
        });
    }
    if pool.n_classes() < n_way {
        return Err(TaskError::PoolTooSmall {
            need: n_way,
            have: pool.n_classes(),
        });
    }
    // Partial Fisher-Yates over the class indices.
    let mut ids: Vec<usize> = (0..pool.n_classes()).collect();
    for i in 0..n_way {
        let j = i + rng.gen_range(0..ids.len() - i);
        ids.swap(i, j);
    }
    let chosen = &ids[..n_way];

    let mut support_x = Vec::with_capacity(n_way * k_support);
    let mut support_y = Vec::with_capacity(n_way * k_support);
    let mut query_x = Vec::with_capacity(n_way * k_query);
    let mut query_y = Vec::with_capacity(n_way * k_query);
    for (label, &c) in chosen.iter().enumerate() {
        for _ in 0..k_support {
            support_x.push(pool.draw(c, rng));
            support_y.push(vec![label as f64]);
        }
    }
    for (label, &c) in chosen.iter().enumerate() {
        for _ in 0..k_query {
            query_x.push(pool.draw(c, rng));
            query_y.push(vec![label as f64]);
        }
    }
    Ok(Task {
        support_x,
        support_y,
        query_x,
        query_y,
        sine: None,
        classes: Some(chosen.to_vec()),
    })
}

// ---------------------------------------------------------------------------
// Scalar samplers
// ---------------------------------------------------------------------------

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2 = rng.gen::<f64>();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Beta(a, b) draw. Integer shapes use the order-statistic construction
/// (the a-th smallest of a+b-1 uniforms); other shapes fall back to Johnk's
/// rejection method.
pub fn sample_beta(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    let is_small_int = |x: f64| x > 0.0 && x <= 32.0 && x == fmath::round(x);
    if is_small_int(a) && is_small_int(b) {
        let (ai, bi) = (a as usize, b as usize);
        let n = ai + bi - 1;
        let mut draws: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        draws.sort_by(f64::total_cmp);
        return draws[ai - 1];
    }
    loop {
        let u = rng.gen::<f64>();
        let v = rng.gen::<f64>();
        let x = fmath::powf(u, 1.0 / a);
        let y = fmath::powf(v, 1.0 / b);
        let s = x + y;
        if s > 0.0 && s <= 1.0 {
            return x / s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sine_evaluation() {
        let s = SineParams {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
        };
        assert!(s.eval(0.0).abs() < 1e-15);
        assert!((s.eval(core::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn samples_lie_on_the_curve() {
        let mut r = rng(7);
        let t = sample_sine_task(&DomainRanges::training_default(), 10, 10, &mut r).unwrap();
        let sine = t.sine.unwrap();
        for (x, y) in t.support_x.iter().zip(&t.support_y) {
            assert!((sine.eval(x[0]) - y[0]).abs() < 1e-12);
        }
        assert_eq!(t.support_len(), 10);
        assert_eq!(t.query_len(), 10);
    }

    #[test]
    fn vector_roundtrip_preserves_samples() {
        let mut r = rng(3);
        let t = sample_sine_task(&DomainRanges::training_default(), 5, 7, &mut r).unwrap();
        let v = task_to_vector(&t).unwrap();
        assert_eq!(v.len(), 2 * (5 + 7));
        // Support block sorted by x.
        for i in 1..5 {
            assert!(v.values[2 * i] >= v.values[2 * (i - 1)]);
        }
        let back = vector_to_task(&v.values, 5, 7).unwrap();
        let v2 = task_to_vector(&back).unwrap();
        assert_eq!(v.values, v2.values);
        // Same sample multiset as the original.
        let mut orig: Vec<(f64, f64)> = t
            .support_x
            .iter()
            .zip(&t.support_y)
            .map(|(x, y)| (x[0], y[0]))
            .collect();
        orig.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let dec: Vec<(f64, f64)> = back
            .support_x
            .iter()
            .zip(&back.support_y)
            .map(|(x, y)| (x[0], y[0]))
            .collect();
        assert_eq!(orig, dec);
    }

    #[test]
    fn bad_vector_lengths_rejected() {
        assert!(matches!(
            vector_to_task(&[1.0, 2.0, 3.0], 1, 1),
            Err(TaskError::OddVectorLength { got: 3 })
        ));
        assert!(matches!(
            vector_to_task(&[1.0, 2.0, 3.0, 4.0], 2, 1),
            Err(TaskError::BadVectorLength { got: 4, expect: 6 })
        ));
    }

    #[test]
    fn meta_test_grid_is_even_and_spans_input_range() {
        let mut r = rng(11);
        let set =
            sample_meta_test_set(&DomainRanges::training_default(), 4, 10, 100, &mut r).unwrap();
        assert_eq!(set.len(), 4);
        for t in &set {
            assert_eq!(t.query_len(), 100);
            assert_eq!(t.query_x[0][0], -5.0);
            assert_eq!(t.query_x[99][0], 5.0);
            let step = t.query_x[1][0] - t.query_x[0][0];
            for i in 1..100 {
                let d = t.query_x[i][0] - t.query_x[i - 1][0];
                assert!((d - step).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifted_domains_only_touch_training_ranges_at_endpoints() {
        let base = DomainRanges::training_default();
        let overlap = |a: (f64, f64), b: (f64, f64)| {
            (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
        };
        assert_eq!(
            overlap(DomainRanges::frequency_shifted().frequency, base.frequency),
            0.0
        );
        assert_eq!(
            overlap(DomainRanges::amplitude_shifted().amplitude, base.amplitude),
            0.0
        );
        assert_eq!(overlap(DomainRanges::phase_shifted().phase, base.phase), 0.0);
    }

    #[test]
    fn class_task_layout_and_provenance() {
        let mut r = rng(5);
        let pool = ClassPool::sample(12, 16, 0.3, &mut r);
        let t = sample_synth_class_task(&pool, 5, 1, 15, &mut r).unwrap();
        assert_eq!(t.support_len(), 5);
        assert_eq!(t.query_len(), 75);
        assert_eq!(t.input_dim(), 16);
        for (i, y) in t.support_y.iter().enumerate() {
            assert_eq!(y[0], i as f64); // class-major, one support shot per class
        }
        let classes = t.classes.unwrap();
        assert_eq!(classes.len(), 5);
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5, "classes must be distinct");
    }

    #[test]
    fn undersized_pool_rejected() {
        let mut r = rng(5);
        let pool = ClassPool::sample(3, 4, 0.3, &mut r);
        assert!(matches!(
            sample_synth_class_task(&pool, 5, 1, 1, &mut r),
            Err(TaskError::PoolTooSmall { need: 5, have: 3 })
        ));
    }

    #[test]
    fn beta_draws_are_in_unit_interval_with_plausible_mean() {
        let mut r = rng(42);
        for &(a, b) in &[(2.0, 2.0), (3.0, 5.0), (0.7, 1.3)] {
            let n = 4000;
            let mut sum = 0.0;
            for _ in 0..n {
                let x = sample_beta(&mut r, a, b);
                assert!((0.0..=1.0).contains(&x));
            sum += x;
            }
            let mean = sum / n as f64;
            assert!(
                (mean - a / (a + b)).abs() < 0.03,
                "Beta({a},{b}) sample mean {mean}"
            );
        }
    }
}
