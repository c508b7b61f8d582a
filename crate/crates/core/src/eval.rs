//! Measurements: sliced Wasserstein distance between sample sets, the
//! attention scaling benchmark, the finalisation gap, the greedy layer
//! search baseline and run reports.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::DenseArray;
use crate::attention::{self, orthogonal_hedgehog, SimilarityScale};
use crate::error::{Error, Result};
use crate::flow::{sample, FlowSchedule, VelocityField};
use crate::model::{Frozen, LayerKind, ToyTransformer};
use crate::scalar::Scalar;
use crate::trajectory::TrajectorySet;
use crate::transfer::{train, Objective, TransferConfig};

/// Squared 1D Wasserstein-2 distance between two empirical distributions,
/// exact via their quantile functions. Both inputs must be sorted.
fn w2_squared_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    }
    // walk the merged quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        total += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

fn flatten<T: Scalar>(x: &DenseArray<T>) -> Result<(usize, usize, Vec<f64>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 || x.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    Ok((n, x.len() / n, x.data().iter().map(|v| v.as_f64()).collect()))
}

/// Sliced Wasserstein-2 distance between sample sets `[N, ..]` and
/// `[M, ..]`: `sqrt(mean_θ W2²(θᵀa, θᵀb))` over `n_projections` random unit
/// directions drawn from `seed`. Each 1D distance is exact (by sorting).
pub fn sliced_wasserstein2<T: Scalar>(a: &DenseArray<T>, b: &DenseArray<T>, n_projections: usize, seed: u64) -> Result<f64> {
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let (na, da, xa) = flatten(a)?;
    let (nb, db, xb) = flatten(b)?;
    if da != db {
        return Err(Error::shape(
            "sliced_wasserstein2",
            format!("samples of dimension {da} vs {db}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| loop {
            let v: Vec<f64> = DenseArray::<f64>::randn(&[da], 1.0, &mut rng).into_data();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let project = |x: &[f64], n: usize, dir: &[f64]| {
        let mut p: Vec<f64> = (0..n)
            .map(|i| x[i * da..(i + 1) * da].iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let per_dir = crate::parallel::map_indexed(dirs.len(), |k| {
        w2_squared_sorted(&project(&xa, na, &dirs[k]), &project(&xb, nb, &dirs[k]))
    });
    Ok((per_dir.iter().sum::<f64>() / n_projections as f64).sqrt())
}

/// Draws `n` samples by integrating `model` from noise seeded by `seed`.
pub fn sample_model<T: Scalar, M: VelocityField<T> + ?Sized>(
    model: &M,
    schedule: &FlowSchedule,
    n: usize,
    sample_shape: &[usize],
    seed: u64,
) -> Result<DenseArray<T>> {
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    let x1 = DenseArray::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sample(model, schedule, &x1, false)?.x0)
}

/// Largest output deviation between a mixed model and its finalised form on
/// a random probe batch, over a few times in `(0, 1)`.
pub fn finalization_gap<T: Scalar>(mixed: &ToyTransformer<T>, probe: &DenseArray<T>) -> Result<f64> {
    let finalized = mixed.finalize();
    let b = probe.shape()[0];
    let mut worst = 0.0f64;
    for t in [0.1, 0.5, 0.9] {
        let times = vec![T::of(t); b];
        let d = mixed.velocity(probe, &times)?.max_abs_diff(&finalized.velocity(probe, &times)?)?;
        worst = worst.max(d.as_f64());
    }
    Ok(worst)
}

/// One kernel's timings in a scaling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelScaling {
    pub kernel: String,
    pub n: Vec<usize>,
    pub median_secs: Vec<f64>,
    /// Least-squares slope of `log t` against `log n`.
    pub slope: f64,
    /// True when some median is too close to the timer resolution to trust.
    pub low_resolution: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub d: usize,
    pub repeats: usize,
    pub kernels: Vec<KernelScaling>,
}

/// Ordinary least-squares slope of `log y` on `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("slope needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// Materialises the full `n × n` score matrix; only for checking the
/// streamed kernel on small inputs.
fn dense_softmax_reference(q: &DenseArray<f64>, k: &DenseArray<f64>, v: &DenseArray<f64>, scale: SimilarityScale) -> Result<DenseArray<f64>> {
    let s: f64 = scale.factor(q.last_dim());
    q.matmul(&k.transpose_last2()?)?.scale(s).softmax_last().matmul(v)
}

/// Checks both timed kernels against their references on small inputs.
pub fn attention_correctness_gate(d: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &n in &[1usize, 7, 64] {
        let q = DenseArray::<f64>::randn(&[n, d], 1.0, &mut rng);
        let k = DenseArray::<f64>::randn(&[n, d], 1.0, &mut rng);
        let v = DenseArray::<f64>::randn(&[n, d], 1.0, &mut rng);
        let h = orthogonal_hedgehog(d, 1.0, &mut rng)?;
        let soft = attention::softmax_attention(&q, &k, &v, SimilarityScale::SqrtDim)?;
        let soft_ref = dense_softmax_reference(&q, &k, &v, SimilarityScale::SqrtDim)?;
        let lin = attention::linear_attention(&q, &k, &v, &h, &h)?;
        let lin_ref = attention::kernel_quadratic_attention(&q, &k, &v, &h, &h)?;
        let scale = v.max_abs();
        if soft.max_abs_diff(&soft_ref)? > 1e-10 * scale {
            return Err(Error::InvalidArgument(format!("softmax kernel disagrees with reference at n = {n}")));
        }
        if lin.max_abs_diff(&lin_ref)? > 1e-10 * scale {
            return Err(Error::InvalidArgument(format!("linear kernel disagrees with reference at n = {n}")));
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Times the single-branch kernels used after finalisation (softmax and
/// linear attention) at each sequence length, after one untimed warm-up
/// call, and fits log-log slopes. The correctness gate runs first.
pub fn bench_attention(n_list: &[usize], d: usize, repeats: usize, seed: u64) -> Result<ScalingReport> {
    if n_list.len() < 2 || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("n_list must hold at least two ascending lengths".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    attention_correctness_gate(d, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = orthogonal_hedgehog::<f32, _>(d, 1.0, &mut rng)?;
    let mut times: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for &n in n_list {
        let q = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        let k = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        let v = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        let kernels: [&dyn Fn() -> Result<DenseArray<f32>>; 2] = [
            &|| attention::softmax_attention(&q, &k, &v, SimilarityScale::SqrtDim),
            &|| attention::linear_attention(&q, &k, &v, &h, &h),
        ];
        for (slot, run) in times.iter_mut().zip(kernels) {
            std::hint::black_box(run()?);
            let samples = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    std::hint::black_box(run()).map(|_| start.elapsed().as_secs_f64())
                })
                .collect::<Result<Vec<_>>>()?;
            slot.push(median(samples));
        }
    }
    let ns: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    let kernels = ["softmax", "linear"]
        .iter()
        .zip(times)
        .map(|(name, t)| {
            Ok(KernelScaling {
                kernel: name.to_string(),
                n: n_list.to_vec(),
                slope: loglog_slope(&ns, &t)?,
                low_resolution: t.iter().any(|&s| s < 1e-4),
                median_secs: t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingReport { d, repeats, kernels })
}

/// Result of [`heuristic_layer_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSearch {
    /// Layers in the order they were converted.
    pub order: Vec<usize>,
    /// Probe deviation after each conversion.
    pub deviations: Vec<f64>,
}

/// Greedy baseline: repeatedly try every remaining softmax layer as a
/// freshly initialised linear layer, measure the mean squared output
/// deviation from `teacher` on `probe` at `t_probe`, and keep the cheapest
/// conversion, `target` times.
pub fn heuristic_layer_search<T: Scalar>(
    teacher: &ToyTransformer<T>,
    target: usize,
    probe: &DenseArray<T>,
    t_probe: f64,
    seed: u64,
) -> Result<LayerSearch> {
    Ok(heuristic_conversion(teacher, target, probe, t_probe, seed)?.0)
}

/// [`heuristic_layer_search`] that also returns the converted model.
pub fn heuristic_conversion<T: Scalar>(
    teacher: &ToyTransformer<T>,
    target: usize,
    probe: &DenseArray<T>,
    t_probe: f64,
    seed: u64,
) -> Result<(LayerSearch, ToyTransformer<T>)> {
    let kinds = teacher.layer_kinds();
    if target > kinds.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} exceeds {} layers",
            kinds.len()
        )));
    }
    let times = vec![T::of(t_probe); probe.shape()[0]];
    let reference = teacher.velocity(probe, &times)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = teacher.clone();
    let mut order = Vec::with_capacity(target);
    let mut deviations = Vec::with_capacity(target);
    for _ in 0..target {
        let round_seed: u64 = rng.random();
        let mut best: Option<(usize, f64, ToyTransformer<T>)> = None;
        for (layer, kind) in current.layer_kinds().into_iter().enumerate() {
            if kind == LayerKind::Linear {
                continue;
            }
            let mut trial = current.clone();
            let mut layer_rng = ChaCha8Rng::seed_from_u64(round_seed ^ layer as u64);
            trial.set_layer_kind(layer, LayerKind::Linear, 0.0, &mut layer_rng)?;
            let out = trial.velocity(probe, &times)?;
            let diff = out.sub(&reference)?;
            let mse = diff.sq_norm().as_f64() / diff.len() as f64;
            if best.as_ref().is_none_or(|(_, m, _)| mse < *m) {
                best = Some((layer, mse, trial));
            }
        }
        let (layer, mse, model) = best.expect("a softmax layer remains while target <= n_layers");
        order.push(layer);
        deviations.push(mse);
        current = model;
    }
    Ok((LayerSearch { order, deviations }, current))
}

/// What the quality measurements of a run are computed from.
#[derive(Clone, Debug)]
pub struct QualityProbe<T> {
    pub schedule: FlowSchedule,
    /// Shared starting noise for every model's samples.
    pub noise: DenseArray<T>,
    pub projections: usize,
    pub projection_seed: u64,
    /// Inputs for [`finalization_gap`].
    pub probe: DenseArray<T>,
}

impl<T: Scalar> QualityProbe<T> {
    pub fn new(schedule: FlowSchedule, n_samples: usize, sample_shape: &[usize], probe_batch: usize, projections: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![n_samples];
        shape.extend_from_slice(sample_shape);
        let noise = DenseArray::randn(&shape, 1.0, &mut rng);
        shape[0] = probe_batch;
        let probe = DenseArray::randn(&shape, 1.0, &mut rng);
        Self {
            schedule,
            noise,
            projections,
            projection_seed: rng.random(),
            probe,
        }
    }

    pub fn samples<M: VelocityField<T> + ?Sized>(&self, model: &M) -> Result<DenseArray<T>> {
        Ok(sample(model, &self.schedule, &self.noise, false)?.x0)
    }

    pub fn sw2(&self, a: &DenseArray<T>, b: &DenseArray<T>) -> Result<f64> {
        sliced_wasserstein2(a, b, self.projections, self.projection_seed)
    }
}

/// Summary of the selection scores of a mixed model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub n_linear: usize,
    pub mean: f64,
    /// `max |r − round(r)|`; 0 once every score has settled.
    pub max_rounding_error: f64,
    /// Scores inside `(0.25, 0.75)`.
    pub n_undecided: usize,
}

impl ScoreStats {
    pub fn of(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        Self {
            // ties keep softmax, as in finalisation
            n_linear: scores.iter().filter(|&&r| r < 0.5).count(),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            max_rounding_error: scores.iter().map(|r| (r - r.round()).abs()).fold(0.0, f64::max),
            n_undecided: scores.iter().filter(|&&r| r > 0.25 && r < 0.75).count(),
        }
    }
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub target: usize,
    pub lambda: f64,
    pub regularization: bool,
    pub objective: Objective,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub sw2_mixed: f64,
    pub sw2_finalized: f64,
    pub finalization_gap: f64,
    pub scores: Vec<f64>,
    pub score_stats: ScoreStats,
    pub wall_secs: f64,
}

/// The default grid: a target sweep, a λ sweep at `base.target`, the
/// no-regularisation cell and the MSE cell, each over every seed. Cells
/// shared by several axes appear once.
pub fn default_ablation_grid(base: &TransferConfig, targets: &[usize], lambdas: &[f64], seeds: &[u64]) -> Vec<AblationCell> {
    let cell = |target, lambda, regularization, objective, seed| AblationCell {
        target,
        lambda,
        regularization,
        objective,
        seed,
    };
    let mut cells = Vec::new();
    for &seed in seeds {
        for &t in targets {
            cells.push(cell(t, base.lambda, true, Objective::Adm, seed));
        }
        for &l in lambdas {
            cells.push(cell(base.target, l, true, Objective::Adm, seed));
        }
        cells.push(cell(base.target, base.lambda, false, Objective::Adm, seed));
        cells.push(cell(base.target, base.lambda, true, Objective::Mse, seed));
    }
    let mut unique: Vec<AblationCell> = Vec::with_capacity(cells.len());
    for c in cells {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    unique
}

/// Runs selective transfer for every cell from a fresh mixed copy of
/// `teacher` and measures each result against the teacher's samples.
/// `progress` is called after each cell.
pub fn ablation_suite<T: Scalar>(
    teacher: &ToyTransformer<T>,
    data: &TrajectorySet<T>,
    base: &TransferConfig,
    cells: &[AblationCell],
    quality: &QualityProbe<T>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let frozen = Frozen::new(teacher);
    let reference = quality.samples(teacher)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let start = Instant::now();
        let config = TransferConfig {
            target: cell.target,
            lambda: cell.lambda,
            regularization: cell.regularization,
            objective: cell.objective,
            ..base.clone()
        };
        let student = teacher.to_mixed(&mut ChaCha8Rng::seed_from_u64(cell.seed))?;
        let outcome = train(student, &frozen, data, &config, cell.seed, None)?;
        let mixed = outcome.student;
        let finalized = mixed.finalize();
        let scores: Vec<f64> = mixed.scores().into_iter().flatten().map(|r| r.as_f64()).collect();
        let row = AblationRow {
            cell: cell.clone(),
            sw2_mixed: quality.sw2(&quality.samples(&mixed)?, &reference)?,
            sw2_finalized: quality.sw2(&quality.samples(&finalized)?, &reference)?,
            finalization_gap: finalization_gap(&mixed, &quality.probe)?,
            score_stats: ScoreStats::of(&scores),
            scores,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:>6} {:>7} {:>4} {:>4} {:>5} {:>10} {:>10} {:>10} {:>5} {:>8} {:>8}\n",
        "target", "lambda", "reg", "obj", "seed", "sw2_mixed", "sw2_final", "gap", "lin", "r_err", "secs"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>7} {:>4} {:>4} {:>5} {:>10.5} {:>10.5} {:>10.3e} {:>5} {:>8.1e} {:>8.1}\n",
            r.cell.target,
            r.cell.lambda,
            if r.cell.regularization { "on" } else { "off" },
            match r.cell.objective {
                Objective::Adm => "adm",
                Objective::Mse => "mse",
            },
            r.cell.seed,
            r.sw2_mixed,
            r.sw2_finalized,
            r.finalization_gap,
            r.score_stats.n_linear,
            r.score_stats.max_rounding_error,
            r.wall_secs
        ));
    }
    out
}

/// Metrics of one run plus what is needed to reproduce it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub fingerprint: String,
    pub seed: u64,
    /// Kept out of the serialized report so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_secs: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            fingerprint: fingerprint(config)?,
            seed,
            ..Self::default()
        })
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn fingerprint<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w2_of_unequal_sets() {
        // {0} against {0, 2}: quantile gap is 0 on [0, ½) and 2 on [½, 1)
        assert!((w2_squared_sorted(&[0.0], &[0.0, 2.0]) - 2.0).abs() < 1e-12);
        assert!((w2_squared_sorted(&[1.0, 3.0], &[1.0, 3.0])).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn fingerprint_is_stable() {
        let a = fingerprint(&vec![1, 2, 3]).unwrap();
        assert_eq!(a, fingerprint(&vec![1, 2, 3]).unwrap());
        assert_ne!(a, fingerprint(&vec![1, 2, 4]).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn score_stats_of_settled_and_undecided() {
        let s = ScoreStats::of(&[0.0, 1.0, 0.5, 0.3]);
        assert_eq!(s.n_linear, 2);
        assert_eq!(s.n_undecided, 2);
        assert!((s.max_rounding_error - 0.5).abs() < 1e-12);
        assert_eq!(ScoreStats::of(&[0.0, 1.0]).max_rounding_error, 0.0);
    }

    #[test]
    fn grid_deduplicates_shared_cells() {
        let base = TransferConfig::default();
        let grid = default_ablation_grid(&base, &[2, 4, 6], &[0.1, 0.01, 0.001], &[0, 1]);
        // per seed: 3 targets + 2 new lambdas + no-reg + mse
        assert_eq!(grid.len(), 2 * 7);
    }

    #[test]
    fn gate_passes() {
        attention_correctness_gate(8, 0).unwrap();
    }
}
