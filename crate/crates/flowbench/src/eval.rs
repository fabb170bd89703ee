//! Measurements against ground truth: the analytic marginal velocity field
//! for a finite dataset, field-MSE grids, the batch-gradient variance
//! harness, the Euler sampler, kernel density estimation, energy distance,
//! and the coupled Monte-Carlo check that the weighted objective estimates
//! the same quantity as the plain one.
//!
//! The oracle here is written against the raw definitions (quotient-form
//! conditional velocities, direct softmax) and shares no arithmetic with
//! the posterior module's streaming collapse; their agreement is a test
//! subject, not a construction.

use std::io::Write as _;
use std::path::Path;

use crate::data::{Dataset, Source};
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::numeric::Point;
use crate::path::interpolate;
use crate::posterior::{collapsed_target, ClassIndicator, Label, Pools};
use crate::rng::SeededRng;
use crate::train::Objective;

/// Anything that can be integrated or scored as a velocity field.
pub trait VelocityField {
    fn velocity(&self, z_t: &Point, t: f64, y: Label) -> Result<Point>;
}

impl VelocityField for MlpModel {
    fn velocity(&self, z_t: &Point, t: f64, y: Label) -> Result<Point> {
        self.forward(z_t, t, y)
    }
}

/// The analytic marginal field of a finite dataset, usable wherever a model
/// is.
#[derive(Debug, Clone, Copy)]
pub struct OracleField<'a> {
    dataset: &'a Dataset,
    t_eps: f64,
}

impl<'a> OracleField<'a> {
    pub fn new(dataset: &'a Dataset, t_eps: f64) -> Self {
        OracleField { dataset, t_eps }
    }
}

impl VelocityField for OracleField<'_> {
    fn velocity(&self, z_t: &Point, t: f64, y: Label) -> Result<Point> {
        marginal_velocity_oracle(self.dataset, z_t, t, y, self.t_eps)
    }
}

/// Exact marginal velocity at (z_t, t): the softmax over per-datum path
/// log-likelihoods, applied to quotient-form conditional velocities
/// (z_t - z^j)/t. Conditioning restricts the average to the matching class.
pub fn marginal_velocity_oracle(
    dataset: &Dataset,
    z_t: &Point,
    t: f64,
    y: Label,
    t_eps: f64,
) -> Result<Point> {
    if !(t >= t_eps && t < 1.0) {
        return Err(Error::DegenerateTime { t });
    }
    let d = dataset.dim();
    if z_t.dim() != d {
        return Err(Error::invalid(format!(
            "query has dimension {}, dataset has {d}",
            z_t.dim()
        )));
    }
    let members: Vec<usize> = match y {
        Label::Unconditional => (0..dataset.n()).collect(),
        Label::Class(c) => {
            let idx = dataset.class_indices(c);
            if idx.is_empty() {
                return Err(Error::invalid(format!("no dataset points carry label {c}")));
            }
            idx
        }
    };

    let s = 1.0 - t;
    let inv_2t2 = 1.0 / (2.0 * t * t);
    let mut log_liks = Vec::with_capacity(members.len());
    let mut max = f64::NEG_INFINITY;
    for &j in &members {
        let zj = dataset.point_slice(j);
        let mut q = 0.0;
        for c in 0..d {
            let diff = z_t[c] - s * zj[c];
            q += diff * diff;
        }
        let ll = -q * inv_2t2;
        log_liks.push(ll);
        if ll > max {
            max = ll;
        }
    }
    if !max.is_finite() {
        return Err(Error::NumericFailure(format!(
            "path likelihoods degenerate at t={t}"
        )));
    }

    let mut total = 0.0;
    let mut num = vec![0.0; d];
    for (pos, &j) in members.iter().enumerate() {
        let w = (log_liks[pos] - max).exp();
        if w == 0.0 {
            continue;
        }
        total += w;
        let zj = dataset.point_slice(j);
        for c in 0..d {
            num[c] += w * ((z_t[c] - zj[c]) / t);
        }
    }
    for slot in num.iter_mut() {
        *slot /= total;
    }
    Ok(Point::new(num))
}

pub const GRID_PAIRS: usize = 4096;
pub const GRID_TIMES: usize = 16;

/// Fixed evaluation grid: interpolant draws from the dataset under a
/// dedicated seed, crossed with evenly spaced times in [t_eps, 1), with the
/// oracle velocity precomputed per grid point. Building the grid is the
/// expensive part; scoring a model against it touches only the model.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    d: usize,
    z_t: Vec<f64>,
    ts: Vec<f64>,
    y_model: Vec<Label>,
    truth: Vec<f64>,
}

impl FieldGrid {
    /// Standard-size grid (4096 pairs x 16 times).
    pub fn build(dataset: &Dataset, seed: u64, t_eps: f64, conditioned: bool) -> Result<Self> {
        Self::build_sized(dataset, seed, t_eps, conditioned, GRID_PAIRS, GRID_TIMES)
    }

    /// Per pair the rng draws a dataset index and then a source point; times
    /// are t_eps + k(1-t_eps)/times for k = 0..times, all below 1.
    pub fn build_sized(
        dataset: &Dataset,
        seed: u64,
        t_eps: f64,
        conditioned: bool,
        pairs: usize,
        times: usize,
    ) -> Result<Self> {
        if pairs == 0 || times == 0 {
            return Err(Error::invalid("the evaluation grid must have pairs and times"));
        }
        if !(t_eps > 0.0 && t_eps < 1.0) {
            return Err(Error::invalid(format!("t_eps {t_eps} must lie in (0, 1)")));
        }
        let d = dataset.dim();
        let label_set = dataset.label_set();
        let mut rng = SeededRng::derived(seed, "eval-grid", 0);
        let t_values: Vec<f64> = (0..times)
            .map(|k| t_eps + k as f64 * (1.0 - t_eps) / times as f64)
            .collect();

        let rows = pairs * times;
        let mut grid = FieldGrid {
            d,
            z_t: Vec::with_capacity(rows * d),
            ts: Vec::with_capacity(rows),
            y_model: Vec::with_capacity(rows),
            truth: Vec::with_capacity(rows * d),
        };
        for _ in 0..pairs {
            let i = rng.index(dataset.n());
            let eps = dataset.source().sample(&mut rng);
            let z = dataset.point(i);
            let raw = dataset.label(i);
            let (cond, y_model) = if conditioned {
                let pos = label_set
                    .binary_search(&raw)
                    .expect("dataset labels are drawn from its own label set");
                (Label::Class(raw), Label::Class(pos))
            } else {
                (Label::Unconditional, Label::Unconditional)
            };
            for &t in &t_values {
                let z_t = interpolate(&z, &eps, t)?;
                let truth = marginal_velocity_oracle(dataset, &z_t, t, cond, t_eps)?;
                grid.z_t.extend_from_slice(z_t.coords());
                grid.truth.extend_from_slice(truth.coords());
                grid.ts.push(t);
                grid.y_model.push(y_model);
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Mean over grid points of the squared error against the oracle.
    pub fn field_mse(&self, field: &dyn VelocityField) -> Result<f64> {
        let mut sum = 0.0;
        for row in 0..self.len() {
            sum += self.row_sq_err(field, row)?;
        }
        Ok(sum / self.len() as f64)
    }

    /// Per-time mean squared error, ascending in t; the flat average of the
    /// per-time means equals [`field_mse`] because every time slice has the
    /// same number of points.
    ///
    /// [`field_mse`]: FieldGrid::field_mse
    pub fn mse_by_time(&self, field: &dyn VelocityField) -> Result<Vec<(f64, f64)>> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for row in 0..self.len() {
            let t = self.ts[row];
            let err = self.row_sq_err(field, row)?;
            match sums.iter_mut().find(|(st, _, _)| *st == t) {
                Some((_, s, c)) => {
                    *s += err;
                    *c += 1;
                }
                None => sums.push((t, err, 1)),
            }
        }
        sums.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(sums.into_iter().map(|(t, s, c)| (t, s / c as f64)).collect())
    }

    fn row_sq_err(&self, field: &dyn VelocityField, row: usize) -> Result<f64> {
        let d = self.d;
        let z_t = Point::new(self.z_t[row * d..(row + 1) * d].to_vec());
        let f = field.velocity(&z_t, self.ts[row], self.y_model[row])?;
        let mut err = 0.0;
        for c in 0..d {
            let r = f[c] - self.truth[c + row * d];
            err += r * r;
        }
        Ok(err)
    }

    /// Mean squared oracle velocity magnitude; the zero field scores exactly
    /// this.
    pub fn mean_truth_sq(&self) -> f64 {
        let d = self.d;
        let mut sum = 0.0;
        for row in 0..self.len() {
            let mut sq = 0.0;
            for c in 0..d {
                let v = self.truth[c + row * d];
                sq += v * v;
            }
            sum += sq;
        }
        sum / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradVarMode {
    /// Every batch draws its own (index, source, time) triples.
    Resampled,
    /// (source, time) are frozen once per dataset element for the whole
    /// measurement; batches differ only in which elements they draw. This
    /// isolates index noise from interpolation noise.
    FrozenPerElement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub traces: Vec<f64>,
    pub mean_trace: f64,
    pub b: usize,
    pub batch_size: usize,
}

/// Builds the report from per-batch gradients: the reference gradient is
/// their mean and trace_b = ||g_b - mean||^2.
pub fn variance_report_from_gradients(
    gradients: &[Vec<f64>],
    batch_size: usize,
) -> Result<VarianceReport> {
    let b = gradients.len();
    if b < 2 {
        return Err(Error::invalid("variance needs at least 2 batch gradients"));
    }
    let n = gradients[0].len();
    if gradients.iter().any(|g| g.len() != n) {
        return Err(Error::invalid("batch gradients disagree in length"));
    }
    let mut mean = vec![0.0; n];
    for g in gradients {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    let inv_b = 1.0 / b as f64;
    for m in mean.iter_mut() {
        *m *= inv_b;
    }
    let traces: Vec<f64> = gradients
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum())
        .collect();
    let mean_trace = traces.iter().sum::<f64>() / b as f64;
    Ok(VarianceReport { traces, mean_trace, b, batch_size })
}

/// The gradient of one measurement batch. Batch `b_idx` draws from its own
/// derived stream, so the set of gradients (and therefore the report) does
/// not depend on evaluation order, and any batch can be recomputed alone.
pub fn minibatch_gradient(
    model: &MlpModel,
    dataset: &Dataset,
    objective: Objective,
    pools: Option<&Pools>,
    batch_size: usize,
    seed: u64,
    b_idx: usize,
    t_eps: f64,
    mode: GradVarMode,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if objective == Objective::Pafm {
        match pools {
            None => return Err(Error::config("the pafm objective requires candidate pools")),
            Some(p) if p.n() != dataset.n() => {
                return Err(Error::config(format!(
                    "pools cover {} indices, dataset has {} points",
                    p.n(),
                    dataset.n()
                )))
            }
            Some(_) => {}
        }
    }
    let frozen = match mode {
        GradVarMode::Resampled => None,
        GradVarMode::FrozenPerElement => Some(frozen_tables(dataset, seed)),
    };
    let mut rng = SeededRng::derived(seed, "gradvar", b_idx as u64);
    batch_gradient(model, dataset, objective, pools, batch_size, &mut rng, t_eps, frozen.as_ref())
}

struct FrozenTables {
    eps: Vec<Point>,
    ts: Vec<f64>,
}

/// Per-element draws shared by every batch in the frozen mode: all source
/// points in index order, then all times.
fn frozen_tables(dataset: &Dataset, seed: u64) -> FrozenTables {
    let mut rng = SeededRng::derived(seed, "gradvar-frozen", 0);
    let eps = (0..dataset.n()).map(|_| dataset.source().sample(&mut rng)).collect();
    let ts = (0..dataset.n()).map(|_| rng.uniform()).collect();
    FrozenTables { eps, ts }
}

#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &MlpModel,
    dataset: &Dataset,
    objective: Objective,
    pools: Option<&Pools>,
    batch_size: usize,
    rng: &mut SeededRng,
    t_eps: f64,
    frozen: Option<&FrozenTables>,
) -> Result<Vec<f64>> {
    use crate::model::BatchElement;
    use crate::path::PathPoint;

    let d = dataset.dim();
    let n = dataset.n();
    let conditioned = model.n_classes() > 0;
    let label_set = dataset.label_set();

    // draw order matches training: indices, then sources, then times; the
    // frozen mode replaces the latter two with the per-element tables
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.index(n)).collect();
    let (eps, ts): (Vec<Point>, Vec<f64>) = match frozen {
        None => {
            let eps: Vec<Point> =
                (0..batch_size).map(|_| dataset.source().sample(rng)).collect();
            let ts: Vec<f64> = (0..batch_size).map(|_| rng.uniform()).collect();
            (eps, ts)
        }
        Some(tables) => {
            let eps = indices.iter().map(|&i| tables.eps[i].clone()).collect();
            let ts = indices.iter().map(|&i| tables.ts[i]).collect();
            (eps, ts)
        }
    };

    let mut z_t = vec![0.0; batch_size * d];
    let mut targets = vec![0.0; batch_size * d];
    let mut y_model = vec![Label::Unconditional; batch_size];
    for el in 0..batch_size {
        let i = indices[el];
        let z = dataset.point(i);
        let path = PathPoint::sample(&z, eps[el].clone(), ts[el], i)?;
        z_t[el * d..(el + 1) * d].copy_from_slice(path.z_t().coords());
        let raw = dataset.label(i);
        let (cond, y) = if conditioned {
            let pos = label_set
                .binary_search(&raw)
                .expect("dataset labels are drawn from its own label set");
            (Label::Class(raw), Label::Class(pos))
        } else {
            (Label::Unconditional, Label::Unconditional)
        };
        y_model[el] = y;
        let target = match objective {
            Objective::Fm => path.endpoint_velocity(&z),
            Objective::Pafm => {
                let pools = pools.expect("checked by the caller");
                collapsed_target(&path, pools.view(i), dataset, cond, &ClassIndicator, t_eps)?
                    .velocity
            }
        };
        targets[el * d..(el + 1) * d].copy_from_slice(target.coords());
    }
    let batch: Vec<BatchElement<'_>> = (0..batch_size)
        .map(|el| BatchElement {
            z_t: &z_t[el * d..(el + 1) * d],
            t: ts[el],
            y: y_model[el],
            target: &targets[el * d..(el + 1) * d],
        })
        .collect();
    let mut ws = model.workspace();
    let mut grad = vec![0.0; model.param_count()];
    model.batch_backward(&mut ws, &batch, &mut grad)?;
    Ok(grad)
}

/// Per-batch gradient noise around the B-batch mean gradient, the
/// measurement behind the variance comparison. All B gradients are held in
/// memory; at the standard B=500 with the default architecture that is
/// roughly 150 MB.
#[allow(clippy::too_many_arguments)]
pub fn gradient_variance(
    model: &MlpModel,
    dataset: &Dataset,
    objective: Objective,
    pools: Option<&Pools>,
    b: usize,
    batch_size: usize,
    seed: u64,
    t_eps: f64,
    mode: GradVarMode,
) -> Result<VarianceReport> {
    if b < 2 {
        return Err(Error::invalid("gradient variance needs B >= 2 batches"));
    }
    let frozen = match mode {
        GradVarMode::Resampled => None,
        GradVarMode::FrozenPerElement => Some(frozen_tables(dataset, seed)),
    };
    let mut gradients = Vec::with_capacity(b);
    for b_idx in 0..b {
        let mut rng = SeededRng::derived(seed, "gradvar", b_idx as u64);
        gradients.push(batch_gradient(
            model,
            dataset,
            objective,
            pools,
            batch_size,
            &mut rng,
            t_eps,
            frozen.as_ref(),
        )?);
    }
    variance_report_from_gradients(&gradients, batch_size)
}

/// Writes a variance report as CSV (columns batch,trace), one row per
/// measured batch.
pub fn write_variance_report(path: &Path, report: &VarianceReport) -> Result<()> {
    let mut out = String::from("batch,trace\n");
    for (b, trace) in report.traces.iter().enumerate() {
        use std::fmt::Write as _;
        writeln!(out, "{b},{trace}").expect("string write");
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads the per-batch traces back from a variance CSV.
pub fn read_variance_traces(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "batch,trace")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "expected header batch,trace".to_string(),
            })
        }
    }
    let mut traces = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let (b, t) = raw.split_once(',').ok_or(Error::Parse {
            line,
            message: "expected batch,trace".to_string(),
        })?;
        let b: usize = b.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad batch index {b:?}"),
        })?;
        if b != traces.len() {
            return Err(Error::Parse {
                line,
                message: format!("batch {b} out of order, expected {}", traces.len()),
            });
        }
        traces.push(t.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad trace {t:?}"),
        })?);
    }
    Ok(traces)
}

/// Integrates dz/dt = f(z|t,y) from t=1 down to t=0 with n_steps uniform
/// Euler steps, evaluating the field at the left (larger-t) endpoint of
/// each step. Source draws happen per sample just before its integration.
pub fn euler_sample(
    field: &dyn VelocityField,
    source: &Source,
    n_samples: usize,
    n_steps: usize,
    rng: &mut SeededRng,
    y: Label,
) -> Result<Vec<Point>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut out = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut z = source.sample(rng);
        for k in 0..n_steps {
            let t = 1.0 - k as f64 * dt;
            let f = field.velocity(&z, t, y)?;
            let coords: Vec<f64> = z
                .coords()
                .iter()
                .zip(f.coords())
                .map(|(zi, fi)| zi - dt * fi)
                .collect();
            z = Point::new(coords);
            if z.coords().iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "sample {s}: non-finite state after integration step {k} (t={t})"
                )));
            }
        }
        out.push(z);
    }
    Ok(out)
}

/// Gaussian kernel density estimate at one query point.
pub fn kde(points: &[Point], query: &Point, bandwidth: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("kde needs at least one point"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth {bandwidth} must be positive")));
    }
    let d = query.dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::invalid("kde points disagree with the query dimension"));
    }
    let h2 = bandwidth * bandwidth;
    let norm = (std::f64::consts::TAU * h2).powf(-(d as f64) / 2.0);
    let mut sum = 0.0;
    for p in points {
        sum += (-query.dist_sq(p) / (2.0 * h2)).exp();
    }
    Ok(norm * sum / points.len() as f64)
}

/// Scott's rule bandwidth n^(-1/(d+4)) * sigma, with sigma the root mean
/// square of the per-coordinate sample standard deviations (ddof 1).
pub fn scott_bandwidth(points: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("Scott's rule needs at least two points"));
    }
    let n = points.len();
    let d = points[0].dim();
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::invalid("points disagree in dimension"));
    }
    let mut var_sum = 0.0;
    for c in 0..d {
        let mean = points.iter().map(|p| p[c]).sum::<f64>() / n as f64;
        let ss = points.iter().map(|p| (p[c] - mean) * (p[c] - mean)).sum::<f64>();
        var_sum += ss / (n as f64 - 1.0);
    }
    let sigma = (var_sum / d as f64).sqrt();
    Ok((n as f64).powf(-1.0 / (d as f64 + 4.0)) * sigma)
}

/// Energy distance 2E||a-b|| - E||a-a'|| - E||b-b'|| over all pairs
/// (V-statistic, self-pairs included), which keeps the value nonnegative.
/// Arguments are ordered canonically before accumulation so the result is
/// exactly symmetric under swapping.
pub fn energy_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs nonempty sample sets"));
    }
    let d = a[0].dim();
    if a.iter().chain(b.iter()).any(|p| p.dim() != d) {
        return Err(Error::invalid("sample sets disagree in dimension"));
    }
    let (x, y) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let cross = pair_mean(x, y);
    let within_x = pair_mean(x, x);
    let within_y = pair_mean(y, y);
    Ok(2.0 * cross - within_x - within_y)
}

fn canonical_le(a: &[Point], b: &[Point]) -> bool {
    if a.len() != b.len() {
        return a.len() < b.len();
    }
    for (pa, pb) in a.iter().zip(b) {
        for (xa, xb) in pa.coords().iter().zip(pb.coords()) {
            match xa.total_cmp(xb) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    true
}

fn pair_mean(a: &[Point], b: &[Point]) -> f64 {
    let mut sum = 0.0;
    for pa in a {
        for pb in b {
            sum += pa.dist(pb);
        }
    }
    sum / (a.len() as f64 * b.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasednessReport {
    pub fm_mean: f64,
    pub fm_se: f64,
    pub pafm_mean: f64,
    pub pafm_se: f64,
}

impl UnbiasednessReport {
    pub fn combined_se(&self) -> f64 {
        (self.fm_se * self.fm_se + self.pafm_se * self.pafm_se).sqrt()
    }
}

/// Coupled Monte-Carlo comparison of the plain per-sample loss against the
/// posterior-resampled one on a small dataset where the posterior can be
/// enumerated exactly.
///
/// Each draw shares (index, source point, time) between both estimators;
/// the weighted side then resamples a target from the enumerated posterior
/// (path likelihood times condition indicator) and scores the conditional
/// velocity toward it. One categorical uniform is consumed on every draw,
/// including the short-circuit cases, so alternative resamplers replay the
/// same stream.
///
/// The path measure behind the posterior algebra is the standard normal
/// one, so draws here use a standard source regardless of the dataset's
/// configured shift. When the resampled index equals the generating index
/// the conditional velocity is taken in endpoint form (source minus datum),
/// making a point-mass posterior reproduce the plain loss bitwise.
pub fn unbiasedness_check(
    dataset: &Dataset,
    model: &MlpModel,
    n_draws: usize,
    seed: u64,
    t_eps: f64,
) -> Result<UnbiasednessReport> {
    if n_draws < 2 {
        return Err(Error::invalid("the check needs at least 2 draws"));
    }
    if dataset.n() > 16 {
        return Err(Error::invalid(
            "posterior enumeration is intended for small datasets (n <= 16)",
        ));
    }
    let d = dataset.dim();
    let conditioned = model.n_classes() > 0;
    let label_set = dataset.label_set();
    let source = Source::standard(d);
    let mut rng = SeededRng::derived(seed, "unbiasedness", 0);
    let mut ws = model.workspace();

    let mut fm = MeanAccumulator::new();
    let mut pafm = MeanAccumulator::new();
    let mut members_buf: Vec<usize> = Vec::with_capacity(dataset.n());
    let mut log_liks: Vec<f64> = Vec::with_capacity(dataset.n());
    let mut z_t = vec![0.0; d];

    for _ in 0..n_draws {
        let i = rng.index(dataset.n());
        let eps = source.sample(&mut rng);
        let t = rng.uniform();
        let u = rng.uniform();

        let z = dataset.point_slice(i);
        for c in 0..d {
            z_t[c] = t * eps[c] + (1.0 - t) * z[c];
        }
        let y_model = if conditioned {
            let pos = label_set
                .binary_search(&dataset.label(i))
                .expect("dataset labels are drawn from its own label set");
            Label::Class(pos)
        } else {
            Label::Unconditional
        };
        model.forward_into(&mut ws, &z_t, t, y_model)?;
        let f = ws.output();

        let mut fm_loss = 0.0;
        for c in 0..d {
            let r = f[c] - (eps[c] - z[c]);
            fm_loss += r * r;
        }
        fm.push(fm_loss);

        members_buf.clear();
        match (conditioned, dataset.label(i)) {
            (true, lab) => members_buf.extend(dataset.class_indices(lab)),
            (false, _) => members_buf.extend(0..dataset.n()),
        }
        let j = if t < t_eps {
            i
        } else {
            sample_exact_posterior(dataset, &z_t, t, &members_buf, &mut log_liks, u)
        };
        let mut pafm_loss = 0.0;
        if j == i {
            pafm_loss = fm_loss;
        } else {
            let zj = dataset.point_slice(j);
            for c in 0..d {
                let r = f[c] - (z_t[c] - zj[c]) / t;
                pafm_loss += r * r;
            }
        }
        pafm.push(pafm_loss);
    }

    let (fm_mean, fm_se) = fm.mean_and_se();
    let (pafm_mean, pafm_se) = pafm.mean_and_se();
    Ok(UnbiasednessReport { fm_mean, fm_se, pafm_mean, pafm_se })
}

/// Inverse-CDF draw from the exact posterior over `members`, enumerated in
/// index order with max-subtracted softmax weights.
fn sample_exact_posterior(
    dataset: &Dataset,
    z_t: &[f64],
    t: f64,
    members: &[usize],
    log_liks: &mut Vec<f64>,
    u: f64,
) -> usize {
    let d = z_t.len();
    let s = 1.0 - t;
    let inv_2t2 = 1.0 / (2.0 * t * t);
    log_liks.clear();
    let mut max = f64::NEG_INFINITY;
    for &j in members {
        let zj = dataset.point_slice(j);
        let mut q = 0.0;
        for c in 0..d {
            let diff = z_t[c] - s * zj[c];
            q += diff * diff;
        }
        let ll = -q * inv_2t2;
        log_liks.push(ll);
        if ll > max {
            max = ll;
        }
    }
    let mut total = 0.0;
    for ll in log_liks.iter_mut() {
        *ll = (*ll - max).exp();
        total += *ll;
    }
    let threshold = u * total;
    let mut cum = 0.0;
    for (pos, &j) in members.iter().enumerate() {
        cum += log_liks[pos];
        if cum > threshold {
            return j;
        }
    }
    *members.last().expect("members nonempty")
}

struct MeanAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    fn new() -> Self {
        MeanAccumulator { n: 0, mean: 0.0, m2: 0.0 }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean_and_se(&self) -> (f64, f64) {
        let var = self.m2 / (self.n as f64 - 1.0);
        (self.mean, (var / self.n as f64).sqrt())
    }
}
