//! Candidate pools, condition likelihoods, self-normalized importance
//! weights, Kish effective sample size, and the collapsed velocity target.
//!
//! Every weight computation happens in log space with max subtraction; the
//! per-candidate path likelihood scales like 1/(2t^2) and would overflow a
//! naive exponential at small t.
//!
//! The pool entry whose index equals the pool owner always contributes the
//! endpoint velocity eps - z^i rather than the quotient (z_t - z^i)/t. The
//! two are algebraically identical for the generating pair, and the endpoint
//! form is what makes a single-candidate pool reproduce the plain conditional
//! target down to the bit.

use crate::data::{Dataset, KnnTable};
use crate::error::{Error, Result};
use crate::numeric::{Point, LOG_NEGLIGIBLE};
use crate::path::{log_path_likelihood_slices, PathPoint};
use crate::rng::SeededRng;

/// Conditioning side of a training draw. `Unconditional` is the sentinel for
/// experiments that ignore labels entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Unconditional,
    Class(usize),
}

/// Log-likelihood of observing condition `y_i` given a candidate labeled
/// `y_j` under the class-indicator model: 0 when they match, -inf when they
/// differ, 0 whenever either side is the unconditional sentinel.
pub fn condition_log_likelihood(y_i: Label, y_j: Label) -> f64 {
    match (y_i, y_j) {
        (Label::Unconditional, _) | (_, Label::Unconditional) => 0.0,
        (Label::Class(a), Label::Class(b)) if a == b => 0.0,
        _ => f64::NEG_INFINITY,
    }
}

/// Pluggable condition model. Only the class indicator ships; richer models
/// (similarity scores against an embedding, say) implement this trait.
pub trait ConditionLikelihood {
    /// log p(condition | candidate with class label `label`)
    fn log_likelihood(&self, label: usize, condition: Label) -> f64;
}

/// Exact class-match indicator.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassIndicator;

impl ConditionLikelihood for ClassIndicator {
    fn log_likelihood(&self, label: usize, condition: Label) -> f64 {
        condition_log_likelihood(condition, Label::Class(label))
    }
}

/// A candidate is either a dataset row or a free-standing point synthesized
/// by a provider (perturbation, augmentation).
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateTarget {
    Index(usize),
    Point(Point),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    target: CandidateTarget,
    label: usize,
}

impl CandidateEntry {
    pub fn index(j: usize, label: usize) -> Self {
        CandidateEntry { target: CandidateTarget::Index(j), label }
    }

    pub fn point(p: Point, label: usize) -> Self {
        CandidateEntry { target: CandidateTarget::Point(p), label }
    }

    pub fn target(&self) -> &CandidateTarget {
        &self.target
    }

    pub fn label(&self) -> usize {
        self.label
    }

    fn coords<'a>(&'a self, dataset: &'a Dataset) -> &'a [f64] {
        match &self.target {
            CandidateTarget::Index(j) => dataset.point_slice(*j),
            CandidateTarget::Point(p) => p.coords(),
        }
    }

    /// Whether this entry refers to the owner datum by index.
    pub fn is_owner(&self, owner: usize) -> bool {
        matches!(self.target, CandidateTarget::Index(j) if j == owner)
    }
}

/// Candidate list for one owner datum. The owner itself is always a member.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    owner: usize,
    entries: Vec<CandidateEntry>,
}

impl CandidatePool {
    pub fn new(owner: usize, entries: Vec<CandidateEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("candidate pool must be nonempty"));
        }
        if !entries.iter().any(|e| e.is_owner(owner)) {
            return Err(Error::invalid(format!(
                "pool for owner {owner} does not contain the owner datum"
            )));
        }
        Ok(CandidatePool { owner, entries })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[CandidateEntry] {
        &self.entries
    }

    pub fn view(&self) -> PoolView<'_> {
        PoolView { owner: self.owner, entries: &self.entries }
    }
}

/// Borrowed pool: an owner index plus the candidate list that serves it.
/// Full-support pools share one list per class, so views are how the hot
/// path sees pools regardless of storage.
#[derive(Debug, Clone, Copy)]
pub struct PoolView<'a> {
    pub owner: usize,
    pub entries: &'a [CandidateEntry],
}

/// Pool storage for a whole dataset.
#[derive(Debug, Clone)]
pub enum Pools {
    /// `assignment[i]` selects the shared list owner `i` draws candidates
    /// from. Full support stores one list per class (or a single list when
    /// unconditional) instead of n copies of it.
    Shared { lists: Vec<Vec<CandidateEntry>>, assignment: Vec<usize> },
    /// Independent pool per owner (knn, perturbation, augmentation).
    PerOwner(Vec<CandidatePool>),
}

impl Pools {
    pub fn n(&self) -> usize {
        match self {
            Pools::Shared { assignment, .. } => assignment.len(),
            Pools::PerOwner(pools) => pools.len(),
        }
    }

    pub fn view(&self, i: usize) -> PoolView<'_> {
        match self {
            Pools::Shared { lists, assignment } => {
                PoolView { owner: i, entries: &lists[assignment[i]] }
            }
            Pools::PerOwner(pools) => pools[i].view(),
        }
    }

    /// Largest pool size across owners; full support reports the largest
    /// shared list.
    pub fn max_k(&self) -> usize {
        match self {
            Pools::Shared { lists, .. } => lists.iter().map(Vec::len).max().unwrap_or(0),
            Pools::PerOwner(pools) => pools.iter().map(CandidatePool::k).max().unwrap_or(0),
        }
    }
}

/// Deterministic point-to-point map used by the augmentation provider. The
/// integer argument distinguishes the K-1 synthesized variants.
pub trait Augment {
    fn apply(&self, z: &Point, k: usize) -> Point;
}

impl<F: Fn(&Point, usize) -> Point> Augment for F {
    fn apply(&self, z: &Point, k: usize) -> Point {
        self(z, k)
    }
}

/// Rotates the first two coordinates about a fixed center by k times the
/// base angle; higher coordinates pass through unchanged.
#[derive(Debug, Clone)]
pub struct RotateAboutCentroid {
    center: Point,
    angle: f64,
}

impl RotateAboutCentroid {
    pub fn new(center: Point, angle: f64) -> Self {
        RotateAboutCentroid { center, angle }
    }
}

impl Augment for RotateAboutCentroid {
    fn apply(&self, z: &Point, k: usize) -> Point {
        let a = self.angle * k as f64;
        let (sin, cos) = a.sin_cos();
        let mut out = z.coords().to_vec();
        if out.len() >= 2 && self.center.dim() >= 2 {
            let dx = z[0] - self.center[0];
            let dy = z[1] - self.center[1];
            out[0] = self.center[0] + cos * dx - sin * dy;
            out[1] = self.center[1] + sin * dx + cos * dy;
        }
        Point::new(out)
    }
}

/// Every same-label dataset point (every point when unconditional).
pub fn provider_full_support(dataset: &Dataset, i: usize, y_i: Label) -> Result<CandidatePool> {
    let entries: Vec<CandidateEntry> = (0..dataset.n())
        .filter(|&j| match y_i {
            Label::Unconditional => true,
            Label::Class(c) => dataset.label(j) == c,
        })
        .map(|j| CandidateEntry::index(j, dataset.label(j)))
        .collect();
    CandidatePool::new(i, entries)
}

/// Pool backed by a precomputed nearest-neighbor table row.
pub fn provider_knn(dataset: &Dataset, table: &KnnTable, i: usize) -> Result<CandidatePool> {
    if table.n() != dataset.n() {
        return Err(Error::invalid(format!(
            "neighbor table covers {} rows, dataset has {}",
            table.n(),
            dataset.n()
        )));
    }
    let entries = table
        .row(i)
        .iter()
        .map(|&j| CandidateEntry::index(j, dataset.label(j)))
        .collect();
    CandidatePool::new(i, entries)
}

/// The owner plus K-1 Gaussian-perturbed copies of it, all inheriting the
/// owner's label.
pub fn provider_perturbation(
    dataset: &Dataset,
    i: usize,
    k: usize,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<CandidatePool> {
    if k == 0 {
        return Err(Error::invalid("perturbation pool needs k >= 1"));
    }
    if sigma < 0.0 {
        return Err(Error::invalid(format!("negative perturbation sigma {sigma}")));
    }
    let label = dataset.label(i);
    let z = dataset.point_slice(i);
    let mut entries = Vec::with_capacity(k);
    entries.push(CandidateEntry::index(i, label));
    for _ in 1..k {
        let coords = z.iter().map(|c| c + sigma * rng.standard_normal()).collect();
        entries.push(CandidateEntry::point(Point::new(coords), label));
    }
    CandidatePool::new(i, entries)
}

/// The owner plus K-1 deterministic variants of it.
pub fn provider_augmentation(
    dataset: &Dataset,
    i: usize,
    k: usize,
    augment: &dyn Augment,
) -> Result<CandidatePool> {
    if k == 0 {
        return Err(Error::invalid("augmentation pool needs k >= 1"));
    }
    let label = dataset.label(i);
    let z = dataset.point(i);
    let mut entries = Vec::with_capacity(k);
    entries.push(CandidateEntry::index(i, label));
    for variant in 1..k {
        let p = augment.apply(&z, variant);
        if p.dim() != dataset.dim() {
            return Err(Error::invalid(format!(
                "augmentation produced dimension {}, expected {}",
                p.dim(),
                dataset.dim()
            )));
        }
        entries.push(CandidateEntry::point(p, label));
    }
    CandidatePool::new(i, entries)
}

/// Bulk pool construction strategy.
#[derive(Debug, Clone, Copy)]
pub enum PoolProvider<'a> {
    FullSupport,
    Knn(&'a KnnTable),
    Perturbation { k: usize, sigma: f64 },
    Augmentation { k: usize, augment: &'a dyn Augment },
}

impl std::fmt::Debug for dyn Augment + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Augment")
    }
}

/// Builds the pool for every dataset index. `conditioned` restricts full
/// support to same-class candidates. Perturbation draws come from streams
/// derived per owner index off `seed`, so the result does not depend on
/// construction order.
pub fn build_pools(
    dataset: &Dataset,
    provider: PoolProvider<'_>,
    conditioned: bool,
    seed: u64,
) -> Result<Pools> {
    match provider {
        PoolProvider::FullSupport => {
            if conditioned {
                let classes = dataset.label_set();
                let lists: Vec<Vec<CandidateEntry>> = classes
                    .iter()
                    .map(|&c| {
                        dataset
                            .class_indices(c)
                            .into_iter()
                            .map(|j| CandidateEntry::index(j, c))
                            .collect()
                    })
                    .collect();
                let assignment = (0..dataset.n())
                    .map(|i| {
                        classes
                            .iter()
                            .position(|&c| c == dataset.label(i))
                            .expect("label_set covers every label")
                    })
                    .collect();
                Ok(Pools::Shared { lists, assignment })
            } else {
                let list = (0..dataset.n())
                    .map(|j| CandidateEntry::index(j, dataset.label(j)))
                    .collect();
                Ok(Pools::Shared { lists: vec![list], assignment: vec![0; dataset.n()] })
            }
        }
        PoolProvider::Knn(table) => {
            let pools = (0..dataset.n())
                .map(|i| provider_knn(dataset, table, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(Pools::PerOwner(pools))
        }
        PoolProvider::Perturbation { k, sigma } => {
            let pools = (0..dataset.n())
                .map(|i| {
                    let mut rng = SeededRng::derived(seed, "pool-perturbation", i as u64);
                    provider_perturbation(dataset, i, k, sigma, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Pools::PerOwner(pools))
        }
        PoolProvider::Augmentation { k, augment } => {
            let pools = (0..dataset.n())
                .map(|i| provider_augmentation(dataset, i, k, augment))
                .collect::<Result<Vec<_>>>()?;
            Ok(Pools::PerOwner(pools))
        }
    }
}

/// Normalized weights plus everything derived from them, materialized for
/// inspection. The training loop uses [`collapsed_target`] instead, which
/// computes the same velocity without allocating.
#[derive(Debug, Clone)]
pub struct WeightedTarget {
    pub log_alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    pub collapsed_velocity: Point,
}

/// Collapsed velocity and effective sample size, the two numbers the
/// training loop consumes per element.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedTarget {
    pub velocity: Point,
    pub ess: f64,
}

/// Kish effective sample size 1/sum(w^2) of a normalized weight vector.
/// Rounding can land a hair outside the exact-arithmetic range [1, K]; the
/// result is projected back onto it.
pub fn kish_ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &w in weights {
        if !(w >= 0.0) {
            return Err(Error::invalid(format!("weight {w} is negative or NaN")));
        }
        sum += w;
        sum_sq += w * w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
    }
    Ok((1.0 / sum_sq).clamp(1.0, weights.len() as f64))
}

/// Max-subtracted normalization of log weights. Returns the normalized
/// weights and their Kish ESS (clamped to [1, K]). Entries at -inf get
/// weight exactly 0.
pub fn normalize_log_weights(log_alphas: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut max = f64::NEG_INFINITY;
    for &la in log_alphas {
        if la.is_nan() || la == f64::INFINITY {
            return Err(Error::NumericFailure(format!("log weight {la}")));
        }
        if la > max {
            max = la;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Internal(
            "all candidate log weights are -inf; the owner entry should always be finite".into(),
        ));
    }
    let mut exps = Vec::with_capacity(log_alphas.len());
    let mut total = 0.0;
    for &la in log_alphas {
        let e = if la - max < LOG_NEGLIGIBLE { 0.0 } else { (la - max).exp() };
        total += e;
        exps.push(e);
    }
    let mut sum_sq = 0.0;
    for e in &mut exps {
        *e /= total;
        sum_sq += *e * *e;
    }
    let ess = (1.0 / sum_sq).clamp(1.0, log_alphas.len() as f64);
    Ok((exps, ess))
}

fn entry_log_alpha(
    entry: &CandidateEntry,
    dataset: &Dataset,
    z_t: &[f64],
    t: f64,
    condition: Label,
    likelihood: &dyn ConditionLikelihood,
) -> Result<f64> {
    let cond = likelihood.log_likelihood(entry.label, condition);
    if cond == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_path_likelihood_slices(z_t, entry.coords(dataset), t)? + cond)
}

fn owner_entry_check(path: &PathPoint, view: &PoolView<'_>) -> Result<()> {
    if path.data_index() != view.owner {
        return Err(Error::invalid(format!(
            "path element was generated from datum {} but the pool belongs to {}",
            path.data_index(),
            view.owner
        )));
    }
    if view.entries.is_empty() {
        return Err(Error::invalid("candidate pool must be nonempty"));
    }
    Ok(())
}

fn owner_target(path: &PathPoint, dataset: &Dataset) -> CollapsedTarget {
    let velocity = path.endpoint_velocity(&dataset.point(path.data_index()));
    CollapsedTarget { velocity, ess: 1.0 }
}

/// Collapsed velocity target for one path element, streamed over the pool
/// without allocation. Below `t_eps` the posterior concentrates entirely on
/// the generating datum, so the target short-circuits to eps - z^i; a
/// single-entry pool is the same limit and takes the same exit, which keeps
/// the reduction to the plain conditional target exact to the bit.
pub fn collapsed_target(
    path: &PathPoint,
    view: PoolView<'_>,
    dataset: &Dataset,
    condition: Label,
    likelihood: &dyn ConditionLikelihood,
    t_eps: f64,
) -> Result<CollapsedTarget> {
    owner_entry_check(path, &view)?;
    let t = path.t();
    if t < t_eps {
        return Ok(owner_target(path, dataset));
    }
    if view.entries.len() == 1 && view.entries[0].is_owner(view.owner) {
        return Ok(owner_target(path, dataset));
    }

    let z_t = path.z_t().coords();
    let d = z_t.len();

    let mut max = f64::NEG_INFINITY;
    for entry in view.entries {
        let la = entry_log_alpha(entry, dataset, z_t, t, condition, likelihood)?;
        if la > max {
            max = la;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Internal(
            "all candidate log weights are -inf; the owner entry should always be finite".into(),
        ));
    }

    let mut s = 0.0;
    let mut s2 = 0.0;
    let mut num = vec![0.0; d];
    for entry in view.entries {
        let la = entry_log_alpha(entry, dataset, z_t, t, condition, likelihood)?;
        let shifted = la - max;
        // entries this far below the max round away exactly against sums >= 1
        if shifted < LOG_NEGLIGIBLE {
            continue;
        }
        let e = shifted.exp();
        s += e;
        s2 += e * e;
        let coords = entry.coords(dataset);
        if entry.is_owner(view.owner) {
            let eps = path.eps().coords();
            for c in 0..d {
                num[c] += e * (eps[c] - coords[c]);
            }
        } else {
            for c in 0..d {
                num[c] += e * ((z_t[c] - coords[c]) / t);
            }
        }
    }

    for c in &mut num {
        *c /= s;
    }
    let ess = (s * s / s2).clamp(1.0, view.entries.len() as f64);
    Ok(CollapsedTarget { velocity: Point::new(num), ess })
}

/// Materialized weights for one path element: per-candidate log weights,
/// normalized weights, ESS, and the collapsed velocity. Below `t_eps` the
/// weights collapse onto the owner entry and the log weights are reported
/// as that limit (0 for the owner, -inf elsewhere).
pub fn snis_weights(
    path: &PathPoint,
    view: PoolView<'_>,
    dataset: &Dataset,
    condition: Label,
    likelihood: &dyn ConditionLikelihood,
    t_eps: f64,
) -> Result<WeightedTarget> {
    owner_entry_check(path, &view)?;
    let t = path.t();
    let k = view.entries.len();

    if t < t_eps {
        let mut log_alphas = vec![f64::NEG_INFINITY; k];
        let mut weights = vec![0.0; k];
        for (j, entry) in view.entries.iter().enumerate() {
            if entry.is_owner(view.owner) {
                log_alphas[j] = 0.0;
                weights[j] = 1.0;
                break;
            }
        }
        let target = owner_target(path, dataset);
        return Ok(WeightedTarget {
            log_alphas,
            weights,
            ess: 1.0,
            collapsed_velocity: target.velocity,
        });
    }

    let z_t = path.z_t().coords();
    let d = z_t.len();
    let mut log_alphas = Vec::with_capacity(k);
    for entry in view.entries {
        log_alphas.push(entry_log_alpha(entry, dataset, z_t, t, condition, likelihood)?);
    }

    if k == 1 && view.entries[0].is_owner(view.owner) {
        let target = owner_target(path, dataset);
        return Ok(WeightedTarget {
            log_alphas,
            weights: vec![1.0],
            ess: 1.0,
            collapsed_velocity: target.velocity,
        });
    }

    let (weights, ess) = normalize_log_weights(&log_alphas)?;
    let mut num = vec![0.0; d];
    for (j, entry) in view.entries.iter().enumerate() {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let coords = entry.coords(dataset);
        if entry.is_owner(view.owner) {
            let eps = path.eps().coords();
            for c in 0..d {
                num[c] += w * (eps[c] - coords[c]);
            }
        } else {
            for c in 0..d {
                num[c] += w * ((z_t[c] - coords[c]) / t);
            }
        }
    }
    Ok(WeightedTarget { log_alphas, weights, ess, collapsed_velocity: Point::new(num) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_moons, precompute_knn, Source};
    use crate::path::interpolate;
    use proptest::prelude::*;

    fn rng() -> SeededRng {
        SeededRng::derived(7, "posterior-tests", 0)
    }

    fn tiny_dataset() -> Dataset {
        let pts = vec![
            Point::new(vec![-0.25, 0.25]),
            Point::new(vec![0.25, -0.25]),
            Point::new(vec![1.0, 1.0]),
        ];
        Dataset::new(pts, vec![0, 0, 1], Source::standard(2)).unwrap()
    }

    #[test]
    fn condition_likelihood_is_an_indicator() {
        assert_eq!(condition_log_likelihood(Label::Class(3), Label::Class(3)), 0.0);
        assert_eq!(
            condition_log_likelihood(Label::Class(0), Label::Class(1)),
            f64::NEG_INFINITY
        );
        assert_eq!(condition_log_likelihood(Label::Unconditional, Label::Class(5)), 0.0);
        assert_eq!(condition_log_likelihood(Label::Class(5), Label::Unconditional), 0.0);
        assert_eq!(ClassIndicator.log_likelihood(2, Label::Class(2)), 0.0);
        assert_eq!(ClassIndicator.log_likelihood(2, Label::Unconditional), 0.0);
    }

    #[test]
    fn kish_ess_known_values() {
        assert_eq!(kish_ess(&[1.0]).unwrap(), 1.0);
        assert_eq!(kish_ess(&[0.5, 0.5]).unwrap(), 2.0);
        let got = kish_ess(&[0.7, 0.2, 0.1]).unwrap();
        assert!((got - 1.0 / 0.54).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn kish_ess_rejects_bad_input() {
        assert!(kish_ess(&[]).is_err());
        assert!(kish_ess(&[0.5, 0.4]).is_err());
        assert!(kish_ess(&[1.5, -0.5]).is_err());
        assert!(kish_ess(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn kish_ess_stays_in_bounds_on_random_vectors() {
        // 10_000 random normalized vectors of length 1..=64
        let mut r = rng();
        for _ in 0..10_000 {
            let k = 1 + r.index(64);
            let mut w: Vec<f64> = (0..k).map(|_| r.uniform_open()).collect();
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            let ess = kish_ess(&w).unwrap();
            assert!((1.0..=k as f64).contains(&ess), "ess {ess} outside [1, {k}]");
        }
    }

    #[test]
    fn single_candidate_pool_reproduces_the_endpoint_target_bitwise() {
        let ds = tiny_dataset();
        let mut r = rng();
        for i in 0..ds.n() {
            let z = ds.point(i);
            let eps = ds.source().sample(&mut r);
            let t = r.uniform();
            let zt = interpolate(&z, &eps, t).unwrap();
            let path = PathPoint::sample(&z, eps.clone(), t, i).unwrap();
            assert_eq!(zt, *path.z_t());
            let pool = CandidatePool::new(i, vec![CandidateEntry::index(i, ds.label(i))]).unwrap();
            let expect = path.endpoint_velocity(&z);

            let collapsed =
                collapsed_target(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                    .unwrap();
            for c in 0..2 {
                assert_eq!(collapsed.velocity[c].to_bits(), expect[c].to_bits());
            }
            assert_eq!(collapsed.ess, 1.0);

            let wt = snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                .unwrap();
            assert_eq!(wt.weights, vec![1.0]);
            assert_eq!(wt.ess, 1.0);
            for c in 0..2 {
                assert_eq!(wt.collapsed_velocity[c].to_bits(), expect[c].to_bits());
            }
        }
    }

    #[test]
    fn equidistant_candidates_split_the_weight_exactly() {
        // owner z0 = (-0.25, 0.25) with eps = (0.75, 0.25) at t = 0.5 gives
        // z_t = (0.25, 0.25); candidate z1 = (0.25, -0.25) sits at the same
        // (1-t)-scaled distance, so both log weights are equal and every
        // quantity below is dyadic and exact
        let ds = tiny_dataset();
        let eps = Point::new(vec![0.75, 0.25]);
        let path = PathPoint::sample(&ds.point(0), eps.clone(), 0.5, 0).unwrap();
        assert_eq!(path.z_t().coords(), &[0.25, 0.25]);
        let pool = CandidatePool::new(
            0,
            vec![CandidateEntry::index(0, 0), CandidateEntry::index(1, 0)],
        )
        .unwrap();
        let wt =
            snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4).unwrap();
        assert_eq!(wt.weights, vec![0.5, 0.5]);
        assert_eq!(wt.ess, 2.0);
        // v_owner = eps - z0 = (1, 0); v_1 = (z_t - z1)/t = (0, 1)
        assert_eq!(wt.collapsed_velocity.coords(), &[0.5, 0.5]);

        let collapsed =
            collapsed_target(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                .unwrap();
        assert_eq!(collapsed.velocity.coords(), &[0.5, 0.5]);
        assert_eq!(collapsed.ess, 2.0);
    }

    #[test]
    fn below_t_eps_the_target_collapses_onto_the_owner() {
        let ds = tiny_dataset();
        let eps = Point::new(vec![0.3, -0.7]);
        let path = PathPoint::sample(&ds.point(0), eps.clone(), 5e-5, 0).unwrap();
        let pool = provider_full_support(&ds, 0, Label::Unconditional).unwrap();
        let expect = path.endpoint_velocity(&ds.point(0));

        let wt =
            snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4).unwrap();
        assert_eq!(wt.weights, vec![1.0, 0.0, 0.0]);
        assert_eq!(wt.log_alphas[1], f64::NEG_INFINITY);
        assert_eq!(wt.ess, 1.0);
        for c in 0..2 {
            assert_eq!(wt.collapsed_velocity[c].to_bits(), expect[c].to_bits());
        }

        let collapsed =
            collapsed_target(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                .unwrap();
        assert_eq!(collapsed.ess, 1.0);
        for c in 0..2 {
            assert_eq!(collapsed.velocity[c].to_bits(), expect[c].to_bits());
        }
    }

    #[test]
    fn weights_are_scale_invariant_in_log_space() {
        let las = [-3.2, -1.0, -7.5, -1.1];
        let (w0, ess0) = normalize_log_weights(&las).unwrap();
        for shift in [-500.0, -2.0, 0.3, 200.0] {
            let shifted: Vec<f64> = las.iter().map(|la| la + shift).collect();
            let (w1, ess1) = normalize_log_weights(&shifted).unwrap();
            for (a, b) in w0.iter().zip(&w1) {
                assert!((a - b).abs() < 1e-12, "shift {shift}: {a} vs {b}");
            }
            assert!((ess0 - ess1).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_rejects_degenerate_input() {
        assert!(matches!(
            normalize_log_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap_err(),
            Error::Internal(_)
        ));
        assert!(normalize_log_weights(&[f64::NAN]).is_err());
        assert!(normalize_log_weights(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn mismatched_condition_on_every_candidate_is_an_internal_error() {
        // precondition violation: pool drawn from class 1 while conditioning
        // on class 0 zeroes every candidate
        let ds = tiny_dataset();
        let eps = Point::new(vec![0.1, 0.1]);
        let path = PathPoint::sample(&ds.point(2), eps.clone(), 0.5, 2).unwrap();
        // two entries: the single-entry short-circuit would mask the check
        let pool = CandidatePool::new(
            2,
            vec![CandidateEntry::index(2, 1), CandidateEntry::point(Point::new(vec![0.9, 1.1]), 1)],
        )
        .unwrap();
        let err = collapsed_target(&path, pool.view(), &ds, Label::Class(0), &ClassIndicator, 1e-4)
            .unwrap_err();
        assert!(matches!(err, Error::Internal(_)), "got {err}");
        let err =
            snis_weights(&path, pool.view(), &ds, Label::Class(0), &ClassIndicator, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Internal(_)), "got {err}");
    }

    #[test]
    fn owner_weight_concentrates_as_t_shrinks() {
        let mut r = rng();
        let ds = gen_two_moons(50, 0.05, &mut r).unwrap();
        let ts = [1e-1, 1e-2, 1e-3];
        let mut avg = [0.0; 3];
        for trial in 0..40 {
            let i = r.index(ds.n());
            let z = ds.point(i);
            let eps = ds.source().sample(&mut r);
            let pool = provider_full_support(&ds, i, Label::Unconditional).unwrap();
            for (s, &t) in ts.iter().enumerate() {
                let path = PathPoint::sample(&z, eps.clone(), t, i).unwrap();
                let wt =
                    snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                        .unwrap();
                let owner_w = wt.weights[i];
                avg[s] += owner_w;
                let _ = trial;
            }
        }
        for a in &mut avg {
            *a /= 40.0;
        }
        assert!(avg[0] <= avg[1] + 1e-12 && avg[1] <= avg[2] + 1e-12, "avg owner weights {avg:?}");
        assert!(avg[2] > 0.9, "posterior should be nearly collapsed at t=1e-3, got {}", avg[2]);
    }

    #[test]
    fn streaming_and_materialized_targets_agree() {
        let mut r = rng();
        let ds = gen_two_moons(30, 0.05, &mut r).unwrap();
        for _ in 0..50 {
            let i = r.index(ds.n());
            let z = ds.point(i);
            let eps = ds.source().sample(&mut r);
            let t = 1e-4 + (1.0 - 2e-4) * r.uniform();
            let path = PathPoint::sample(&z, eps.clone(), t, i).unwrap();
            let pool = provider_full_support(&ds, i, Label::Unconditional).unwrap();
            let wt =
                snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                    .unwrap();
            let ct =
                collapsed_target(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
                    .unwrap();
            for c in 0..2 {
                assert!(
                    (wt.collapsed_velocity[c] - ct.velocity[c]).abs() < 1e-10,
                    "coordinate {c}: {} vs {}",
                    wt.collapsed_velocity[c],
                    ct.velocity[c]
                );
            }
            assert!((wt.ess - ct.ess).abs() < 1e-9 * wt.ess);
            let wsum: f64 = wt.weights.iter().sum();
            assert!((wsum - 1.0).abs() < 1e-12);
            assert!(wt.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn perturbation_with_zero_sigma_gives_uniform_weights_over_owner_copies() {
        let ds = tiny_dataset();
        let mut r = rng();
        let k = 8;
        let pool = provider_perturbation(&ds, 1, k, 0.0, &mut r).unwrap();
        assert_eq!(pool.k(), k);
        let eps = Point::new(vec![-0.4, 0.9]);
        let path = PathPoint::sample(&ds.point(1), eps.clone(), 0.3, 1).unwrap();
        let wt =
            snis_weights(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4).unwrap();
        for &w in &wt.weights {
            assert_eq!(w, 1.0 / k as f64);
        }
        assert_eq!(wt.ess, k as f64);
        let expect = path.endpoint_velocity(&ds.point(1));
        for c in 0..2 {
            assert!((wt.collapsed_velocity[c] - expect[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_candidates_stay_within_the_tail_bound() {
        // sigma = 0.05, d = 2: P(||eta||^2 > 50) = exp(-25) ~ 1.4e-11 per
        // candidate, so 900 draws all landing inside 5*sigma*sqrt(d) is the
        // overwhelmingly likely outcome
        let mut r = rng();
        let ds = gen_two_moons(20, 0.05, &mut r).unwrap();
        let sigma = 0.05;
        let bound = 5.0 * sigma * (2.0f64).sqrt();
        for i in 0..ds.n() {
            let mut pr = SeededRng::derived(11, "tail", i as u64);
            let pool = provider_perturbation(&ds, i, 10, sigma, &mut pr).unwrap();
            let z = ds.point(i);
            for entry in pool.entries() {
                if let CandidateTarget::Point(p) = entry.target() {
                    assert!(p.dist(&z) <= bound, "candidate strayed {} from owner", p.dist(&z));
                }
            }
        }
    }

    #[test]
    fn perturbation_rejects_bad_parameters() {
        let ds = tiny_dataset();
        assert!(provider_perturbation(&ds, 0, 0, 0.1, &mut rng()).is_err());
        assert!(provider_perturbation(&ds, 0, 3, -0.1, &mut rng()).is_err());
    }

    #[test]
    fn augmentation_rotations_preserve_distance_to_the_center() {
        let ds = tiny_dataset();
        let center = ds.centroid();
        let rot = RotateAboutCentroid::new(center.clone(), 0.25);
        let pool = provider_augmentation(&ds, 0, 3, &rot).unwrap();
        let base = ds.point(0).dist(&center);
        for entry in pool.entries() {
            let p = match entry.target() {
                CandidateTarget::Index(j) => ds.point(*j),
                CandidateTarget::Point(p) => p.clone(),
            };
            assert!((p.dist(&center) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_identity_yields_owner_copies_and_bad_dims_error() {
        let ds = tiny_dataset();
        let identity = |z: &Point, _k: usize| z.clone();
        let pool = provider_augmentation(&ds, 2, 4, &identity).unwrap();
        assert_eq!(pool.k(), 4);
        for entry in pool.entries() {
            let c = entry.coords(&ds);
            assert_eq!(c, ds.point_slice(2));
        }
        let bad = |_z: &Point, _k: usize| Point::new(vec![1.0]);
        assert!(provider_augmentation(&ds, 2, 3, &bad).is_err());
        assert!(provider_augmentation(&ds, 2, 0, &identity).is_err());
    }

    #[test]
    fn knn_provider_wraps_the_table_row() {
        let pts = vec![
            Point::new(vec![0.0, 0.0]),
            Point::new(vec![1.0, 0.0]),
            Point::new(vec![3.0, 0.0]),
        ];
        let ds = Dataset::new(pts, vec![0, 0, 0], Source::standard(2)).unwrap();
        let table = precompute_knn(&ds, 2).unwrap();
        let pool = provider_knn(&ds, &table, 0).unwrap();
        let targets: Vec<usize> = pool
            .entries()
            .iter()
            .map(|e| match e.target() {
                CandidateTarget::Index(j) => *j,
                CandidateTarget::Point(_) => panic!("knn pools hold indices"),
            })
            .collect();
        assert_eq!(targets, vec![0, 1]);
    }

    #[test]
    fn full_support_respects_the_condition() {
        let ds = tiny_dataset();
        let all = provider_full_support(&ds, 0, Label::Unconditional).unwrap();
        assert_eq!(all.k(), 3);
        let class0 = provider_full_support(&ds, 0, Label::Class(0)).unwrap();
        assert_eq!(class0.k(), 2);
        let class1 = provider_full_support(&ds, 2, Label::Class(1)).unwrap();
        assert_eq!(class1.k(), 1);
        // owner outside the conditioned class: pool cannot contain it
        assert!(provider_full_support(&ds, 0, Label::Class(1)).is_err());
    }

    #[test]
    fn pool_construction_requires_the_owner() {
        assert!(CandidatePool::new(0, vec![]).is_err());
        assert!(CandidatePool::new(0, vec![CandidateEntry::index(1, 0)]).is_err());
        assert!(CandidatePool::new(0, vec![CandidateEntry::point(Point::new(vec![0.0]), 0)]).is_err());
        assert!(CandidatePool::new(0, vec![CandidateEntry::index(0, 0)]).is_ok());
    }

    #[test]
    fn bulk_pools_match_per_owner_providers() {
        let mut r = rng();
        let ds = gen_two_moons(10, 0.05, &mut r).unwrap();
        let shared = build_pools(&ds, PoolProvider::FullSupport, false, 0).unwrap();
        assert_eq!(shared.n(), ds.n());
        assert_eq!(shared.max_k(), ds.n());
        for i in 0..ds.n() {
            let view = shared.view(i);
            assert_eq!(view.owner, i);
            assert_eq!(view.entries.len(), ds.n());
        }
        let cond = build_pools(&ds, PoolProvider::FullSupport, true, 0).unwrap();
        for i in 0..ds.n() {
            let view = cond.view(i);
            assert_eq!(view.entries.len(), 10);
            assert!(view.entries.iter().all(|e| e.label() == ds.label(i)));
        }
        let table = precompute_knn(&ds, 3).unwrap();
        let knn = build_pools(&ds, PoolProvider::Knn(&table), false, 0).unwrap();
        for i in 0..ds.n() {
            assert_eq!(knn.view(i).entries.len(), 3);
        }
    }

    #[test]
    fn perturbation_pools_are_order_independent_per_seed() {
        let mut r = rng();
        let ds = gen_two_moons(6, 0.05, &mut r).unwrap();
        let a = build_pools(&ds, PoolProvider::Perturbation { k: 4, sigma: 0.1 }, false, 5).unwrap();
        let b = build_pools(&ds, PoolProvider::Perturbation { k: 4, sigma: 0.1 }, false, 5).unwrap();
        for i in 0..ds.n() {
            assert_eq!(a.view(i).entries, b.view(i).entries);
        }
        let c = build_pools(&ds, PoolProvider::Perturbation { k: 4, sigma: 0.1 }, false, 6).unwrap();
        let differs = (0..ds.n()).any(|i| a.view(i).entries != c.view(i).entries);
        assert!(differs, "different seeds should perturb differently");
    }

    #[test]
    fn mismatched_path_and_pool_owner_is_rejected() {
        let ds = tiny_dataset();
        let eps = Point::new(vec![0.0, 0.0]);
        let path = PathPoint::sample(&ds.point(0), eps.clone(), 0.5, 0).unwrap();
        let pool = provider_full_support(&ds, 1, Label::Unconditional).unwrap();
        assert!(collapsed_target(&path, pool.view(), &ds, Label::Unconditional, &ClassIndicator, 1e-4)
            .is_err());
    }

    proptest! {
        #[test]
        fn normalized_weights_form_a_distribution(
            las in proptest::collection::vec(-300.0f64..10.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let (w, ess) = normalize_log_weights(&las).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((1.0..=las.len() as f64).contains(&ess));

            let shifted: Vec<f64> = las.iter().map(|la| la + shift).collect();
            let (w2, ess2) = normalize_log_weights(&shifted).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((ess - ess2).abs() < 1e-12 * ess.max(1.0));
        }
    }
}
