//! Synthetic datasets, subsampling, exact nearest neighbors, and file I/O.
//!
//! Coordinates are serialized as shortest round-trip decimals, so every file
//! written here reads back bitwise-identical and repeated runs with the same
//! seed produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Point;
use crate::rng::{gaussian_sample, SeededRng};

/// Isotropic Gaussian source distribution for the noise end of the path.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    mean: Point,
    std: f64,
}

impl Source {
    pub fn new(mean: Point, std: f64) -> Result<Self> {
        if std < 0.0 {
            return Err(Error::invalid(format!("negative source std {std}")));
        }
        Ok(Source { mean, std })
    }

    /// Standard normal source in d dimensions.
    pub fn standard(d: usize) -> Self {
        Source { mean: Point::zeros(d), std: 1.0 }
    }

    pub fn mean(&self) -> &Point {
        &self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Point {
        gaussian_sample(rng, self.dim(), &self.mean, self.std)
            .expect("source parameters are validated at construction")
    }
}

/// Indexed collection of labeled points plus the source distribution the
/// experiment pairs them with. Point storage is flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    coords: Vec<f64>,
    labels: Vec<usize>,
    source: Source,
}

impl Dataset {
    pub fn new(points: Vec<Point>, labels: Vec<usize>, source: Source) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dataset must contain at least one point"));
        }
        if points.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let d = points[0].dim();
        if d == 0 {
            return Err(Error::invalid("points must have at least one coordinate"));
        }
        if source.dim() != d {
            return Err(Error::invalid(format!(
                "source dimension {} does not match data dimension {d}",
                source.dim()
            )));
        }
        let mut coords = Vec::with_capacity(points.len() * d);
        for p in &points {
            if p.dim() != d {
                return Err(Error::invalid("inconsistent point dimensions"));
            }
            coords.extend_from_slice(p.coords());
        }
        Ok(Dataset { d, coords, labels, source })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point_slice(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn point(&self, i: usize) -> Point {
        Point::new(self.point_slice(i).to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct labels in ascending order.
    pub fn label_set(&self) -> Vec<usize> {
        let mut set: Vec<usize> = self.labels.clone();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn class_indices(&self, label: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn with_source(mut self, source: Source) -> Result<Self> {
        if source.dim() != self.d {
            return Err(Error::invalid(format!(
                "source dimension {} does not match data dimension {}",
                source.dim(),
                self.d
            )));
        }
        self.source = source;
        Ok(self)
    }

    /// Mean of all points.
    pub fn centroid(&self) -> Point {
        let mut acc = vec![0.0; self.d];
        for i in 0..self.n() {
            for (a, c) in acc.iter_mut().zip(self.point_slice(i)) {
                *a += c;
            }
        }
        let inv = 1.0 / self.n() as f64;
        Point::new(acc.iter().map(|a| a * inv).collect())
    }

    /// Mean distance from each point to its nearest distinct neighbor.
    pub fn mean_nn_spacing(&self) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = crate::numeric::dist_sq(self.point_slice(i), self.point_slice(j));
                if d < best {
                    best = d;
                }
            }
            total += best.sqrt();
        }
        total / n as f64
    }
}

/// Two interleaved crescents in the plane. Class 0 lies on the unit upper
/// half-circle, class 1 on its reflection shifted to (1, 0.5). Angles are
/// uniform on [0, pi); Gaussian jitter of scale `noise_std` is added per
/// coordinate. The attached source is standard normal; callers that want a
/// shifted source swap it with [`Dataset::with_source`].
pub fn gen_two_moons(n_per_class: usize, noise_std: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    if noise_std < 0.0 {
        return Err(Error::invalid(format!("negative noise_std {noise_std}")));
    }
    let mut points = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2usize {
        for _ in 0..n_per_class {
            let theta = std::f64::consts::PI * rng.uniform();
            let (x, y) = if class == 0 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            let jx = noise_std * rng.standard_normal();
            let jy = noise_std * rng.standard_normal();
            points.push(Point::new(vec![x + jx, y + jy]));
            labels.push(class);
        }
    }
    Dataset::new(points, labels, Source::standard(2))
}

/// Isotropic Gaussian blobs, one label per center.
pub fn gen_gaussian_mixture(
    centers: &[Point],
    stds: &[f64],
    n_per_center: usize,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::invalid("mixture needs at least one center"));
    }
    if centers.len() != stds.len() {
        return Err(Error::invalid(format!(
            "{} centers but {} stds",
            centers.len(),
            stds.len()
        )));
    }
    if n_per_center == 0 {
        return Err(Error::invalid("n_per_center must be positive"));
    }
    let d = centers[0].dim();
    let mut points = Vec::with_capacity(centers.len() * n_per_center);
    let mut labels = Vec::with_capacity(centers.len() * n_per_center);
    for (c, (center, std)) in centers.iter().zip(stds).enumerate() {
        if center.dim() != d {
            return Err(Error::invalid("inconsistent center dimensions"));
        }
        if *std < 0.0 {
            return Err(Error::invalid(format!("negative std {std} for center {c}")));
        }
        for _ in 0..n_per_center {
            points.push(gaussian_sample(rng, d, center, *std)?);
            labels.push(c);
        }
    }
    Dataset::new(points, labels, Source::standard(d))
}

/// Uniform without-replacement subsample, class-balanced to within one point.
/// Selected indices are emitted in their original order, so subsampling the
/// full size returns the dataset unchanged.
pub fn subsample(dataset: &Dataset, n_total: usize, rng: &mut SeededRng) -> Result<Dataset> {
    if n_total == 0 || n_total > dataset.n() {
        return Err(Error::invalid(format!(
            "subsample size {n_total} outside 1..={}",
            dataset.n()
        )));
    }
    if n_total == dataset.n() {
        return Ok(dataset.clone());
    }
    let classes = dataset.label_set();
    let base = n_total / classes.len();
    let remainder = n_total % classes.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(n_total);
    for (c, label) in classes.iter().enumerate() {
        let quota = base + usize::from(c < remainder);
        let mut indices = dataset.class_indices(*label);
        if quota > indices.len() {
            return Err(Error::invalid(format!(
                "class {label} has {} points, quota is {quota}",
                indices.len()
            )));
        }
        // partial Fisher-Yates: the first `quota` slots become the sample
        for j in 0..quota {
            let r = j + rng.index(indices.len() - j);
            indices.swap(j, r);
        }
        chosen.extend_from_slice(&indices[..quota]);
    }
    chosen.sort_unstable();
    let points = chosen.iter().map(|&i| dataset.point(i)).collect();
    let labels = chosen.iter().map(|&i| dataset.label(i)).collect();
    Dataset::new(points, labels, dataset.source().clone())
}

/// Precomputed nearest-neighbor candidate lists, one row per dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnTable {
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl KnnTable {
    pub fn new(k: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
        }
        Ok(KnnTable { k, rows })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }
}

/// Exact brute-force k nearest neighbors within each class, self included.
/// Candidates are ordered by (distance, index) ascending; ties break toward
/// the lower index. Every row is forced to contain its owner: if `k` zero
/// distance duplicates with lower indices crowd the owner out, the farthest
/// retrieved entry is replaced by the owner and the row is re-sorted.
pub fn precompute_knn(dataset: &Dataset, k: usize) -> Result<KnnTable> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    for label in dataset.label_set() {
        let size = dataset.class_indices(label).len();
        if k > size {
            return Err(Error::invalid(format!(
                "k = {k} exceeds class {label} size {size}"
            )));
        }
    }
    let mut rows = vec![Vec::new(); dataset.n()];
    for label in dataset.label_set() {
        let members = dataset.class_indices(label);
        for &i in &members {
            let mut dists: Vec<(f64, usize)> = members
                .iter()
                .map(|&j| (crate::numeric::dist_sq(dataset.point_slice(i), dataset.point_slice(j)), j))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            dists.truncate(k);
            if !dists.iter().any(|&(_, j)| j == i) {
                let last = dists.len() - 1;
                dists[last] = (0.0, i);
                dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            }
            rows[i] = dists.into_iter().map(|(_, j)| j).collect();
        }
    }
    KnnTable::new(k, rows)
}

fn fmt_float(x: f64) -> String {
    format!("{x}")
}

fn parse_float(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("bad float {s:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value {s:?}") });
    }
    Ok(v)
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("bad integer {s:?}") })
}

/// Writes `dataset.csv`: a header `d,n,labels` (labels space-separated),
/// then one `x0,...,x{d-1},label` row per point.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    let labels: Vec<String> = dataset.label_set().iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "{},{},{}", dataset.dim(), dataset.n(), labels.join(" "));
    for i in 0..dataset.n() {
        let coords: Vec<String> = dataset.point_slice(i).iter().map(|c| fmt_float(*c)).collect();
        let _ = writeln!(out, "{},{}", coords.join(","), dataset.label(i));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a `dataset.csv`. The attached source is standard normal; the caller
/// applies the experiment's source with [`Dataset::with_source`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty dataset file".into() })?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 3 {
        return Err(Error::Parse { line: 1, message: "header must be d,n,labels".into() });
    }
    let d = parse_usize(fields[0], 1)?;
    let n = parse_usize(fields[1], 1)?;
    let mut declared = Vec::new();
    for tok in fields[2].split_whitespace() {
        declared.push(parse_usize(tok, 1)?);
    }
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != d + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", d + 1, cells.len()),
            });
        }
        let mut coords = Vec::with_capacity(d);
        for cell in &cells[..d] {
            coords.push(parse_float(cell, line)?);
        }
        let label = parse_usize(cells[d], line)?;
        if !declared.contains(&label) {
            return Err(Error::Parse {
                line,
                message: format!("label {label} not in header set"),
            });
        }
        points.push(Point::checked(coords).map_err(|e| Error::Parse { line, message: e.to_string() })?);
        labels.push(label);
    }
    if points.len() != n {
        return Err(Error::Parse {
            line: points.len() + 1,
            message: format!("header declares {n} rows, found {}", points.len()),
        });
    }
    Dataset::new(points, labels, Source::standard(d))
}

/// Writes `candidates.csv`: one `owner: j1,j2,...,jK` row per dataset index.
pub fn write_candidates(path: &Path, table: &KnnTable) -> Result<()> {
    let mut out = String::new();
    for i in 0..table.n() {
        let row: Vec<String> = table.row(i).iter().map(|j| j.to_string()).collect();
        let _ = writeln!(out, "{}: {}", i, row.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a `candidates.csv` and checks it covers owners 0..expected_n.
pub fn read_candidates(path: &Path, expected_n: usize) -> Result<KnnTable> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Option<Vec<usize>>> = vec![None; expected_n];
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (owner_part, list_part) = raw
            .split_once(':')
            .ok_or_else(|| Error::Parse { line, message: "expected `owner: j1,j2,...`".into() })?;
        let owner = parse_usize(owner_part, line)?;
        if owner >= expected_n {
            return Err(Error::Parse {
                line,
                message: format!("owner {owner} outside 0..{expected_n}"),
            });
        }
        let mut entries = Vec::new();
        for tok in list_part.split(',') {
            entries.push(parse_usize(tok, line)?);
        }
        if entries.is_empty() {
            return Err(Error::Parse { line, message: "empty candidate list".into() });
        }
        rows[owner] = Some(entries);
    }
    let mut table = Vec::with_capacity(expected_n);
    for (owner, row) in rows.into_iter().enumerate() {
        table.push(row.ok_or_else(|| {
            Error::config(format!("candidate file is missing owner {owner}"))
        })?);
    }
    let k = table[0].len();
    KnnTable::new(k, table)
}

/// Writes `samples.csv`: one `x0,...,x{d-1}` row per point, no header.
pub fn write_samples(path: &Path, points: &[Point]) -> Result<()> {
    let mut out = String::new();
    for p in points {
        let coords: Vec<String> = p.coords().iter().map(|c| fmt_float(*c)).collect();
        let _ = writeln!(out, "{}", coords.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Point>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (idx, row) in text.lines().enumerate() {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let mut coords = Vec::new();
        for cell in row.split(',') {
            coords.push(parse_float(cell, line)?);
        }
        points.push(Point::checked(coords).map_err(|e| Error::Parse { line, message: e.to_string() })?);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng() -> SeededRng {
        SeededRng::derived(42, "data-tests", 0)
    }

    #[test]
    fn two_moons_without_noise_lie_on_their_circles() {
        let ds = gen_two_moons(200, 0.0, &mut rng()).unwrap();
        assert_eq!(ds.n(), 400);
        for i in 0..ds.n() {
            let p = ds.point_slice(i);
            let r2 = if ds.label(i) == 0 {
                p[0] * p[0] + p[1] * p[1]
            } else {
                (p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)
            };
            assert!((r2 - 1.0).abs() < 1e-12, "point {i} off its circle: r2 = {r2}");
        }
    }

    #[test]
    fn two_moons_labels_split_evenly() {
        let ds = gen_two_moons(50, 0.05, &mut rng()).unwrap();
        assert_eq!(ds.class_indices(0).len(), 50);
        assert_eq!(ds.class_indices(1).len(), 50);
        assert_eq!(ds.label_set(), vec![0, 1]);
    }

    #[test]
    fn two_moons_is_deterministic_per_seed() {
        let a = gen_two_moons(30, 0.05, &mut SeededRng::derived(7, "d", 0)).unwrap();
        let b = gen_two_moons(30, 0.05, &mut SeededRng::derived(7, "d", 0)).unwrap();
        for i in 0..a.n() {
            assert_eq!(a.point_slice(i), b.point_slice(i));
        }
    }

    #[test]
    fn mixture_sample_means_sit_near_the_centers() {
        // 10_000 draws per center at std 0.1: the per-coordinate standard
        // error is 1e-3, so 0.02 is a twenty-sigma bound.
        let centers = vec![Point::new(vec![-5.0, 0.0]), Point::new(vec![5.0, 0.0])];
        let ds = gen_gaussian_mixture(&centers, &[0.1, 0.1], 10_000, &mut rng()).unwrap();
        for (c, center) in centers.iter().enumerate() {
            let members = ds.class_indices(c);
            let mut mean = [0.0, 0.0];
            for &i in &members {
                mean[0] += ds.point_slice(i)[0];
                mean[1] += ds.point_slice(i)[1];
            }
            mean[0] /= members.len() as f64;
            mean[1] /= members.len() as f64;
            assert!((mean[0] - center[0]).abs() < 0.02);
            assert!((mean[1] - center[1]).abs() < 0.02);
        }
    }

    #[test]
    fn mixture_rejects_mismatched_parameters() {
        let centers = vec![Point::new(vec![0.0])];
        assert!(gen_gaussian_mixture(&centers, &[0.1, 0.2], 5, &mut rng()).is_err());
        assert!(gen_gaussian_mixture(&centers, &[-0.1], 5, &mut rng()).is_err());
        assert!(gen_gaussian_mixture(&[], &[], 5, &mut rng()).is_err());
    }

    #[test]
    fn subsample_is_class_balanced_and_order_preserving() {
        let ds = gen_two_moons(1000, 0.05, &mut rng()).unwrap();
        let sub = subsample(&ds, 100, &mut rng()).unwrap();
        assert_eq!(sub.n(), 100);
        assert_eq!(sub.class_indices(0).len(), 50);
        assert_eq!(sub.class_indices(1).len(), 50);
        // class 0 indices all precede class 1 indices in the source, so
        // order preservation means the labels arrive sorted
        let mut sorted = sub.labels().to_vec();
        sorted.sort_unstable();
        assert_eq!(sub.labels(), sorted.as_slice());
    }

    #[test]
    fn subsample_full_size_is_identity() {
        let ds = gen_two_moons(20, 0.05, &mut rng()).unwrap();
        let sub = subsample(&ds, ds.n(), &mut rng()).unwrap();
        for i in 0..ds.n() {
            assert_eq!(sub.point_slice(i), ds.point_slice(i));
            assert_eq!(sub.label(i), ds.label(i));
        }
    }

    #[test]
    fn subsample_odd_count_splits_within_one() {
        let ds = gen_two_moons(50, 0.05, &mut rng()).unwrap();
        let sub = subsample(&ds, 75, &mut rng()).unwrap();
        let a = sub.class_indices(0).len();
        let b = sub.class_indices(1).len();
        assert_eq!(a + b, 75);
        assert!(a.abs_diff(b) <= 1);
    }

    #[test]
    fn subsample_rejects_bad_sizes() {
        let ds = gen_two_moons(5, 0.0, &mut rng()).unwrap();
        assert!(subsample(&ds, 0, &mut rng()).is_err());
        assert!(subsample(&ds, 11, &mut rng()).is_err());
    }

    #[test]
    fn knn_on_a_line_picks_adjacent_points() {
        // single class at x = 0, 1, 3: the 2-NN of 0 are {0, 1}
        let pts = vec![
            Point::new(vec![0.0, 0.0]),
            Point::new(vec![1.0, 0.0]),
            Point::new(vec![3.0, 0.0]),
        ];
        let ds = Dataset::new(pts, vec![0, 0, 0], Source::standard(2)).unwrap();
        let table = precompute_knn(&ds, 2).unwrap();
        assert_eq!(table.row(0), &[0, 1]);
        assert_eq!(table.row(1), &[1, 0]);
        assert_eq!(table.row(2), &[2, 1]);
    }

    #[test]
    fn knn_k_equal_to_class_size_covers_the_class() {
        let ds = gen_two_moons(8, 0.05, &mut rng()).unwrap();
        let table = precompute_knn(&ds, 8).unwrap();
        for i in 0..ds.n() {
            let mut got = table.row(i).to_vec();
            got.sort_unstable();
            let want = ds.class_indices(ds.label(i));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_rows_always_contain_their_owner() {
        // four coincident points: owner forced in despite zero-distance ties
        let pts = vec![Point::new(vec![0.0, 0.0]); 4];
        let ds = Dataset::new(pts, vec![0; 4], Source::standard(2)).unwrap();
        let table = precompute_knn(&ds, 2).unwrap();
        for i in 0..4 {
            assert!(table.row(i).contains(&i), "row {i} = {:?}", table.row(i));
        }
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let ds = gen_two_moons(4, 0.0, &mut rng()).unwrap();
        assert!(precompute_knn(&ds, 5).is_err());
        assert!(precompute_knn(&ds, 0).is_err());
    }

    #[test]
    fn knn_matches_a_sort_based_oracle_on_random_data() {
        // independent oracle: lexicographic sort on (distance, index) with
        // the same forced-owner rule
        let mut r = SeededRng::derived(99, "knn-oracle", 0);
        for trial in 0..10 {
            let n = 12 + (trial % 5);
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(vec![r.normal(0.0, 2.0), r.normal(0.0, 2.0)]))
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let ds = Dataset::new(pts, labels, Source::standard(2)).unwrap();
            let k = 3;
            let table = precompute_knn(&ds, k).unwrap();
            for i in 0..n {
                let members = ds.class_indices(ds.label(i));
                let mut pairs: Vec<(f64, usize)> = members
                    .iter()
                    .map(|&j| (ds.point(i).dist_sq(&ds.point(j)), j))
                    .collect();
                pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut expect: Vec<usize> = pairs.iter().take(k).map(|&(_, j)| j).collect();
                if !expect.contains(&i) {
                    expect.pop();
                    expect.push(i);
                    let mut pairs2: Vec<(f64, usize)> = expect
                        .iter()
                        .map(|&j| (ds.point(i).dist_sq(&ds.point(j)), j))
                        .collect();
                    pairs2.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    expect = pairs2.into_iter().map(|(_, j)| j).collect();
                }
                assert_eq!(table.row(i), expect.as_slice(), "owner {i} trial {trial}");
            }
        }
    }

    #[test]
    fn dataset_file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let ds = gen_two_moons(40, 0.05, &mut rng()).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.n(), ds.n());
        for i in 0..ds.n() {
            assert_eq!(back.point_slice(i), ds.point_slice(i));
            assert_eq!(back.label(i), ds.label(i));
        }
        // a second write of the re-read dataset is byte-identical
        let path2 = dir.path().join("dataset2.csv");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn dataset_parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "2,2,0 1\n0.1,0.2,0\n0.3,oops,1\n").unwrap();
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected error {e}"),
        }
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_dataset(&path).unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dataset_row_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        std::fs::write(&path, "2,3,0\n0.1,0.2,0\n").unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn candidates_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("candidates.csv");
        let ds = gen_two_moons(10, 0.05, &mut rng()).unwrap();
        let table = precompute_knn(&ds, 4).unwrap();
        write_candidates(&path, &table).unwrap();
        let back = read_candidates(&path, ds.n()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn candidates_file_missing_owner_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("candidates.csv");
        std::fs::write(&path, "0: 0,1\n2: 2,1\n").unwrap();
        assert!(matches!(read_candidates(&path, 3).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn samples_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let pts = vec![Point::new(vec![0.5, -1.25]), Point::new(vec![3e-17, 2.0])];
        write_samples(&path, &pts).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(back, pts);
    }

    proptest! {
        #[test]
        fn float_serialization_round_trips_bitwise(
            xs in proptest::collection::vec(
                prop_oneof![
                    -1e12f64..1e12,
                    -1.0f64..1.0,
                    Just(0.0f64), Just(-0.0f64), Just(1e-300f64), Just(-2.5e300f64),
                ],
                1..6,
            )
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.csv");
            let p = vec![Point::new(xs.clone())];
            write_samples(&path, &p).unwrap();
            let back = read_samples(&path).unwrap();
            for (a, b) in back[0].coords().iter().zip(&xs) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
