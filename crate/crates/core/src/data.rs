//! Datasets, labeled/unlabeled splits and minibatches.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::{self, SslRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(invalid(format!(
                "{} labels for features of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            x,
            y,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(invalid("empty subset"));
        }
        Ok(Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        })
    }
}

/// The one-dimensional selection-bias problem.
///
/// Points left of the true boundary `w* = 0` are class 1, points to the
/// right class 0. Unlabeled points are uniform on (-1, 1). Labeled class-1
/// points only come from (-1, -bias) and labeled class-0 points from
/// (bias·offset, 1), so with `offset = 0` the labeled gap sits entirely on
/// the class-1 side.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub w_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyBias {
    pub bias: f64,
    /// Fraction of `bias` by which the class-0 labeled interval is shifted
    /// right of the boundary.
    pub offset: f64,
}

pub fn toy_label(x: f64) -> usize {
    if x < 0.0 {
        1
    } else {
        0
    }
}

pub fn gen_toy_1d(
    n_labeled: usize,
    n_unlabeled: usize,
    bias: ToyBias,
    rng: &mut impl Rng,
) -> Result<ToyProblem> {
    if !(0.0..1.0).contains(&bias.bias) || !(0.0..1.0).contains(&bias.offset) {
        return Err(invalid("toy bias and offset must lie in [0, 1)"));
    }
    if n_labeled < 2 || n_unlabeled == 0 {
        return Err(invalid("toy problem needs two labeled points and some unlabeled"));
    }
    let n1 = n_labeled / 2;
    let n0 = n_labeled - n1;
    let mut lx = Vec::with_capacity(n_labeled);
    let mut ly = Vec::with_capacity(n_labeled);
    for _ in 0..n1 {
        lx.push(-1.0 + (1.0 - bias.bias) * rng.random::<f64>());
        ly.push(1);
    }
    let lo = bias.bias * bias.offset;
    for _ in 0..n0 {
        // (lo, 1]; never exactly on the boundary
        lx.push(1.0 - (1.0 - lo) * rng.random::<f64>());
        ly.push(0);
    }
    let ux: Vec<f64> = (0..n_unlabeled).map(|_| rng.random_range(-1.0..1.0)).collect();
    let uy = ux.iter().map(|&x| toy_label(x)).collect();
    Ok(ToyProblem {
        labeled: Dataset::new(Tensor::matrix(n_labeled, 1, lx)?, ly, 2, "toy1d:labeled")?,
        unlabeled: Dataset::new(Tensor::matrix(n_unlabeled, 1, ux)?, uy, 2, "toy1d:unlabeled")?,
        w_star: 0.0,
    })
}

/// Distance between any two blob centres.
pub const BLOB_CENTRE_DISTANCE: f64 = 2.0;

/// Vertices of a regular simplex with `classes` corners in `dim`
/// dimensions, pairwise distance [`BLOB_CENTRE_DISTANCE`].
pub fn simplex_vertices(classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if dim + 1 < classes {
        return Err(invalid(format!(
            "{classes} equidistant centres need at least {} dimensions, got {dim}",
            classes - 1
        )));
    }
    // Centred basis vectors of R^K span a (K-1)-dim subspace; orthonormalize
    // it and express the vertices in that basis.
    let k = classes;
    let centred: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centred.iter().take(k - 1) {
        let mut u = v.clone();
        for b in &basis {
            let dot: f64 = u.iter().zip(b).map(|(a, c)| a * c).sum();
            for (ui, bi) in u.iter_mut().zip(b) {
                *ui -= dot * bi;
            }
        }
        let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        basis.push(u.into_iter().map(|a| a / n).collect());
    }
    // ||e_i - e_j|| = sqrt(2) in R^K
    let scale = BLOB_CENTRE_DISTANCE / 2f64.sqrt();
    Ok(centred
        .iter()
        .map(|v| {
            let mut coords: Vec<f64> = basis
                .iter()
                .map(|b| scale * v.iter().zip(b).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            coords.resize(dim, 0.0);
            coords
        })
        .collect())
}

/// Isotropic Gaussian clusters, one per class, at simplex vertices.
pub fn gen_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(invalid("blob spread must be non-negative"));
    }
    if per_class == 0 {
        return Err(invalid("need at least one point per class"));
    }
    let centres = simplex_vertices(classes, dim)?;
    let normal = Normal::new(0.0, spread).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut y = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            data.extend(centre.iter().map(|&m| m + normal.sample(rng)));
            y.push(c);
        }
    }
    Dataset::new(
        Tensor::matrix(y.len(), dim, data)?,
        y,
        classes,
        format!("blobs:k={classes},d={dim},spread={spread}"),
    )
}

/// Reads `label,f0,f1,...` with a header line.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(perr(1, format!("expected header `label,f0,...`, got `{header}`")));
    }
    let d = cols.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(perr(lineno, format!("expected {} columns, got {}", d + 1, cells.len())));
        }
        let label: usize = cells[0]
            .parse()
            .map_err(|_| perr(lineno, format!("label `{}` is not a class index", cells[0])))?;
        y.push(label);
        for c in &cells[1..] {
            let v: f64 = c
                .parse()
                .map_err(|_| perr(lineno, format!("`{c}` is not a number")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("`{c}` is not finite")));
            }
            x.push(v);
        }
    }
    if y.is_empty() {
        return Err(perr(2, "no data rows".into()));
    }
    let classes = (y.iter().copied().max().unwrap() + 1).max(2);
    Dataset::new(
        Tensor::matrix(y.len(), d, x)?,
        y,
        classes,
        format!("csv:{}", path.display()),
    )
}

pub fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..ds.dim() {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for (row, y) in ds.x.row_iter().zip(&ds.y) {
        write!(out, "{y}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub n_labeled: usize,
    /// Cap on the unlabeled pool; `None` keeps everything left over.
    pub n_unlabeled: Option<usize>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SplitSpec {
    pub fn new(n_labeled: usize) -> Self {
        Self {
            n_labeled,
            n_unlabeled: None,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Disjoint index sets over one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SslSplit {
    pub labeled: Vec<usize>,
    /// Labels of these rows are kept in the dataset but only reach the
    /// training loop through [`SslBatch::diagnostics`].
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Reserves validation and test rows first, then draws a class-stratified
/// labeled set from the remainder.
pub fn split_labeled_unlabeled(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<SslSplit> {
    let n = ds.len();
    if spec.n_labeled < ds.classes {
        return Err(invalid(format!(
            "{} labeled examples cannot cover {} classes",
            spec.n_labeled, ds.classes
        )));
    }
    let fr_ok = |f: f64| (0.0..1.0).contains(&f);
    if !fr_ok(spec.val_fraction) || !fr_ok(spec.test_fraction) || spec.val_fraction + spec.test_fraction >= 1.0 {
        return Err(invalid("validation and test fractions must be in [0, 1) and sum below 1"));
    }
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    if n_val + n_test + spec.n_labeled > n {
        return Err(invalid(format!(
            "{} labeled + {} reserved exceeds {n} rows",
            spec.n_labeled,
            n_val + n_test
        )));
    }
    let mut rng = rng::stream(seed, rng::streams::SPLIT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let validation = order[..n_val].to_vec();
    let test = order[n_val..n_val + n_test].to_vec();
    let rest = &order[n_val + n_test..];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for &i in rest {
        by_class[ds.y[i]].push(i);
    }
    let base = spec.n_labeled / ds.classes;
    let mut extra = spec.n_labeled % ds.classes;
    let mut class_order: Vec<usize> = (0..ds.classes).collect();
    class_order.shuffle(&mut rng);
    let mut quota = vec![base; ds.classes];
    for &c in &class_order {
        if extra == 0 {
            break;
        }
        quota[c] += 1;
        extra -= 1;
    }
    let mut labeled = Vec::with_capacity(spec.n_labeled);
    for (c, pool) in by_class.iter().enumerate() {
        if pool.len() < quota[c] {
            return Err(invalid(format!(
                "class {c} has {} rows left, {} requested",
                pool.len(),
                quota[c]
            )));
        }
        labeled.extend_from_slice(&pool[..quota[c]]);
    }
    labeled.sort_unstable();
    let mut unlabeled: Vec<usize> = rest
        .iter()
        .copied()
        .filter(|i| labeled.binary_search(i).is_err())
        .collect();
    if let Some(cap) = spec.n_unlabeled {
        unlabeled.truncate(cap);
    }
    Ok(SslSplit {
        labeled,
        unlabeled,
        validation,
        test,
    })
}

/// Hidden-label view of a batch.
pub struct Diagnostics<'a> {
    pub unlabeled_labels: &'a [usize],
}

/// One labeled minibatch and one unlabeled minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct SslBatch {
    pub x_labeled: Tensor,
    pub y_labeled: Vec<usize>,
    x_unlabeled: Option<Tensor>,
    hidden_labels: Vec<usize>,
}

impl SslBatch {
    pub fn new(
        x_labeled: Tensor,
        y_labeled: Vec<usize>,
        x_unlabeled: Option<Tensor>,
        hidden_labels: Vec<usize>,
    ) -> Result<Self> {
        if x_labeled.rows() != y_labeled.len() {
            return Err(invalid("labeled rows and labels differ in count"));
        }
        let nu = x_unlabeled.as_ref().map_or(0, Tensor::rows);
        if !hidden_labels.is_empty() && hidden_labels.len() != nu {
            return Err(invalid("hidden labels must match unlabeled rows"));
        }
        Ok(Self {
            x_labeled,
            y_labeled,
            x_unlabeled,
            hidden_labels,
        })
    }

    pub fn x_unlabeled(&self) -> Option<&Tensor> {
        self.x_unlabeled.as_ref()
    }

    /// True labels of the unlabeled rows. Only oracle negative selection and
    /// reporting may look at these.
    pub fn diagnostics(&self) -> Diagnostics<'_> {
        Diagnostics {
            unlabeled_labels: &self.hidden_labels,
        }
    }
}

/// Draws indices in reshuffled passes over a pool.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(pool: Vec<usize>) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            pool,
        }
    }

    pub fn next_indices(&mut self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if self.pool.is_empty() {
            return out;
        }
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Produces [`SslBatch`]es from a dataset and split. Labeled and unlabeled
/// draws use separate random streams.
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    labeled: EpochSampler,
    unlabeled: EpochSampler,
    labeled_rng: SslRng,
    unlabeled_rng: SslRng,
}

impl<'a> BatchStream<'a> {
    pub fn new(ds: &'a Dataset, split: &SslSplit, seed: u64) -> Self {
        Self {
            ds,
            labeled: EpochSampler::new(split.labeled.clone()),
            unlabeled: EpochSampler::new(split.unlabeled.clone()),
            labeled_rng: rng::stream(seed, rng::streams::LABELED_BATCHES),
            unlabeled_rng: rng::stream(seed, rng::streams::UNLABELED_BATCHES),
        }
    }

    /// `b2 = 0` skips the unlabeled draw entirely.
    pub fn next_batch(&mut self, b1: usize, b2: usize) -> Result<SslBatch> {
        if b1 == 0 {
            return Err(invalid("labeled batch size must be at least 1"));
        }
        let li = self.labeled.next_indices(b1, &mut self.labeled_rng);
        if li.is_empty() {
            return Err(invalid("labeled pool is empty"));
        }
        let ui = if b2 > 0 {
            self.unlabeled.next_indices(b2, &mut self.unlabeled_rng)
        } else {
            Vec::new()
        };
        let xu = (!ui.is_empty()).then(|| self.ds.x.select_rows(&ui));
        SslBatch::new(
            self.ds.x.select_rows(&li),
            li.iter().map(|&i| self.ds.y[i]).collect(),
            xu,
            ui.iter().map(|&i| self.ds.y[i]).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::collections::HashSet;

    #[test]
    fn toy_labels_respect_boundary_and_bias() {
        let p = gen_toy_1d(40, 500, ToyBias { bias: 0.6, offset: 0.0 }, &mut seeded(1)).unwrap();
        for (x, &y) in p.labeled.x.data().iter().zip(&p.labeled.y) {
            if y == 1 {
                assert!(*x < -0.6 && *x >= -1.0);
            } else {
                assert!(*x > 0.0 && *x <= 1.0);
            }
        }
        for (x, &y) in p.unlabeled.x.data().iter().zip(&p.unlabeled.y) {
            assert_eq!(y, toy_label(*x));
        }
        assert_eq!(p.w_star, 0.0);
        assert!(gen_toy_1d(4, 4, ToyBias { bias: 1.0, offset: 0.0 }, &mut seeded(1)).is_err());
    }

    #[test]
    fn toy_unlabeled_mean_near_zero() {
        let n = 100_000;
        let p = gen_toy_1d(2, n, ToyBias { bias: 0.0, offset: 0.0 }, &mut seeded(2)).unwrap();
        let mean = p.unlabeled.x.sum() / n as f64;
        // Uniform(-1, 1) has std 1/sqrt(3)
        let sigma = (1.0f64 / 3.0).sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn simplex_centres_are_equidistant() {
        for (k, d) in [(2, 1), (3, 2), (4, 8), (10, 9)] {
            let v = simplex_vertices(k, d).unwrap();
            for i in 0..k {
                assert_eq!(v[i].len(), d);
                for j in i + 1..k {
                    let dist: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!((dist - BLOB_CENTRE_DISTANCE).abs() < 1e-9, "{k} {d} {dist}");
                }
            }
        }
        assert!(simplex_vertices(4, 2).is_err());
    }

    #[test]
    fn blobs_counts_and_separation() {
        let ds = gen_blobs(4, 25, 8, 0.0, &mut seeded(3)).unwrap();
        for c in 0..4 {
            assert_eq!(ds.y.iter().filter(|&&y| y == c).count(), 25);
        }
        let centres = simplex_vertices(4, 8).unwrap();
        for (row, &y) in ds.x.row_iter().zip(&ds.y) {
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centres[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centres[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, y);
        }
        let again = gen_blobs(4, 25, 8, 0.0, &mut seeded(3)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn csv_fixture_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,f0,f1\n0,1.5,2\n2,-1,0.25\n1,0,0\n").unwrap();
        let ds = load_csv_dataset(&p).unwrap();
        assert_eq!(ds.x.shape(), &[3, 2]);
        assert_eq!(ds.y, vec![0, 2, 1]);
        assert_eq!(ds.classes, 3);

        std::fs::write(&p, "label,f0,f1\n0,1.5,2\n2,-1\n").unwrap();
        let e = load_csv_dataset(&p).unwrap_err().to_string();
        assert!(e.contains(":3:"), "{e}");

        std::fs::write(&p, "label,f0\n0,abc\n").unwrap();
        let e = load_csv_dataset(&p).unwrap_err().to_string();
        assert!(e.contains(":2:") && e.contains("abc"), "{e}");

        std::fs::write(&p, "").unwrap();
        assert!(load_csv_dataset(&p).unwrap_err().to_string().contains("empty file"));
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_blobs(3, 4, 2, 0.7, &mut seeded(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv_dataset(&ds, &p).unwrap();
        let back = load_csv_dataset(&p).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let ds = gen_blobs(4, 50, 3, 1.0, &mut seeded(0)).unwrap();
        let s = split_labeled_unlabeled(&ds, &SplitSpec::new(10), 11).unwrap();
        let mut all: Vec<usize> = [&s.labeled, &s.unlabeled, &s.validation, &s.test]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let counts: Vec<usize> = (0..4)
            .map(|c| s.labeled.iter().filter(|&&i| ds.y[i] == c).count())
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(s.validation.len(), 20);
        let other = split_labeled_unlabeled(&ds, &SplitSpec::new(10), 12).unwrap();
        assert_ne!(s.labeled, other.labeled);
        assert!(split_labeled_unlabeled(&ds, &SplitSpec::new(3), 1).is_err());
    }

    #[test]
    fn epochs_cover_pool_before_reuse() {
        let ds = gen_blobs(2, 20, 2, 1.0, &mut seeded(0)).unwrap();
        let split = split_labeled_unlabeled(&ds, &SplitSpec::new(6), 1).unwrap();
        let mut stream = BatchStream::new(&ds, &split, 5);
        let mut seen = Vec::new();
        for _ in 0..3 {
            let b = stream.next_batch(2, 4).unwrap();
            assert_eq!(b.x_labeled.rows(), 2);
            assert_eq!(b.x_unlabeled().unwrap().rows(), 4);
            assert_eq!(b.diagnostics().unlabeled_labels.len(), 4);
            seen.extend(b.y_labeled);
        }
        // every labeled row appears once in the first epoch of six draws
        let mut sampler = EpochSampler::new(split.labeled.clone());
        let first: HashSet<usize> = sampler.next_indices(6, &mut seeded(1)).into_iter().collect();
        assert_eq!(first, split.labeled.iter().copied().collect());
        assert_eq!(seen.len(), 6);
        assert!(stream.next_batch(0, 1).is_err());
        assert!(stream.next_batch(1, 0).unwrap().x_unlabeled().is_none());
    }
}
