//! Seeded two-domain classification problems and their CSV interchange format.
//!
//! Source and target are drawn from independent random streams split from a
//! single seed. The target is then moved by a [`ShiftSpec`]: rotation about
//! the sample centroid first, then a per-axis scale and translation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotation,
    Affine,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub rotation_deg: f64,
    /// Per-axis scale; empty means all ones.
    pub scale: Vec<f64>,
    /// Per-axis offset; empty means all zeros.
    pub translate: Vec<f64>,
    pub noise_std: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { kind: ShiftKind::Rotation, rotation_deg: 45.0, scale: Vec::new(), translate: Vec::new(), noise_std: 0.1 }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, ..Default::default() }
    }

    pub fn rotation(deg: f64) -> Self {
        Self { rotation_deg: deg, ..Default::default() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(0.0..360.0).contains(&self.rotation_deg) {
            return Err(Error::Config(format!("rotation_deg must lie in [0, 360), got {}", self.rotation_deg)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.rotates() && self.rotation_deg != 0.0 && dim != 2 {
            return Err(Error::Config(format!("rotation shifts need 2-d inputs, got {dim}")));
        }
        for (name, v) in [("scale", &self.scale), ("translate", &self.translate)] {
            if !v.is_empty() && v.len() != dim {
                return Err(Error::Config(format!("shift {name} has {} entries for {dim}-d inputs", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("shift {name} must be finite")));
            }
        }
        Ok(())
    }

    fn rotates(&self) -> bool {
        matches!(self.kind, ShiftKind::Rotation | ShiftKind::Both)
    }

    fn is_affine(&self) -> bool {
        matches!(self.kind, ShiftKind::Affine | ShiftKind::Both)
    }

    /// Applies the shift to every row of `x` (rows are samples).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, dim) = matrix_dims(x, "shift")?;
        self.validate(dim)?;
        let mut out = x.clone();
        if self.rotates() && self.rotation_deg != 0.0 && n > 0 {
            let (cx, cy) = centroid2(x);
            let (s, c) = libm::sincos(self.rotation_deg.to_radians());
            for row in out.data_mut().chunks_mut(2) {
                let (dx, dy) = (row[0] - cx, row[1] - cy);
                row[0] = cx + c * dx - s * dy;
                row[1] = cy + s * dx + c * dy;
            }
        }
        if self.is_affine() {
            for row in out.data_mut().chunks_mut(dim) {
                for (j, v) in row.iter_mut().enumerate() {
                    let scale = self.scale.get(j).copied().unwrap_or(1.0);
                    let shift = self.translate.get(j).copied().unwrap_or(0.0);
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }
}

fn matrix_dims(x: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    x.dims2().ok_or_else(|| Error::shape(what, format!("expected a matrix, got {:?}", x.shape())))
}

fn centroid2(x: &Tensor) -> (f64, f64) {
    let n = x.shape()[0] as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for row in x.data().chunks(2) {
        sx += row[0];
        sy += row[1];
    }
    (sx / n, sy / n)
}

/// Labeled source samples, unlabeled target samples, and target labels that
/// only evaluation may read.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    x_s: Tensor,
    y_s: Vec<usize>,
    x_t: Tensor,
    y_t_eval: Option<Vec<usize>>,
    num_classes: usize,
}

impl DomainPair {
    pub fn new(x_s: Tensor, y_s: Vec<usize>, x_t: Tensor, y_t_eval: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let (ns, ds) = matrix_dims(&x_s, "source inputs")?;
        let (nt, dt) = matrix_dims(&x_t, "target inputs")?;
        if ds != dt {
            return Err(Error::Schema(format!("source has {ds} features, target has {dt}")));
        }
        if y_s.len() != ns {
            return Err(Error::Schema(format!("{} source labels for {ns} rows", y_s.len())));
        }
        if num_classes < 2 {
            return Err(Error::Schema(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(y) = &y_t_eval {
            if y.len() != nt {
                return Err(Error::Schema(format!("{} target labels for {nt} rows", y.len())));
            }
        }
        for &y in y_s.iter().chain(y_t_eval.iter().flatten()) {
            if y >= num_classes {
                return Err(Error::Schema(format!("label {y} outside [0, {num_classes})")));
            }
        }
        Ok(Self { x_s, y_s, x_t, y_t_eval, num_classes })
    }

    pub fn source_inputs(&self) -> &Tensor {
        &self.x_s
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.y_s
    }

    pub fn target_inputs(&self) -> &Tensor {
        &self.x_t
    }

    /// Held-out target labels. Training code never calls this.
    pub fn target_eval_labels(&self) -> Option<&[usize]> {
        self.y_t_eval.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.x_s.shape()[1]
    }

    pub fn n_source(&self) -> usize {
        self.x_s.shape()[0]
    }

    pub fn n_target(&self) -> usize {
        self.x_t.shape()[0]
    }

    /// Copy without target labels.
    pub fn without_target_labels(&self) -> Self {
        Self { y_t_eval: None, ..self.clone() }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n` labels, `i mod classes`, in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    y.shuffle(rng);
    y
}

fn moons(n: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let y = balanced_labels(n, 2, rng);
    let mut data = Vec::with_capacity(2 * n);
    for &label in &y {
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        // Pure-Rust trig: the platform libm may fuse sin and cos differently
        // depending on inlining, which would make the data build-dependent.
        let (st, ct) = libm::sincos(t);
        let (px, py) = if label == 0 { (ct, st) } else { (1.0 - ct, 0.5 - st) };
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        data.push(px + noise_std * ex);
        data.push(py + noise_std * ey);
    }
    (Tensor::new(vec![n, 2], data).expect("n > 0"), y)
}

/// Two interleaved half circles per domain; the target is the same generator
/// on its own stream, moved by `shift`.
pub fn gen_two_moons_pair(n_per_domain: usize, shift: &ShiftSpec, seed: u64) -> Result<DomainPair> {
    if n_per_domain < 4 {
        return Err(Error::Config(format!("two-moons needs at least 4 samples per domain, got {n_per_domain}")));
    }
    shift.validate(2)?;
    let (x_s, y_s) = moons(n_per_domain, shift.noise_std, &mut stream(seed, SOURCE_STREAM));
    let (x_t, y_t) = moons(n_per_domain, shift.noise_std, &mut stream(seed, TARGET_STREAM));
    let x_t = shift.apply(&x_t)?;
    DomainPair::new(x_s, y_s, x_t, Some(y_t), 2)
}

/// Lower-triangular `L` with `L·Lᵀ = cov`.
fn cholesky(cov: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = matrix_dims(cov, "covariance")?;
    if n != m {
        return Err(Error::Config(format!("covariance must be square, got {n}x{m}")));
    }
    let a = cov.data();
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 * (1.0 + a[i * n + j].abs()) {
                return Err(Error::Config("covariance must be symmetric".into()));
            }
        }
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 1e-12) {
                    return Err(Error::Config("degenerate covariance (not positive definite)".into()));
                }
                l[i * n + j] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn mixture(n: usize, means: &[Vec<f64>], chol: &[Vec<f64>], rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let dim = means[0].len();
    let y = balanced_labels(n, means.len(), rng);
    let mut data = Vec::with_capacity(n * dim);
    let mut z = vec![0.0; dim];
    for &c in &y {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let l = &chol[c];
        for i in 0..dim {
            let lz: f64 = (0..=i).map(|k| l[i * dim + k] * z[k]).sum();
            data.push(means[c][i] + lz);
        }
    }
    (Tensor::new(vec![n, dim], data).expect("n > 0"), y)
}

/// One Gaussian component per class. `shift.noise_std` is not used here; the
/// covariances already set the spread.
pub fn gen_gaussian_shift_pair(
    n_per_domain: usize,
    num_classes: usize,
    means: &[Vec<f64>],
    covariances: &[Tensor],
    shift: &ShiftSpec,
    seed: u64,
) -> Result<DomainPair> {
    if num_classes < 2 || means.len() != num_classes || covariances.len() != num_classes {
        return Err(Error::Config(format!(
            "need one mean and one covariance per class for {num_classes} classes (got {} and {})",
            means.len(),
            covariances.len()
        )));
    }
    if n_per_domain < 2 * num_classes {
        return Err(Error::Config(format!("need at least {} samples per domain", 2 * num_classes)));
    }
    let dim = means[0].len();
    if dim == 0 || means.iter().any(|m| m.len() != dim) {
        return Err(Error::Config("class means must share one non-zero dimension".into()));
    }
    for i in 0..num_classes {
        for j in 0..i {
            if means[i] == means[j] {
                return Err(Error::Config(format!("class means {j} and {i} coincide")));
            }
        }
    }
    let chol = covariances
        .iter()
        .map(|c| {
            if c.shape() != [dim, dim] {
                return Err(Error::Config(format!("covariance shape {:?} for {dim}-d means", c.shape())));
            }
            cholesky(c)
        })
        .collect::<Result<Vec<_>>>()?;
    shift.validate(dim)?;
    let (x_s, y_s) = mixture(n_per_domain, means, &chol, &mut stream(seed, SOURCE_STREAM));
    let (x_t, y_t) = mixture(n_per_domain, means, &chol, &mut stream(seed, TARGET_STREAM));
    let x_t = shift.apply(&x_t)?;
    DomainPair::new(x_s, y_s, x_t, Some(y_t), num_classes)
}

fn write_csv(path: &Path, x: &Tensor, y: Option<&[usize]>) -> Result<()> {
    let (n, dim) = matrix_dims(x, "csv")?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    if y.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    let mut rec: Vec<String> = Vec::with_capacity(dim + 1);
    for i in 0..n {
        rec.clear();
        // `{}` prints the shortest string that parses back to the same f64.
        rec.extend(x.row(i).iter().map(|v| format!("{v}")));
        if let Some(y) = y {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    let mut inner = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    inner.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn save_pair_csv(pair: &DomainPair, source_path: &Path, target_path: &Path) -> Result<()> {
    write_csv(source_path, &pair.x_s, Some(&pair.y_s))?;
    write_csv(target_path, &pair.x_t, pair.y_t_eval.as_deref())
}

struct Table {
    x: Tensor,
    y: Option<Vec<usize>>,
}

fn read_csv(path: &Path, require_labels: bool) -> Result<Table> {
    let parse_err = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_io)?;
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_label = names.last() == Some(&"label");
    let dim = names.len() - usize::from(has_label);
    for (j, name) in names[..dim].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Schema(format!("{}: column {j} is {name:?}, expected \"f{j}\"", path.display())));
        }
    }
    if dim == 0 {
        return Err(Error::Schema(format!("{}: no feature columns", path.display())));
    }
    if require_labels && !has_label {
        return Err(Error::Schema(format!("{}: missing label column", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        for field in rec.iter().take(dim) {
            let v: f64 = field.trim().parse().map_err(|_| parse_err(line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        if has_label {
            let field = rec.get(dim).unwrap_or_default().trim();
            let y: usize = field.parse().map_err(|_| parse_err(line, format!("bad label {field:?}")))?;
            labels.push(y);
        }
    }
    let n = data.len() / dim;
    if n == 0 {
        return Err(Error::Schema(format!("{}: no rows", path.display())));
    }
    Ok(Table { x: Tensor::new(vec![n, dim], data)?, y: has_label.then_some(labels) })
}

/// Reads one CSV file; the label column is returned when present.
pub fn load_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let t = read_csv(path, false)?;
    Ok((t.x, t.y))
}

/// Reads a source CSV (labels required) and a target CSV (labels optional).
/// The class count is one more than the largest label seen, and at least 2.
pub fn load_pair_csv(source_path: &Path, target_path: &Path) -> Result<DomainPair> {
    let s = read_csv(source_path, true)?;
    let t = read_csv(target_path, false)?;
    let (ds, dt) = (s.x.shape()[1], t.x.shape()[1]);
    if ds != dt {
        return Err(Error::Schema(format!(
            "feature count mismatch: {} has {ds}, {} has {dt}",
            source_path.display(),
            target_path.display()
        )));
    }
    let y_s = s.y.unwrap_or_default();
    let max_label = y_s.iter().chain(t.y.iter().flatten()).copied().max().unwrap_or(0);
    DomainPair::new(s.x, y_s, t.x, t.y, (max_label + 1).max(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(y: &[usize], c: usize) -> Vec<usize> {
        let mut out = vec![0; c];
        y.iter().for_each(|&v| out[v] += 1);
        out
    }

    #[test]
    fn moons_are_balanced_and_deterministic() {
        for n in [7, 500, 501] {
            let p = gen_two_moons_pair(n, &ShiftSpec::default(), 3).unwrap();
            for y in [p.source_labels(), p.target_eval_labels().unwrap()] {
                for c in counts(y, 2) {
                    assert!((c as f64 - n as f64 / 2.0).abs() <= 1.0);
                }
            }
            assert_eq!(p, gen_two_moons_pair(n, &ShiftSpec::default(), 3).unwrap());
        }
        let a = gen_two_moons_pair(50, &ShiftSpec::default(), 1).unwrap();
        let b = gen_two_moons_pair(50, &ShiftSpec::default(), 2).unwrap();
        assert_ne!(a.source_inputs(), b.source_inputs());
    }

    #[test]
    fn domains_use_independent_streams() {
        let p = gen_two_moons_pair(40, &ShiftSpec::identity(), 9).unwrap();
        assert_ne!(p.source_inputs(), p.target_inputs());
    }

    #[test]
    fn identity_shift_leaves_points_unchanged() {
        let p = gen_two_moons_pair(40, &ShiftSpec::identity(), 9).unwrap();
        let x = p.source_inputs();
        assert_eq!(&ShiftSpec::identity().apply(x).unwrap(), x);
        let affine = ShiftSpec { kind: ShiftKind::Both, ..ShiftSpec::identity() };
        assert_eq!(&affine.apply(x).unwrap(), x);
    }

    #[test]
    fn half_turn_reflects_through_centroid() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]);
        let (cx, cy) = (1.0, 1.0);
        let y = ShiftSpec::rotation(180.0).apply(&x).unwrap();
        for i in 0..3 {
            assert!((y.row(i)[0] - (2.0 * cx - x.row(i)[0])).abs() < 1e-12);
            assert!((y.row(i)[1] - (2.0 * cy - x.row(i)[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_is_an_isometry() {
        let p = gen_two_moons_pair(60, &ShiftSpec::identity(), 4).unwrap();
        let x = p.source_inputs();
        let y = ShiftSpec::rotation(45.0).apply(x).unwrap();
        let dist = |t: &Tensor, i: usize, j: usize| {
            let (a, b) = (t.row(i), t.row(j));
            ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
        };
        for i in 0..60 {
            for j in 0..i {
                assert!((dist(x, i, j) - dist(&y, i, j)).abs() < 1e-12);
            }
        }
        assert_ne!(x, &y);
    }

    #[test]
    fn affine_shift_scales_then_translates() {
        let s = ShiftSpec { kind: ShiftKind::Affine, scale: vec![2.0, 1.0], translate: vec![0.0, -1.0], ..Default::default() };
        let y = s.apply(&Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0]);
    }

    #[test]
    fn shift_validation() {
        assert!(ShiftSpec::rotation(360.0).validate(2).is_err());
        assert!(ShiftSpec { noise_std: -0.1, ..Default::default() }.validate(2).is_err());
        assert!(ShiftSpec::rotation(30.0).validate(3).is_err());
        assert!(ShiftSpec { scale: vec![1.0], ..Default::default() }.validate(2).is_err());
    }

    fn gaussian_setup() -> (Vec<Vec<f64>>, Vec<Tensor>) {
        let means = vec![vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]];
        let cov = Tensor::from_rows(&[vec![0.5, 0.1, 0.0], vec![0.1, 0.3, 0.0], vec![0.0, 0.0, 0.2]]);
        (means, vec![cov.clone(), cov.clone(), cov])
    }

    #[test]
    fn gaussian_pair_balance_and_moments() {
        let (means, covs) = gaussian_setup();
        let p = gen_gaussian_shift_pair(3001, 3, &means, &covs, &ShiftSpec::identity(), 5).unwrap();
        for c in counts(p.source_labels(), 3) {
            assert!((c as f64 - 3001.0 / 3.0).abs() <= 1.0);
        }
        // Sample covariance of class 0 along the first two axes.
        let rows: Vec<&[f64]> = (0..p.n_source()).filter(|&i| p.source_labels()[i] == 0).map(|i| p.source_inputs().row(i)).collect();
        let n = rows.len() as f64;
        let m: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let c01 = rows.iter().map(|r| (r[0] - m[0]) * (r[1] - m[1])).sum::<f64>() / (n - 1.0);
        assert!((m[0] + 1.0).abs() < 0.1 && (c01 - 0.1).abs() < 0.05, "{m:?} {c01}");
    }

    #[test]
    fn gaussian_rejects_degenerate_and_duplicate_inputs() {
        let (means, mut covs) = gaussian_setup();
        covs[1] = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(gen_gaussian_shift_pair(30, 3, &means, &covs, &ShiftSpec::identity(), 1).is_err());
        let (mut means, covs) = gaussian_setup();
        means[2] = means[0].clone();
        assert!(gen_gaussian_shift_pair(30, 3, &means, &covs, &ShiftSpec::identity(), 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
        let p = gen_two_moons_pair(31, &ShiftSpec::default(), 11).unwrap();
        save_pair_csv(&p, &s, &t).unwrap();
        assert_eq!(load_pair_csv(&s, &t).unwrap(), p);
        let header = std::fs::read_to_string(&s).unwrap();
        assert!(header.starts_with("f0,f1,label\n"));
    }

    #[test]
    fn unlabeled_target_loads_without_eval_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
        let p = gen_two_moons_pair(10, &ShiftSpec::default(), 1).unwrap().without_target_labels();
        save_pair_csv(&p, &s, &t).unwrap();
        let q = load_pair_csv(&s, &t).unwrap();
        assert!(q.target_eval_labels().is_none());
        assert_eq!(q.target_inputs(), p.target_inputs());
    }

    #[test]
    fn malformed_files_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
        std::fs::write(&t, "f0,f1\n0,1\n").unwrap();

        std::fs::write(&s, "f0,f1,label\n0.5,1,0\n0.5,abc,1\n").unwrap();
        match load_pair_csv(&s, &t) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&s, "f0,f1,label\n0.5,1,0\n0.5,1\n").unwrap();
        assert!(matches!(load_pair_csv(&s, &t), Err(Error::Parse { line: 3, .. })));

        std::fs::write(&s, "f0,f1,f2,label\n0.5,1,2,0\n").unwrap();
        assert!(matches!(load_pair_csv(&s, &t), Err(Error::Schema(_))));

        std::fs::write(&s, "f0,f1\n0.5,1\n").unwrap();
        assert!(matches!(load_pair_csv(&s, &t), Err(Error::Schema(_))));
    }
}
