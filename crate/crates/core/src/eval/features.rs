use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Feature vectors from an external extractor, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub vectors: DMatrix<f64>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(vectors: DMatrix<f64>, tag: impl Into<String>) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            vectors,
            tag: tag.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], tag: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Shape(format!("row {i} has {} values, expected {d}", rows[i].len())));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), tag)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Parses CSV with a `N,D,tag` header line followed by N rows of D values.
    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let err = |line: u64, msg: String| Error::Config(format!("{origin}:{line}: {msg}"));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = records
            .next()
            .ok_or_else(|| err(1, "missing header".into()))?
            .map_err(|e| err(1, e.to_string()))?;
        if header.len() < 3 {
            return Err(err(1, "header is not `N,D,tag`".into()));
        }
        let n: usize = header[0].parse().map_err(|e| err(1, format!("bad N: {e}")))?;
        let d: usize = header[1].parse().map_err(|e| err(1, format!("bad D: {e}")))?;
        let tag = header.iter().skip(2).collect::<Vec<_>>().join(",");
        let mut values = Vec::with_capacity(n * d);
        let mut rows = 0;
        for rec in records {
            let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != d {
                return Err(err(line, format!("{} values, header says {d}", rec.len())));
            }
            for v in rec.iter() {
                let x: f64 = v.parse().map_err(|e| err(line, format!("`{v}`: {e}")))?;
                if !x.is_finite() {
                    return Err(err(line, format!("non-finite value {x}")));
                }
                values.push(x);
            }
            rows += 1;
        }
        if rows != n {
            return Err(err(1, format!("header says {n} rows, found {rows}")));
        }
        Self::new(DMatrix::from_row_slice(n, d, &values), tag)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let head = [self.len().to_string(), self.dim().to_string(), self.tag.clone()];
        w.write_record(&head).expect("in-memory write");
        for r in self.vectors.row_iter() {
            w.write_record(r.iter().map(|v| format!("{v:?}"))).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV output is UTF-8")
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Sample mean and covariance (N - 1 normalization).
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Parameter(format!("feature set `{}` has {n} rows, need at least 2", self.tag)));
        }
        let mean = self.vectors.row_mean().transpose();
        let mut centered = self.vectors.clone();
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok((mean, cov))
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::Parameter(format!("feature set `{}` has {} rows, need at least 2", s.tag, s.len())));
        }
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given by their moments.
///
/// `Tr((Σa Σb)^½)` is evaluated as the trace of the square root of the
/// symmetric `Σa^½ Σb Σa^½`, which has the same eigenvalues.
pub fn fid_from_moments(
    mu_a: &DVector<f64>,
    sigma_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    sigma_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || sigma_a.shape() != (d, d) || sigma_b.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let ra = sym_sqrt(sigma_a);
    let inner = &ra * sigma_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fid = (mu_a - mu_b).norm_squared() + sigma_a.trace() + sigma_b.trace() - 2.0 * tr_root;
    if !fid.is_finite() {
        return Err(Error::Numeric("FID is not finite".into()));
    }
    Ok(fid.max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, sa) = a.moments()?;
    let (mb, sb) = b.moments()?;
    fid_from_moments(&ma, &sa, &mb, &sb)
}

/// Unbiased squared MMD with the cubic polynomial kernel `(x.y / D + 1)^3`.
pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let d = a.dim() as f64;
    let kernel = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x * y.transpose()).map(|v| (v / d + 1.0).powi(3));
    let (m, n) = (a.len() as f64, b.len() as f64);
    let kxx = kernel(&a.vectors, &a.vectors);
    let kyy = kernel(&b.vectors, &b.vectors);
    let kxy = kernel(&a.vectors, &b.vectors);
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(off(&kxx) / (m * (m - 1.0)) + off(&kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), "t").unwrap()
    }

    #[test]
    fn fid_closed_forms() {
        let i2 = DMatrix::identity(2, 2);
        let f = fid_from_moments(&DVector::from_vec(vec![0.0, 0.0]), &i2, &DVector::from_vec(vec![3.0, 4.0]), &i2).unwrap();
        assert!((f - 25.0).abs() < 1e-9);
        let one = |s: f64| DMatrix::from_element(1, 1, s);
        let z = DVector::from_vec(vec![0.0]);
        let f = fid_from_moments(&z, &one(1.0), &z, &one(4.0)).unwrap();
        assert!((f - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_self_is_zero() {
        let a = set(&[&[1.0, 2.0, 0.5], &[0.3, -1.0, 2.0], &[4.0, 0.0, 1.0], &[-2.0, 1.5, 0.0]]);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn kid_hand_case() {
        let a = set(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.5]]);
        let b = set(&[&[0.5, 0.5], &[2.0, 0.0], &[0.0, -1.0], &[1.0, -1.0]]);
        let k = |x: &[f64], y: &[f64]| ((x[0] * y[0] + x[1] * y[1]) / 2.0 + 1.0).powi(3);
        let ra: Vec<Vec<f64>> = a.vectors.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rb: Vec<Vec<f64>> = b.vectors.row_iter().map(|r| r.iter().copied().collect()).collect();
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    xx += k(&ra[i], &ra[j]);
                    yy += k(&rb[i], &rb[j]);
                }
                xy += k(&ra[i], &rb[j]);
            }
        }
        let want = xx / 12.0 + yy / 12.0 - 2.0 * xy / 16.0;
        assert!((kid(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((kid(&a, &b).unwrap() - kid(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn too_few_rows() {
        let a = set(&[&[1.0]]);
        assert!(matches!(fid(&a, &a), Err(Error::Parameter(_))));
        assert!(matches!(kid(&a, &a), Err(Error::Parameter(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let a = set(&[&[1.0, 0.1], &[0.0, -1.0 / 3.0]]);
        let back = FeatureSet::parse_csv(&a.to_csv(), "mem").unwrap();
        assert_eq!(a, back);
        let e = FeatureSet::parse_csv("2,2,x\n1,2\n1\n", "f.csv").unwrap_err().to_string();
        assert!(e.contains("f.csv:3"), "{e}");
        assert!(FeatureSet::parse_csv("3,1,x\n1\n2\n", "f").is_err());
    }
}
