use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scene_data::LabelMap;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.sigma.iter()).all(|v| v.is_finite())
    }
}

/// Sample mean and covariance (denominator `n - 1`).
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metric(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Metric(format!("feature of length {} among length {d}", f.len())));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut sigma);
    Ok(GaussianStats { mu, sigma })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Negative eigenvalues of a PSD matrix are rounding noise.
fn clamp(v: f64) -> f64 {
    v.max(0.0)
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| clamp(v).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, floored at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.shape() != (a.dim(), a.dim()) || b.sigma.shape() != (b.dim(), b.dim()) {
        return Err(Error::Metric(format!("Gaussian dimensions {} and {} differ", a.dim(), b.dim())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Metric("non-finite Gaussian statistics".into()));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let root_a = sqrtm(&a.sigma);
    let mut inner = &root_a * &b.sigma * &root_a;
    symmetrize(&mut inner);
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| clamp(v).sqrt()).sum();
    let d = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Miou {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

impl Miou {
    /// Mean IoU over the listed classes that occur.
    pub fn subset(&self, classes: &[u8]) -> f64 {
        mean_present(classes.iter().filter_map(|&c| self.per_class.get(c as usize).copied().flatten()))
    }
}

fn mean_present(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-class intersection over union accumulated over all pairs.
pub fn miou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<Miou> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("{} predictions for {} ground-truth maps", pred.len(), gt.len())));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, g) in pred.iter().zip(gt) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::Metric(format!(
                "prediction {}x{} against ground truth {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
        p.check_range(num_classes)?;
        g.check_range(num_classes)?;
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let (a, b) = (a as usize, b as usize);
            union[a] += 1;
            if a == b {
                inter[a] += 1;
            } else {
                union[b] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> =
        inter.iter().zip(&union).map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64)).collect();
    let miou = mean_present(per_class.iter().flatten().copied());
    Ok(Miou { miou, per_class })
}
