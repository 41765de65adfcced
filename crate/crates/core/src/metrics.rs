//! Validity, closeness, realism and diversity metrics for counterfactuals.
//!
//! Rates are computed over non-failed records. Reductions run in a fixed
//! order with 64-bit accumulators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tensorgrad::Tensor;

use crate::guidance::CounterfactualRecord;
use crate::models::{ClassifierModel, Variant};
use crate::{Result, VceError};

/// Eigenvalues down to `-PSD_TOLERANCE` are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-6;
/// Added to per-position channel norms in the perceptual distance.
pub const LPIPS_EPS: f64 = 1e-10;

fn metric_err(msg: impl Into<String>) -> VceError {
    VceError::Metric(msg.into())
}

fn fraction(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

/// Target, original and remaining rates of one prediction list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validity {
    pub target: f64,
    pub original: f64,
    pub other: f64,
}

/// Splits predictions into target / original / other with `TA + OA + other = 1`.
pub fn validity(predictions: &[usize], source: usize, target: usize) -> Result<Validity> {
    if predictions.is_empty() {
        return Err(metric_err("validity of an empty prediction list"));
    }
    if source == target {
        return Err(metric_err("source and target coincide"));
    }
    let n = predictions.len();
    let ta = fraction(predictions.iter().filter(|&&p| p == target).count(), n);
    let oa = fraction(predictions.iter().filter(|&&p| p == source).count(), n);
    Ok(Validity {
        target: ta,
        original: oa,
        other: 1.0 - (ta + oa),
    })
}

/// Agreement rate between two prediction lists.
pub fn agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(metric_err(format!("cannot compare {} and {} predictions", a.len(), b.len())));
    }
    Ok(fraction(a.iter().zip(b).filter(|(x, y)| x == y).count(), a.len()))
}

/// Rate of `predictions` equal to `target`.
pub fn hit_rate(predictions: &[usize], target: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(metric_err("rate of an empty prediction list"));
    }
    Ok(fraction(predictions.iter().filter(|&&p| p == target).count(), predictions.len()))
}

/// Non-failed records, checked for a single source→target pair.
fn usable(records: &[CounterfactualRecord]) -> Result<(Vec<&CounterfactualRecord>, usize, usize)> {
    let live: Vec<&CounterfactualRecord> = records.iter().filter(|r| !r.is_failed()).collect();
    let first = live.first().ok_or_else(|| metric_err("no non-failed records"))?;
    let (source, target) = (first.source(), first.target());
    if live.iter().any(|r| r.source() != source || r.target() != target) {
        return Err(metric_err("records mix several source/target pairs"));
    }
    Ok((live, source, target))
}

fn subject_predictions(live: &[&CounterfactualRecord]) -> Vec<usize> {
    live.iter().map(|r| r.predicted().expect("non-failed records carry a prediction")).collect()
}

pub fn target_accuracy(records: &[CounterfactualRecord]) -> Result<f64> {
    let (live, source, target) = usable(records)?;
    Ok(validity(&subject_predictions(&live), source, target)?.target)
}

pub fn original_accuracy(records: &[CounterfactualRecord]) -> Result<f64> {
    let (live, source, target) = usable(records)?;
    Ok(validity(&subject_predictions(&live), source, target)?.original)
}

/// Oracle labels for the generated images of non-failed records.
pub fn oracle_predictions(records: &[CounterfactualRecord], oracle: &ClassifierModel) -> Result<Vec<usize>> {
    let live: Vec<Tensor> = records
        .iter()
        .filter(|r| !r.is_failed())
        .map(|r| r.generated().slice_outer(0))
        .collect::<tensorgrad::Result<_>>()?;
    if live.is_empty() {
        return Err(metric_err("no non-failed records"));
    }
    oracle.predict(&Tensor::stack(&live)?)
}

fn check_oracle(records: &[CounterfactualRecord], oracle: &ClassifierModel) -> Result<()> {
    if records.iter().any(|r| r.subject() == oracle.id()) {
        return Err(metric_err(format!("oracle {} is the subject of these records", oracle.id())));
    }
    Ok(())
}

/// Fraction of records the oracle classifies the same as the subject.
pub fn oracle_score(records: &[CounterfactualRecord], oracle: &ClassifierModel) -> Result<f64> {
    check_oracle(records, oracle)?;
    let (live, _, _) = usable(records)?;
    agreement(&subject_predictions(&live), &oracle_predictions(records, oracle)?)
}

/// Fraction of records the oracle places in the target class.
pub fn oracle_target_accuracy(records: &[CounterfactualRecord], oracle: &ClassifierModel) -> Result<f64> {
    check_oracle(records, oracle)?;
    let (_, _, target) = usable(records)?;
    hit_rate(&oracle_predictions(records, oracle)?, target)
}

/// Mean OTA over the non-random oracles.
pub fn committee_ota(records: &[CounterfactualRecord], oracles: &[&ClassifierModel]) -> Result<f64> {
    let members: Vec<&&ClassifierModel> = oracles.iter().filter(|o| o.variant() != Variant::RandomNet).collect();
    if members.is_empty() {
        return Err(metric_err("empty oracle committee"));
    }
    let scores = members
        .iter()
        .map(|o| oracle_target_accuracy(records, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `(Σ|x_i − x̂_i|^p)^{1/p}` over all elements.
pub fn minkowski(x: &Tensor, x_hat: &Tensor, p: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(tensorgrad::TensorError::Shape {
            op: "minkowski",
            shapes: vec![x.shape().to_vec(), x_hat.shape().to_vec()],
        }
        .into());
    }
    if !(p.is_finite() && p >= 1.0) {
        return Err(metric_err(format!("minkowski order must be >= 1, got {p}")));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs().powf(p))
        .sum();
    Ok(s.powf(1.0 / p))
}

/// Channel-normalized activations `(B, C, H·W)` of one layer, as `f64`.
fn normalized(act: &Tensor) -> Vec<f64> {
    let s = act.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = act.data();
    let mut out = vec![0.0; d.len()];
    for n in 0..b {
        for p in 0..hw {
            let norm = (0..c)
                .map(|k| (d[(n * c + k) * hw + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                + LPIPS_EPS;
            for k in 0..c {
                let i = (n * c + k) * hw + p;
                out[i] = d[i] as f64 / norm;
            }
        }
    }
    out
}

/// Perceptual distance between paired batches `(B, 1, H, W)`, one value per pair.
pub fn lpips_batch(x: &Tensor, x_hat: &Tensor, featurenet: &ClassifierModel, weights: &[f64; 3]) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(tensorgrad::TensorError::Shape {
            op: "lpips",
            shapes: vec![x.shape().to_vec(), x_hat.shape().to_vec()],
        }
        .into());
    }
    let a = featurenet.activations(x)?;
    let b = featurenet.activations(x_hat)?;
    let batch = x.shape()[0];
    let mut dist = vec![0.0; batch];
    for ((la, lb), &w) in a.iter().zip(&b).zip(weights) {
        if !la.is_finite() || !lb.is_finite() {
            return Err(metric_err("non-finite activations"));
        }
        let (na, nb) = (normalized(la), normalized(lb));
        let s = la.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        for (n, d) in dist.iter_mut().enumerate() {
            let block = n * c * hw..(n + 1) * c * hw;
            let sq: f64 = na[block.clone()].iter().zip(&nb[block]).map(|(p, q)| (p - q) * (p - q)).sum();
            *d += w * sq / hw as f64;
        }
    }
    Ok(dist)
}

/// Perceptual distance with unit layer weights.
pub fn lpips(x: &Tensor, x_hat: &Tensor, featurenet: &ClassifierModel) -> Result<f64> {
    let as_batch = |t: &Tensor| -> Result<Tensor> {
        match t.rank() {
            4 => Ok(t.clone()),
            3 => Ok(t.clone().reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])?),
            _ => Err(metric_err(format!("lpips expects an image, got {:?}", t.shape()))),
        }
    };
    let d = lpips_batch(&as_batch(x)?, &as_batch(x_hat)?, featurenet, &[1.0; 3])?;
    if d.len() != 1 {
        return Err(metric_err("lpips compares single images; use lpips_batch"));
    }
    Ok(d[0])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix clipped at zero, erroring on
/// negatives beyond tolerance.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(symmetrize(m));
    if let Some(&worst) = e.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
        return Err(metric_err(format!("{what} is not positive semidefinite (eigenvalue {worst:e})")));
    }
    e.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(e)
}

fn sqrtm_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// Fréchet distance between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)`.
pub fn frechet_gaussian(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(metric_err("mean and covariance dimensions disagree"));
    }
    let (c1, c2) = (symmetrize(cov1), symmetrize(cov2));
    psd_eigen(&c2, "second covariance")?;
    let s1 = sqrtm_psd(&c1, "first covariance")?;
    let inner = &s1 * &c2 * &s1;
    let trace_sqrt: f64 = psd_eigen(&inner, "covariance product")?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + c1.trace() + c2.trace() - 2.0 * trace_sqrt;
    Ok(value.max(0.0))
}

/// Mean and unbiased covariance of row vectors, reduced in a canonical
/// (sorted) row order so the result ignores input order.
pub fn fit_gaussian(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(metric_err(format!("need at least 2 equal-length rows, got {n}")));
    }
    let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mu = DVector::zeros(d);
    for r in &sorted {
        for (m, v) in mu.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in &sorted {
        let c: Vec<f64> = r.iter().zip(mu.iter()).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Linear map applied to featurenet embeddings before fitting Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpace {
    mean: DVector<f64>,
    /// `(k, D)` rows spanning the kept directions.
    basis: DMatrix<f64>,
}

impl EmbeddingSpace {
    /// Identity map over `dim` features.
    pub fn full(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            basis: DMatrix::identity(dim, dim),
        }
    }

    /// Leading `k` principal directions of `reference` embeddings.
    pub fn principal(reference: &[Vec<f64>], k: usize) -> Result<Self> {
        let (mean, cov) = fit_gaussian(reference)?;
        let d = mean.len();
        if k == 0 || k > d {
            return Err(metric_err(format!("cannot keep {k} of {d} directions")));
        }
        let e = SymmetricEigen::new(symmetrize(&cov));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        let mut basis = DMatrix::zeros(k, d);
        for (row, &col) in order.iter().take(k).enumerate() {
            // fix the sign so the basis is reproducible
            let v = e.eigenvectors.column(col);
            let sign = if v.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m }) < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                basis[(row, j)] = sign * v[j];
            }
        }
        Ok(Self { mean, basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                if r.len() != self.input_dim() {
                    return Err(metric_err(format!("embedding of width {} for a {}-wide space", r.len(), self.input_dim())));
                }
                let centered = DVector::from_iterator(r.len(), r.iter().zip(self.mean.iter()).map(|(v, m)| v - m));
                Ok((&self.basis * centered).iter().copied().collect())
            })
            .collect()
    }
}

/// Featurenet embeddings of a `(N, 1, H, W)` batch, one row per image.
pub fn embeddings(images: &Tensor, featurenet: &ClassifierModel) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let part = Tensor::stack(&(start..end).map(|i| images.slice_outer(i)).collect::<tensorgrad::Result<Vec<_>>>()?)?;
        let e = featurenet.embed(&part)?;
        let d = e.shape()[1];
        rows.extend(e.data().chunks(d).map(|c| c.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        start = end;
    }
    Ok(rows)
}

/// Fréchet distance between the Gaussian fits of two embedded image sets.
pub fn fid(set_a: &Tensor, set_b: &Tensor, featurenet: &ClassifierModel, space: &EmbeddingSpace) -> Result<f64> {
    let need = space.dim() + 1;
    for (name, set) in [("first", set_a), ("second", set_b)] {
        let n = set.shape().first().copied().unwrap_or(0);
        if n < need {
            return Err(metric_err(format!("{name} set has {n} images; FID over {} features needs at least {need}", space.dim())));
        }
    }
    let a = space.project(&embeddings(set_a, featurenet)?)?;
    let b = space.project(&embeddings(set_b, featurenet)?)?;
    let (m1, c1) = fit_gaussian(&a)?;
    let (m2, c2) = fit_gaussian(&b)?;
    frechet_gaussian(&m1, &c1, &m2, &c2)
}

/// Mean over sets of the mean pairwise perceptual distance within a set.
pub fn diversity(sets: &[Tensor], featurenet: &ClassifierModel) -> Result<f64> {
    if sets.is_empty() {
        return Err(metric_err("diversity of no sets"));
    }
    let mut total = 0.0;
    for set in sets {
        let k = set.shape().first().copied().unwrap_or(0);
        if k < 2 {
            return Err(metric_err(format!("diversity needs at least 2 images per set, got {k}")));
        }
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for i in 0..k {
            for j in i + 1..k {
                left.push(set.slice_outer(i)?);
                right.push(set.slice_outer(j)?);
            }
        }
        let d = lpips_batch(&Tensor::stack(&left)?, &Tensor::stack(&right)?, featurenet, &[1.0; 3])?;
        total += d.iter().sum::<f64>() / d.len() as f64;
    }
    Ok(total / sets.len() as f64)
}
