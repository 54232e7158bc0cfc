//! Pixel metrics and the Fréchet distance between feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, shape_err, Result};

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return shape_err("mse", format!("{} vs {} values", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// PSNR in dB for pixels in `[0, 1]`; infinite for identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// Sample mean and unbiased covariance of the rows.
pub fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return shape_err("moments", "feature vectors must share a non-zero length");
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians with the given moments:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, where the trace of
/// the cross term is taken from the PSD root of `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return shape_err("frechet", "moment dimensions disagree");
    }
    let ra = psd_sqrt(cov_a);
    let cross = psd_sqrt(&(&ra * cov_b * &ra)).trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_proxy(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (mr, cr) = moments(real)?;
    let (mf, cf) = moments(fake)?;
    frechet_from_moments(&mr, &cr, &mf, &cf)
}
