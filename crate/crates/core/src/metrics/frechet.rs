//! Fréchet distance between Gaussian fits of feature sets, and the fixed
//! random feature extractor it is computed over.

use groundiff_nn::{Conv2d, Graph, ParamSet};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ridge added to covariances estimated from too few samples.
pub const SHRINKAGE: f64 = 1e-6;

fn fit(x: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut mu = DVector::zeros(dim);
    for row in x {
        mu += DVector::from_column_slice(row);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in x {
        let d = DVector::from_column_slice(row) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    if n <= dim {
        cov += DMatrix::identity(dim, dim) * SHRINKAGE;
    }
    (mu, cov)
}

/// PSD square root through the eigendecomposition, negative eigenvalues
/// clipped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).ok_or_else(|| Error::Argument("empty feature set".into()))?;
    if b.is_empty() {
        return Err(Error::Argument("empty feature set".into()));
    }
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let (ma, sa) = fit(a, dim);
    let (mb, sb) = fit(b, dim);
    // tr (S_a S_b)^(1/2) = tr (R S_b R)^(1/2) with R = S_a^(1/2); the inner
    // product is symmetric so its eigenvalues are real.
    let r = sqrt_psd(&sa);
    let inner = &r * &sb * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    let worst = eig.iter().cloned().fold(0.0f64, f64::min);
    if worst < -1e-6 {
        log::warn!("clipping negative eigenvalue {worst:e} in covariance product");
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Never-trained strided conv stack mapping `[0, 1]` RGB images to
/// 64-dimensional features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    convs: [Conv2d; 3],
    params: ParamSet<f32>,
}

pub const FEATURE_DIM: usize = 64;

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let convs = [
            Conv2d::new(&mut ps, &mut rng, "fx.c1", 3, 16, 3, 2, 1),
            Conv2d::new(&mut ps, &mut rng, "fx.c2", 16, 32, 3, 2, 1),
            Conv2d::new(&mut ps, &mut rng, "fx.c3", 32, FEATURE_DIM, 3, 2, 1),
        ];
        Self { seed, convs, params: ps }
    }

    /// Features of a batch of `side x side` images.
    pub fn features(&self, images: &[Vec<f32>], side: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut data = Vec::with_capacity(chunk.len() * side * side * 3);
            for img in chunk {
                if img.len() != side * side * 3 {
                    return Err(Error::Shape(format!("image has {} values, expected {}", img.len(), side * side * 3)));
                }
                data.extend(img.iter().map(|v| 2.0 * v - 1.0));
            }
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g, false);
            let mut x = g.constant(data, &[chunk.len(), side, side, 3]);
            for c in &self.convs {
                x = c.forward(&mut g, &p, x);
                x = g.relu(x);
            }
            let f = g.mean_middle(x);
            let vals = g.value(f);
            out.extend(vals.chunks(FEATURE_DIM).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }
}
