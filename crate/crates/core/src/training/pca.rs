use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Top principal directions of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// `C_R x C`, orthonormal rows in descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Eigenvalues of the retained directions.
    pub variances: Vec<f64>,
}

/// Fit `c_r` principal directions to the rows of `samples` (`M x C`).
///
/// Each component's sign is chosen so its largest-magnitude entry is
/// positive, which makes the basis deterministic.
pub fn pca_fit(samples: &Tensor, c_r: usize) -> Result<PcaBasis> {
    let (m, c) = samples.dims2()?;
    if m < c_r {
        return Err(Error::Rank { needed: c_r, got: m });
    }
    if c_r == 0 || c_r > c {
        return Err(Error::Dimension(format!("cannot keep {c_r} of {c} dimensions")));
    }
    let mut mean = vec![0.0; c];
    for r in 0..m {
        for (a, v) in mean.iter_mut().zip(samples.row(r)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for r in 0..m {
        let row = samples.row(r);
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in i..c {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / m as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(c_r);
    let mut variances = Vec::with_capacity(c_r);
    for &k in order.iter().take(c_r) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaBasis {
        components,
        mean,
        variances,
    })
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `V_k` as a `C_R x C` tensor.
    pub fn components_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.components).unwrap()
    }

    fn mean_row(&self) -> Tensor {
        Tensor::new([1, self.input_dim()], self.mean.clone()).unwrap()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.input_dim() {
            return Err(Error::Dimension(format!(
                "PCA basis was fitted on dim {}, got {c}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `(f - mean) V_kᵀ` for every row of `f` (`... x C`).
    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        let c = f.last_dim();
        self.check(c)?;
        let rows = f.len() / c.max(1);
        let flat = f.reshape([rows, c])?;
        let centred = flat.zip_map(&Tensor::new([rows, c], self.mean.repeat(rows))?, |a, b| a - b)?;
        let out = centred.matmul(&self.components_tensor().transpose()?)?;
        let mut shape = f.shape().to_vec();
        *shape.last_mut().unwrap() = self.output_dim();
        out.reshape(shape)
    }

    /// Inverse map back to the original space: `f' V_k + mean`.
    pub fn unproject(&self, fr: &Tensor) -> Result<Tensor> {
        let (rows, k) = fr.dims2()?;
        if k != self.output_dim() {
            return Err(Error::Dimension(format!("expected {} PCA coefficients, got {k}", self.output_dim())));
        }
        let out = fr.matmul(&self.components_tensor())?;
        out.zip_map(&Tensor::new([rows, self.input_dim()], self.mean.repeat(rows))?, |a, b| a + b)
    }

    /// Differentiable projection of `f` (`N x C`).
    pub fn project_var(&self, f: &Var) -> Result<Var> {
        self.check(f.value().last_dim())?;
        let tape = f.tape();
        let centred = f.sub(&tape.constant(self.mean_row()))?;
        centred.matmul(&tape.constant(self.components_tensor().transpose()?))
    }
}
