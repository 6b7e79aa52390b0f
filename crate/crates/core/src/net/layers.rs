use std::f64::consts::PI;

use super::params::ParamVars;
use crate::autodiff::{concat_cols, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// `x W + b` with parameters `{name}.w` and `{name}.b`.
pub fn linear(x: &Var, p: &ParamVars, name: &str) -> Result<Var> {
    x.matmul(p.get(&format!("{name}.w"))?)?.add(p.get(&format!("{name}.b"))?)
}

/// Row-wise layer normalization with gain `{name}.g` and bias `{name}.b`.
pub fn layer_norm(x: &Var, p: &ParamVars, name: &str) -> Result<Var> {
    let mu = x.mean_axis(1)?;
    let centred = x.sub(&mu)?;
    let var = centred.square().mean_axis(1)?;
    let normed = centred.div(&var.add_scalar(LN_EPS).sqrt()?)?;
    normed.mul(p.get(&format!("{name}.g"))?)?.add(p.get(&format!("{name}.b"))?)
}

/// Sinusoidal encoding of 3D points. Coordinates are normalized to
/// `[0, 1]` by `bounds` and clamped; each axis gets `⌈C/6⌉` frequencies
/// `2^k π` (sines then cosines), truncated to `⌈C/3⌉` columns, and the three
/// axis blocks are truncated to `C`.
pub fn positional_encoding(mu: &Var, bounds: ([f64; 3], [f64; 3]), c: usize) -> Result<Var> {
    let tape = mu.tape();
    let (lo, hi) = bounds;
    let inv = Tensor::new([1, 3], (0..3).map(|a| 1.0 / (hi[a] - lo[a])).collect())?;
    let shift = Tensor::new([1, 3], (0..3).map(|a| -lo[a] / (hi[a] - lo[a])).collect())?;
    let u = mu.mul(&tape.constant(inv))?.add(&tape.constant(shift))?.clamp(0.0, 1.0);
    let nf = c.div_ceil(6);
    let per_axis = c.div_ceil(3);
    let freqs = tape.constant(Tensor::new([1, nf], (0..nf).map(|k| 2f64.powi(k as i32) * PI).collect())?);
    let mut blocks = Vec::with_capacity(3);
    for a in 0..3 {
        let arg = u.narrow_cols(a, a + 1)?.mul(&freqs)?;
        let enc = concat_cols(&[&arg.sin(), &arg.cos()])?;
        blocks.push(enc.narrow_cols(0, per_axis)?);
    }
    concat_cols(&blocks.iter().collect::<Vec<_>>())?.narrow_cols(0, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn pe_rows(points: &[[f64; 3]], c: usize) -> Tensor {
        let tape = Tape::new();
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let mu = tape.constant(Tensor::from_rows(&rows).unwrap());
        positional_encoding(&mu, ([0.0; 3], [1.0; 3]), c).unwrap().value().clone()
    }

    #[test]
    fn encoding_is_bounded_and_deterministic() {
        let pts = [[0.1, 0.5, 0.9], [-3.0, 2.0, 0.5], [0.1, 0.5, 0.9]];
        for c in [16, 31, 32, 64] {
            let e = pe_rows(&pts, c);
            assert_eq!(e.shape(), &[3, c]);
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(e.row(0), e.row(2));
        }
    }

    #[test]
    fn encoding_is_injective_on_a_grid() {
        let n = 16;
        let pts: Vec<[f64; 3]> = (0..n * n * n)
            .map(|i| [(i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64].map(|v| v / (n - 1) as f64))
            .collect();
        let e = pe_rows(&pts, 32);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let same = e.row(i).iter().zip(e.row(j)).all(|(a, b)| (a - b).abs() <= 1e-9);
                assert!(!same, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let tape = Tape::new();
        let mut store = super::super::params::ParamStore::default();
        store.insert("ln.g", Tensor::ones([1, 5]));
        store.insert("ln.b", Tensor::zeros([1, 5]));
        let p = store.constants(&tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 10.0]]).unwrap());
        let y = layer_norm(&x, &p, "ln").unwrap();
        let m: f64 = y.value().data().iter().sum::<f64>() / 5.0;
        let v: f64 = y.value().data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
    }
}
