//! Self-supervision terms over selected pixels.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::maps::IGNORE_CLASS;
use crate::tensor::Tensor;

/// Weight of the L1 term in the depth loss.
pub const DEPTH_L1_WEIGHT: f64 = 0.2;
/// Added under the square root of `‖a‖²‖b‖²`; a zero vector scores cosine 0.
const COS_EPS: f64 = 1e-12;

/// Mean over rows of `1 - cos(target, rendered)`; both `P x C_R`.
pub fn feat_loss(target: &Tensor, rendered: &Var) -> Result<Var> {
    if target.shape() != rendered.shape() {
        return Err(Error::Dimension(format!(
            "feature loss shapes differ: {:?} vs {:?}",
            target.shape(),
            rendered.shape()
        )));
    }
    let tape = rendered.tape();
    if target.shape()[0] == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.constant(target.clone());
    let dot = t.mul(rendered)?.sum_axis(1)?;
    let tn = t.square().sum_axis(1)?;
    let rn = rendered.square().sum_axis(1)?;
    let denom = tn.mul(&rn)?.add_scalar(COS_EPS).sqrt()?;
    let cos = dot.div(&denom)?;
    Ok(cos.mean().neg().add_scalar(1.0))
}

/// Depth terms on valid pixels.
pub struct DepthLoss {
    pub silog: Var,
    pub l1: Var,
    /// `silog + β·l1`.
    pub total: Var,
}

/// `SILog(D, D̂) + β·mean|D - D̂|` over `T` pixels with `D > 0`.
/// `rendered` must be strictly positive on those pixels.
pub fn depth_loss(target: &[f64], rendered: &Var, beta: f64) -> Result<DepthLoss> {
    let tape = rendered.tape();
    if rendered.value().len() != target.len() {
        return Err(Error::Dimension(format!(
            "depth loss got {} targets for {} rendered values",
            target.len(),
            rendered.value().len()
        )));
    }
    let n = target.len();
    let flat = rendered.reshape([n, 1])?;
    let valid: Vec<usize> = (0..n).filter(|&i| target[i] > 0.0 && target[i].is_finite()).collect();
    if valid.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok(DepthLoss {
            silog: z.clone(),
            l1: z.clone(),
            total: z,
        });
    }
    let d_hat = flat.gather_rows(&valid)?;
    let d = Tensor::new([valid.len(), 1], valid.iter().map(|&i| target[i]).collect())?;
    let log_d = tape.constant(d.map(f64::ln));
    let delta = log_d.sub(&d_hat.log()?)?;
    let mean = delta.mean();
    let silog = delta.square().mean().sub(&mean.square())?;
    let l1 = tape.constant(d).sub(&d_hat)?.abs().mean();
    let total = silog.add(&l1.mul_scalar(beta))?;
    Ok(DepthLoss { silog, l1, total })
}

/// Mean cross-entropy of `logits` (`P x N_C`) against `labels`, skipping
/// [`IGNORE_CLASS`]. Zero when every pixel is ignored.
pub fn seg_loss(labels: &[u8], logits: &Var) -> Result<Var> {
    let tape = logits.tape();
    let (p, nc) = logits.value().dims2()?;
    if labels.len() != p {
        return Err(Error::Dimension(format!("{} labels for {p} logit rows", labels.len())));
    }
    let rows: Vec<usize> = (0..p).filter(|&i| labels[i] != IGNORE_CLASS).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut onehot = vec![0.0; rows.len() * nc];
    for (r, &i) in rows.iter().enumerate() {
        let c = labels[i] as usize;
        if c >= nc {
            return Err(Error::Data(format!("label {c} with only {nc} classes")));
        }
        onehot[r * nc + c] = 1.0;
    }
    let lp = logits.gather_rows(&rows)?.log_softmax();
    let picked = lp.mul(&tape.constant(Tensor::new([rows.len(), nc], onehot)?))?;
    Ok(picked.sum().mul_scalar(-1.0 / rows.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::gradient_error;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn cosine_loss_examples() {
        let tape = Tape::new();
        let a = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.0, 0.5]]).unwrap();
        let same = feat_loss(&a, &tape.leaf(a.clone())).unwrap().value().item();
        assert!(same.abs() < 1e-12);
        let scaled = feat_loss(&a, &tape.leaf(a.scale(7.0))).unwrap().value().item();
        assert!(scaled.abs() < 1e-12);
        let orth = feat_loss(
            &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            &leaf(&tape, &[vec![0.0, 1.0]]),
        )
        .unwrap()
        .value()
        .item();
        assert!((orth - 1.0).abs() < 1e-12);
        let zero = feat_loss(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &leaf(&tape, &[vec![0.0, 0.0]]))
            .unwrap()
            .value()
            .item();
        assert_eq!(zero, 1.0);
    }

    #[test]
    fn cosine_loss_is_invariant_to_per_pixel_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let t = Tensor::randn([6, 4], 1.0, &mut rng);
        let r = Tensor::randn([6, 4], 1.0, &mut rng);
        let base = feat_loss(&t, &tape.leaf(r.clone())).unwrap().value().item();
        let mut s = r.clone();
        for (k, row) in s.data_mut().chunks_mut(4).enumerate() {
            row.iter_mut().for_each(|v| *v *= 0.1 + k as f64);
        }
        let scaled = feat_loss(&t, &tape.leaf(s)).unwrap().value().item();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_hand_value() {
        let tape = Tape::new();
        let d = depth_loss(&[2.0, 4.0], &tape.leaf(Tensor::new([2], vec![3.0, 3.0]).unwrap()), 0.2).unwrap();
        // δ = (ln 2/3, ln 4/3): mean δ² - (mean δ)² = ((ln2/3 - ln4/3)/2)² = (ln 2 / 2)²
        let silog = (2f64.ln() / 2.0).powi(2);
        assert!((d.silog.value().item() - silog).abs() < 1e-15);
        assert!((d.silog.value().item() - 0.1201).abs() < 1e-4);
        assert!((d.l1.value().item() - 1.0).abs() < 1e-15);
        assert!((d.total.value().item() - 0.3201).abs() < 1e-4);
    }

    #[test]
    fn silog_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        for _ in 0..100 {
            let target: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..20.0)).collect();
            let pred: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..20.0)).collect();
            let c = rng.random_range(0.1..10.0);
            let base = depth_loss(&target, &tape.leaf(Tensor::new([16], pred.clone()).unwrap()), 0.2).unwrap();
            let scaled_pred: Vec<f64> = pred.iter().map(|v| v * c).collect();
            let scaled_target: Vec<f64> = target.iter().map(|v| v * c).collect();
            let a = depth_loss(&target, &tape.leaf(Tensor::new([16], scaled_pred).unwrap()), 0.2).unwrap();
            let b = depth_loss(&scaled_target, &tape.leaf(Tensor::new([16], pred.clone()).unwrap()), 0.2).unwrap();
            assert!((a.silog.value().item() - base.silog.value().item()).abs() < 1e-12);
            assert!((b.silog.value().item() - base.silog.value().item()).abs() < 1e-12);
            let same = depth_loss(&target, &tape.leaf(Tensor::new([16], target.clone()).unwrap()), 0.2).unwrap();
            assert_eq!(same.total.value().item(), 0.0);
        }
    }

    #[test]
    fn invalid_depth_pixels_are_masked() {
        let tape = Tape::new();
        let d = depth_loss(&[2.0, 0.0, -1.0, 4.0], &tape.leaf(Tensor::new([4], vec![3.0, 9.0, 9.0, 3.0]).unwrap()), 0.2)
            .unwrap();
        assert!((d.total.value().item() - 0.3201).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let nc = 5;
        let uniform = tape.leaf(Tensor::full([3, nc], 0.7));
        let l = seg_loss(&[0, 3, 4], &uniform).unwrap().value().item();
        assert!((l - (nc as f64).ln()).abs() < 1e-9);
        let mut sharp = vec![0.0; 2 * nc];
        sharp[1] = 60.0;
        sharp[nc + 2] = 60.0;
        let l = seg_loss(&[1, 2], &tape.leaf(Tensor::new([2, nc], sharp).unwrap())).unwrap().value().item();
        assert!(l < 1e-20);
        let l = seg_loss(&[255, 255, 255], &uniform).unwrap().value().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = Tensor::randn([5, 3], 1.0, &mut rng);
        let r = Tensor::randn([5, 3], 1.0, &mut rng);
        let e = gradient_error(&|_, v| feat_loss(&target, &v[0]), &[r], 1e-6).unwrap();
        assert!(e < 1e-6, "feat {e}");

        let d: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..5.0)).collect();
        let p = Tensor::uniform([6], 1.0, 5.0, &mut rng);
        let e = gradient_error(&|_, v| Ok(depth_loss(&d, &v[0], 0.2)?.total), &[p], 1e-6).unwrap();
        assert!(e < 1e-6, "depth {e}");

        let logits = Tensor::randn([4, 3], 1.0, &mut rng);
        let e = gradient_error(&|_, v| seg_loss(&[0, 2, 255, 1], &v[0]), &[logits], 1e-6).unwrap();
        assert!(e < 1e-6, "seg {e}");
    }
}
