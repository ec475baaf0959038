use super::Tensor;
use crate::formation::FormationOp;
use crate::{Error, Image, Result};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its subgradient, with `sign(0) = 0`.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.same_shape_as(target, "l1 loss")?;
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.numel());
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss += d.abs();
        grad.push(sign(d) / n);
    }
    Ok((loss / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// `λ · mean|D K I − L|` per batch item, with the gradient pulled back
/// through the exact adjoints of decimation and blur.
pub fn formation_loss(pred_hr: &Tensor, lr: &Tensor, op: &FormationOp, lambda: f64) -> Result<(f64, Tensor)> {
    let (b, c, h, w) = pred_hr.dims4()?;
    let (lb, lc, lh, lw) = lr.dims4()?;
    let s = op.scale().get();
    if lb != b || lc != c || lh * s != h || lw * s != w {
        return Err(Error::DimensionMismatch(format!(
            "HR tensor {:?} does not match LR tensor {:?} at scale {s}",
            pred_hr.shape(),
            lr.shape()
        )));
    }
    if lambda == 0.0 {
        return Ok((0.0, Tensor::zeros(pred_hr.shape())));
    }
    let count = lr.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred_hr.numel());
    for n in 0..b {
        let regen = op.forward(&pred_hr.to_image(n)?)?;
        let obs = lr.to_image(n)?;
        let mut sub = Vec::with_capacity(obs.data().len());
        for (r, o) in regen.data().iter().zip(obs.data()) {
            let d = r - o;
            loss += d.abs();
            sub.push(lambda * sign(d) / count);
        }
        let upstream = Image::from_planar(lw, lh, c, sub)?;
        grad.extend_from_slice(op.adjoint(&upstream)?.data());
    }
    Ok((lambda * loss / count, Tensor::from_vec(pred_hr.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{gaussian_kernel, ScaleFactor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn l1_closed_forms() {
        let t = random(&[1, 3, 4, 4], 1);
        let (loss, grad) = l1_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let p = t.map(|v| v + 0.2);
        let (loss, grad) = l1_loss(&p, &t).unwrap();
        assert!((loss - 0.2).abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g == 1.0 / 48.0));
        assert!(l1_loss(&p, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let p = random(&[1, 2, 3, 3], 2);
        let t = random(&[1, 2, 3, 3], 3);
        let (_, g) = l1_loss(&p, &t).unwrap();
        let h = 1e-7;
        for i in 0..p.numel() {
            if (p.data()[i] - t.data()[i]).abs() < 1e-4 {
                continue;
            }
            let (mut a, mut b) = (p.clone(), p.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (l1_loss(&a, &t).unwrap().0 - l1_loss(&b, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() / g.data()[i].abs() < 1e-4);
        }
    }

    fn op() -> FormationOp {
        FormationOp::new(gaussian_kernel(1.0, 5).unwrap(), ScaleFactor::new(2).unwrap())
    }

    #[test]
    fn formation_loss_trivial_cases() {
        let hr = random(&[1, 1, 8, 8], 4);
        let lr = Tensor::from_image(&op().forward(&hr.to_image(0).unwrap()).unwrap());
        let (loss, _) = formation_loss(&hr, &lr, &op(), 0.01).unwrap();
        assert_eq!(loss, 0.0);
        let other = random(&[1, 1, 4, 4], 5);
        let (loss, grad) = formation_loss(&hr, &other, &op(), 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        assert!(formation_loss(&hr, &random(&[1, 1, 3, 4], 6), &op(), 0.1).is_err());
    }

    #[test]
    fn formation_loss_gradient_matches_finite_differences() {
        let hr = random(&[1, 1, 8, 8], 7);
        let lr = random(&[1, 1, 4, 4], 8);
        let lambda = 0.5;
        let (_, g) = formation_loss(&hr, &lr, &op(), lambda).unwrap();
        let h = 1e-7;
        for i in 0..hr.numel() {
            let (mut a, mut b) = (hr.clone(), hr.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (formation_loss(&a, &lr, &op(), lambda).unwrap().0
                - formation_loss(&b, &lr, &op(), lambda).unwrap().0)
                / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs();
            assert!(err < 1e-8 || err / an.abs().max(fd.abs()) < 1e-4, "{i}: {an} vs {fd}");
        }
    }
}
