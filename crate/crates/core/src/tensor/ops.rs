use super::Tensor;
use crate::error::{invalid, Result};

/// Epsilon used by every RMS normalization in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Visits every 1-D lane of `x` along `axis` as (start offset, stride, len).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, len, inner)
}

fn check_axis(x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.ndim() {
        return invalid(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape()
        ));
    }
    Ok(())
}

/// `x / sqrt(mean(x^2) + eps)` along `axis`.
pub fn rms_norm(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    check_axis(x, axis)?;
    if eps <= 0.0 {
        return invalid("rms_norm eps must be positive");
    }
    let (outer, len, inner) = lanes(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let ms: f64 = (0..len).map(|k| d[base + k * inner].powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for k in 0..len {
                d[base + k * inner] *= inv;
            }
        }
    }
    out.ensure_finite("rms_norm")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = lanes(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|k| d[base + k * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[base + k * inner] - max).exp();
                d[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                d[base + k * inner] /= total;
            }
        }
    }
    out.ensure_finite("softmax")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rms_norm_zero_and_constant() {
        let z = Tensor::zeros(&[2, 5]);
        assert_eq!(rms_norm(&z, 1, NORM_EPS).unwrap(), z);
        let c = Tensor::full(&[1, 4], -3.0);
        let n = rms_norm(&c, 1, 1e-12).unwrap();
        assert!(n.data().iter().all(|&v| (v + 1.0).abs() < 1e-9));
    }

    #[test]
    fn rms_norm_unit_mean_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 64], 3.0, &mut rng);
        let n = rms_norm(&x, 1, NORM_EPS).unwrap();
        let ms = n.sum_sq() / 64.0;
        assert!((ms - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_along_leading_axis() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
        let n = rms_norm(&x, 0, NORM_EPS).unwrap();
        for j in 0..2 {
            let ms: f64 = (0..3).map(|i| n.at(i, j).powi(2)).sum::<f64>() / 3.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_and_softmax_basics() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let s = softmax(&Tensor::zeros(&[2]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let big = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax(&big, 0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[6, 9], 4.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for i in 0..6 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
