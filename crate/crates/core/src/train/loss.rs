use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over all elements of `(a − b)²`, summed in index order.
pub fn mean_squared_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    let total = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
    total / T::of(a.len() as f64)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Mean squared error between two tensors of identical shape.
pub fn l2_loss<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("l2_loss", output, target)?;
    Ok(mean_squared_error(output.data(), target.data()))
}

/// `10·log10(peak² / mse)`; zero error gives `+∞`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB, error accumulated in `f64`.
pub fn psnr<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape("psnr", output, target)?;
    let n = output.len() as f64;
    let sse: f64 = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / n, peak))
}
