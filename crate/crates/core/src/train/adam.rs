use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates keyed by parameter name. Moments are created as zeros
/// the first time a parameter is stepped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
/// Every parameter needs a gradient of its own shape; on error nothing is
/// modified.
pub fn adam_step<T: Scalar>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(*name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape()),
            ));
        }
        for (moments, what) in [(&state.m, "first"), (&state.v, "second")] {
            if let Some(m) = moments.get(*name) {
                if m.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("{what} moment of {name} is {:?}, parameter is {:?}", m.shape(), p.shape()),
                    ));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let c1 = T::one() - T::of(BETA1.powi(t));
    let c2 = T::one() - T::of(BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(EPSILON));
    for (name, p) in params.iter_mut() {
        let g = &grads[*name];
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in it {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
