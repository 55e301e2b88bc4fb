//! Parameterized building blocks shared by the backbone and the meta learner.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{cast, Graph, ParamSet, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// He-normal initialized convolution kernel `[c_out, c_in, k, k]`.
pub fn init_conv<T: Real, R: Rng>(
    params: &mut ParamSet<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| cast(normal.sample(rng)));
    params.insert(&format!("{name}.weight"), w, true)?;
    Ok(())
}

pub fn init_batch_norm<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    channels: usize,
) -> Result<()> {
    params.insert(
        &format!("{name}.gamma"),
        Tensor::full(&[channels], T::one()),
        true,
    )?;
    params.insert(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)?;
    params.insert(
        &format!("{name}.running_mean"),
        Tensor::zeros(&[channels]),
        false,
    )?;
    params.insert(
        &format!("{name}.running_var"),
        Tensor::full(&[channels], T::one()),
        false,
    )?;
    Ok(())
}

/// Batch normalization over axis 1: batch statistics while training (and a
/// recorded running-statistic update), running statistics otherwise.
pub fn batch_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"))?;
    let beta = g.param(&format!("{name}.beta"))?;
    let mean_key = format!("{name}.running_mean");
    let var_key = format!("{name}.running_var");
    let params = g.params();
    let running_mean = params.get(&mean_key)?;
    let running_var = params.get(&var_key)?;
    if !g.training() {
        return g.batch_norm_eval(
            x,
            gamma,
            beta,
            running_mean.data(),
            running_var.data(),
            cast(BN_EPS),
        );
    }
    let (y, mean, var) = g.batch_norm_train(x, gamma, beta, cast(BN_EPS))?;
    let m: T = cast(BN_MOMENTUM);
    let blend = |old: &Tensor<T>, new: &[T]| {
        Tensor::from_fn(old.shape(), |i| (T::one() - m) * old.data()[i] + m * new[i])
    };
    let (nm, nv) = (blend(running_mean, &mean), blend(running_var, &var));
    g.record_buffer(&mean_key, nm);
    g.record_buffer(&var_key, nv);
    Ok(y)
}
