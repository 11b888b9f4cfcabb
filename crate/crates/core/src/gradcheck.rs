//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{loss_and_grads, loss_value, ImageSide, PairBatch, Trainable};
use crate::encoder::{DualEncoder, EncoderDims};
use crate::error::Result;
use crate::lora::{attach, LoraConfig, Tower};
use crate::loss::{near_hinge_kink, LossConfig};
use crate::tensor::{Activation, Scalar, Tensor};

/// Denominator floor of the relative error measure.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Max over coordinates of the relative error between `analytic` and the
/// central difference `(f(x+h·e) − f(x−h·e)) / 2h`.
pub fn grad_check_flat<T: Scalar>(
    value: impl Fn(&[T]) -> T,
    analytic: &[T],
    x: &[T],
    h: f64,
) -> f64 {
    assert_eq!(analytic.len(), x.len(), "gradient and point lengths differ");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = T::from_f64(orig.as_f64() + h);
        let plus = value(&probe).as_f64();
        probe[i] = T::from_f64(orig.as_f64() - h);
        let minus = value(&probe).as_f64();
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    worst
}

/// [`grad_check_flat`] for a function of one tensor returning
/// `(value, gradient)`.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> (T, Tensor<T>),
    x: &Tensor<T>,
    h: f64,
) -> f64 {
    let (_, analytic) = f(x);
    let shape = x.shape().to_vec();
    grad_check_flat(
        |p: &[T]| f(&Tensor::new(shape.clone(), p.to_vec()).expect("probe shape")).0,
        analytic.data(),
        x.data(),
        h,
    )
}

/// Finite-difference step of [`adapter_gradient_check`].
pub const ADAPTER_CHECK_STEP: f64 = 1e-6;

/// Checks the gradient of `loss` with respect to every adapter parameter
/// of a small random dual encoder in f64. Each `B` starts off zero so `A`
/// has a gradient path. Returns `None` when some hinge argument lies near
/// its kink, where central differences are unreliable.
pub fn adapter_gradient_check(seed: u64, loss: &LossConfig) -> Result<Option<f64>> {
    let dims = EncoderDims {
        d_in: 12,
        d_hidden: 10,
        d_e: 8,
        layers: 2,
    };
    let n = 5;
    let enc = DualEncoder::<f64>::init(seed, &dims, Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut random = |rows: usize| {
        Tensor::matrix(
            rows,
            dims.d_in,
            (0..rows * dims.d_in)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    };
    let img = random(n)?;
    let txt = random(n)?;
    let mut set = attach(
        &enc,
        &LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    for ad in set.adapters_mut() {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let img_e = enc.encode_batch(Tower::Vision, &img, Some(&set))?;
    let txt_e = enc.encode_batch(Tower::Text, &txt, Some(&set))?;
    if near_hinge_kink(&img_e, &txt_e, loss.margin, 1e-4) {
        return Ok(None);
    }
    let batch = PairBatch {
        image: ImageSide::Features(img),
        text: txt,
    };
    let trainable = Trainable::Adapters(set);
    let (_, grads) = loss_and_grads(&enc, &trainable, &batch, loss)?;
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .collect();
    let x: Vec<f64> = trainable
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let err = grad_check_flat(
        |p: &[f64]| {
            let mut t = trainable.clone();
            let mut off = 0;
            for q in t.params_mut() {
                let len = q.len();
                q.data_mut().copy_from_slice(&p[off..off + len]);
                off += len;
            }
            loss_value(&enc, &t, &batch, loss).expect("probe loss")
        },
        &analytic,
        &x,
        ADAPTER_CHECK_STEP,
    );
    Ok(Some(err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn sum_of_squares(x: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let val = g.value(s).item().unwrap();
        (val, g.backward(s).unwrap().get(v).unwrap().clone())
    }

    #[test]
    fn adapter_check_passes_on_a_few_seeds() {
        let mut checked = 0;
        for seed in 0..5 {
            if let Some(err) = adapter_gradient_check(seed, &LossConfig::default()).unwrap() {
                assert!(err < 1e-4, "seed {seed}: {err}");
                checked += 1;
            }
        }
        assert!(checked >= 3);
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(sum_of_squares, &x, 1e-3) < 1e-6);
    }

    #[test]
    fn constant_function_hits_the_floor() {
        let x = Tensor::vector(vec![0.5, -1.5, 3.0]);
        let err = grad_check(|_| (7.0, Tensor::zeros(&[3])), &x, 1e-3);
        assert!(err < 1e-9 / REL_ERR_FLOOR);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(|x| (sum_of_squares(x).0, x.clone()), &x, 1e-3);
        assert!(err > 0.4);
    }
}
