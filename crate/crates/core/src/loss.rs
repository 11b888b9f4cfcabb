//! The adaptation objective over a batch of `N` paired image/text
//! embeddings (row `i` of each side is a positive pair).
//!
//! * contrastive: `−(1/N) Σ_i log softmax_j(sim(v_i, t_j)/τ)[i]`, anchored
//!   on images.
//! * hinge: `(1/N) Σ_i Σ_{j≠i} max(0, m − sim(v_i, t_i) + sim(v_i, t_j))`.
//! * combined: `α·contrastive + β·hinge`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f32,
    pub margin: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            margin: 0.2,
            alpha: 1.7,
            beta: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::config("loss weights must be finite"));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::config("alpha and beta cannot both be zero"));
        }
        Ok(())
    }

    pub fn contrastive_only(self) -> Self {
        Self { beta: 0.0, ..self }
    }

    pub fn hinge_only(self) -> Self {
        Self { alpha: 0.0, ..self }
    }
}

fn similarities<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var) -> Result<Var> {
    let (vi, vt) = (g.value(img), g.value(txt));
    if vi.rows() == 0 || !vi.is_matrix() {
        return Err(Error::contract("loss over an empty batch"));
    }
    if vi.shape() != vt.shape() {
        return Err(Error::shape(format!(
            "image batch {:?} vs text batch {:?}",
            vi.shape(),
            vt.shape()
        )));
    }
    let tt = g.transpose(txt)?;
    g.matmul(img, tt)
}

fn contrastive_from_sims<T: Scalar>(g: &mut Graph<T>, sims: Var, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = g.scale(sims, T::from_f64(1.0 / temperature as f64));
    let logp = g.log_softmax_rows(logits)?;
    let pos = g.diag(logp)?;
    let mean = g.mean(pos)?;
    Ok(g.scale(mean, -T::one()))
}

fn hinge_from_sims<T: Scalar>(g: &mut Graph<T>, sims: Var, margin: f32) -> Result<Var> {
    let n = g.value(sims).rows();
    let pos = g.diag(sims)?;
    let shifted = g.add_scalar(sims, T::from_f64(margin as f64));
    let slack = g.sub_col(shifted, pos)?;
    let hinge = g.relu(slack);
    let mut mask = Tensor::full(&[n, n], T::one());
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::zero();
    }
    let mask = g.constant(mask);
    let off_diag = g.mul(hinge, mask)?;
    let total = g.sum(off_diag);
    Ok(g.scale(total, T::from_f64(1.0 / n as f64)))
}

/// Contrastive loss node over `N × d` image and text batches.
pub fn contrastive<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    txt: Var,
    temperature: f32,
) -> Result<Var> {
    let sims = similarities(g, img, txt)?;
    contrastive_from_sims(g, sims, temperature)
}

/// Hinge loss node over `N × d` image and text batches.
pub fn hinge<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, margin: f32) -> Result<Var> {
    let sims = similarities(g, img, txt)?;
    hinge_from_sims(g, sims, margin)
}

/// `α·contrastive + β·hinge`. A zero weight drops its term entirely.
pub fn combined<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let sims = similarities(g, img, txt)?;
    let mut terms = Vec::with_capacity(2);
    if cfg.alpha != 0.0 {
        let c = contrastive_from_sims(g, sims, cfg.temperature)?;
        terms.push(g.scale(c, T::from_f64(cfg.alpha as f64)));
    }
    if cfg.beta != 0.0 {
        let h = hinge_from_sims(g, sims, cfg.margin)?;
        terms.push(g.scale(h, T::from_f64(cfg.beta as f64)));
    }
    match terms[..] {
        [one] => Ok(one),
        [a, b] => g.add(a, b),
        _ => unreachable!("validated config has a nonzero weight"),
    }
}

fn evaluate<T: Scalar>(
    img: &Tensor<T>,
    txt: &Tensor<T>,
    build: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let i = g.constant(img.clone());
    let t = g.constant(txt.clone());
    let root = build(&mut g, i, t)?;
    g.value(root).item()
}

pub fn contrastive_loss<T: Scalar>(
    img: &Tensor<T>,
    txt: &Tensor<T>,
    temperature: f32,
) -> Result<T> {
    evaluate(img, txt, |g, i, t| contrastive(g, i, t, temperature))
}

pub fn hinge_loss<T: Scalar>(img: &Tensor<T>, txt: &Tensor<T>, margin: f32) -> Result<T> {
    evaluate(img, txt, |g, i, t| hinge(g, i, t, margin))
}

pub fn combined_loss<T: Scalar>(img: &Tensor<T>, txt: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    evaluate(img, txt, |g, i, t| combined(g, i, t, cfg))
}

/// True when some hinge argument lies within `tol` of its kink.
pub fn near_hinge_kink<T: Scalar>(img: &Tensor<T>, txt: &Tensor<T>, margin: f32, tol: f64) -> bool {
    let Ok(tt) = txt.transpose() else {
        return false;
    };
    let Ok(s) = img.matmul(&tt) else { return false };
    let n = s.rows();
    (0..n).any(|i| {
        (0..n).any(|j| {
            i != j && {
                let arg =
                    margin as f64 - s.data()[i * n + i].as_f64() + s.data()[i * n + j].as_f64();
                arg.abs() < tol
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(n, d, raw)
            .unwrap()
            .l2_normalize_rows()
            .unwrap()
    }

    /// Plain evaluation of the contrastive formula.
    fn contrastive_oracle(v: &Tensor<f64>, t: &Tensor<f64>, tau: f64) -> f64 {
        let n = v.rows();
        let sim = |i: usize, j: usize| {
            v.row(i)
                .iter()
                .zip(t.row(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut total = 0.0;
        for i in 0..n {
            let num = (sim(i, i) / tau).exp();
            let den: f64 = (0..n).map(|j| (sim(i, j) / tau).exp()).sum();
            total += (num / den).ln();
        }
        -total / n as f64
    }

    fn hinge_oracle(v: &Tensor<f64>, t: &Tensor<f64>, m: f64) -> f64 {
        let n = v.rows();
        let sim = |i: usize, j: usize| {
            v.row(i)
                .iter()
                .zip(t.row(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if j != i {
                    total += (m - sim(i, i) + sim(i, j)).max(0.0);
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let v = unit_rows(1, 1, 5);
        let t = unit_rows(2, 1, 5);
        assert_eq!(contrastive_loss(&v, &t, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_uniform_similarities_give_ln_n() {
        let e = Tensor::<f64>::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = contrastive_loss(&e, &e, 0.07).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn contrastive_matches_oracle() {
        let v = unit_rows(3, 4, 8);
        let t = unit_rows(4, 4, 8);
        let l = contrastive_loss(&v, &t, 0.07).unwrap();
        assert!((l - contrastive_oracle(&v, &t, 0.07)).abs() < 1e-5);
        assert!(l > 0.0);
    }

    #[test]
    fn hinge_unit_values() {
        // positives at +1, negatives at −1
        let e = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(hinge_loss(&e, &e, 0.2).unwrap(), 0.0);

        let same = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((hinge_loss(&same, &same, 0.2).unwrap() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn hinge_matches_oracle() {
        let v = unit_rows(5, 4, 8);
        let t = unit_rows(6, 4, 8);
        assert!((hinge_loss(&v, &t, 0.2).unwrap() - hinge_oracle(&v, &t, 0.2)).abs() < 1e-6);
    }

    #[test]
    fn combined_weights() {
        let v = unit_rows(7, 5, 6);
        let t = unit_rows(8, 5, 6);
        let cfg = LossConfig::default();
        let c = contrastive_loss(&v, &t, cfg.temperature).unwrap();
        let h = hinge_loss(&v, &t, cfg.margin).unwrap();
        let l = combined_loss(&v, &t, &cfg).unwrap();
        assert!((l - (1.7f32 as f64 * c + 0.3f32 as f64 * h)).abs() < 1e-12);
        let only_c = combined_loss(&v, &t, &cfg.contrastive_only()).unwrap();
        assert_eq!(only_c, c * 1.7f32 as f64);
    }

    #[test]
    fn weighted_combination_on_unit_losses() {
        let cfg = LossConfig::default();
        assert!((cfg.alpha * 1.0 + cfg.beta * 1.0 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn config_errors() {
        let v = unit_rows(1, 2, 3);
        assert!(matches!(
            contrastive_loss(&v, &v, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            contrastive_loss(&v, &v, -1.0),
            Err(Error::Config(_))
        ));
        let empty = Tensor::<f64>::zeros(&[0, 3]);
        assert!(matches!(
            hinge_loss(&empty, &empty, 0.2),
            Err(Error::Contract(_))
        ));
        let bad = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        assert!(combined_loss(&v, &v, &bad).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let v = unit_rows(9, 6, 5);
        let t = unit_rows(10, 6, 5);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor<f64>| {
            Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let (pv, pt) = (permute(&v), permute(&t));
        let cfg = LossConfig::default();
        assert!(
            (contrastive_loss(&v, &t, 0.07).unwrap() - contrastive_loss(&pv, &pt, 0.07).unwrap())
                .abs()
                < 1e-6
        );
        assert!(
            (hinge_loss(&v, &t, 0.2).unwrap() - hinge_loss(&pv, &pt, 0.2).unwrap()).abs() < 1e-6
        );
        assert!(
            (combined_loss(&v, &t, &cfg).unwrap() - combined_loss(&pv, &pt, &cfg).unwrap()).abs()
                < 1e-6
        );
    }
}
