//! Training objective: classification cross-entropy plus SSIM and patch
//! absolute-error terms on the predicted patch depths.
//!
//! SSIM here uses global statistics over the whole patch grid (one window)
//! with population variance and covariance. The SSIM term that is minimized
//! is `1 - SSIM`.

use facedepth_autograd::{Session, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.7, beta: 0.7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    /// `(0.01 L)^2` and `(0.03 L)^2` for unit dynamic range.
    fn default() -> Self {
        Self { c1: 1e-4, c2: 9e-4 }
    }
}

impl SsimConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::config("ssim constants must be strictly positive"));
        }
        Ok(())
    }
}

fn check_same_len(a: &[f64], b: &[f64], context: &'static str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            context,
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    Ok(())
}

pub fn ssim(a: &[f64], b: &[f64], c: SsimConstants) -> Result<f64> {
    check_same_len(a, b, "ssim")?;
    c.validate()?;
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|x| (x - mu_a).powi(2)).sum::<f64>() / n;
    let var_b = b.iter().map(|x| (x - mu_b).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
    Ok(((2.0 * mu_a * mu_b + c.c1) * (2.0 * cov + c.c2))
        / ((mu_a * mu_a + mu_b * mu_b + c.c1) * (var_a + var_b + c.c2)))
}

pub fn ssim_loss(a: &[f64], b: &[f64], c: SsimConstants) -> Result<f64> {
    Ok(1.0 - ssim(a, b, c)?)
}

/// `sum_i sum_p |a_ip - b_ip|` over a batch of patch vectors.
pub fn patch_mse<A: AsRef<[f64]>, B: AsRef<[f64]>>(pred: &[A], target: &[B]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            context: "patch_mse batch",
            expected: vec![pred.len()],
            found: vec![target.len()],
        });
    }
    let mut total = 0.0;
    for (a, b) in pred.iter().zip(target) {
        let (a, b) = (a.as_ref(), b.as_ref());
        check_same_len(a, b, "patch_mse patches")?;
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total)
}

pub fn total_loss(classification: f64, ssim_term: f64, mse_term: f64, w: LossWeights) -> Result<f64> {
    if ![classification, ssim_term, mse_term].iter().all(|v| v.is_finite()) {
        return Err(Error::contract("loss terms must be finite"));
    }
    Ok(classification + w.alpha * ssim_term + w.beta * mse_term)
}

/// Graph nodes for the depth supervision terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct DepthTerms {
    /// Mean SSIM over the batch.
    pub ssim: Var,
    /// Mean `1 - SSIM` over the batch.
    pub ssim_loss: Var,
    /// Literal sum of absolute patch errors.
    pub mse_raw: Var,
    /// `mse_raw / batch_size`, the value weighted by beta.
    pub mse: Var,
}

/// Per-sample SSIM on `[B, P]` predictions and targets, returning `[B]`.
pub fn ssim_graph(s: &mut Session, pred: Var, target: Var, c: SsimConstants) -> Result<Var> {
    if s.shape(pred) != s.shape(target) || s.shape(pred).len() != 2 {
        return Err(Error::Shape {
            context: "ssim_graph",
            expected: s.shape(target).to_vec(),
            found: s.shape(pred).to_vec(),
        });
    }
    let mu_a = s.mean_axis(pred, 1, true);
    let mu_b = s.mean_axis(target, 1, true);
    let da = s.sub(pred, mu_a);
    let db = s.sub(target, mu_b);
    let da2 = s.mul(da, da);
    let db2 = s.mul(db, db);
    let dab = s.mul(da, db);
    let var_a = s.mean_axis(da2, 1, true);
    let var_b = s.mean_axis(db2, 1, true);
    let cov = s.mean_axis(dab, 1, true);

    let mu_ab = s.mul(mu_a, mu_b);
    let lum_num = s.scale(mu_ab, 2.0);
    let lum_num = s.add_scalar(lum_num, c.c1);
    let cs_num = s.scale(cov, 2.0);
    let cs_num = s.add_scalar(cs_num, c.c2);
    let num = s.mul(lum_num, cs_num);

    let ma2 = s.mul(mu_a, mu_a);
    let mb2 = s.mul(mu_b, mu_b);
    let lum_den = s.add(ma2, mb2);
    let lum_den = s.add_scalar(lum_den, c.c1);
    let cs_den = s.add(var_a, var_b);
    let cs_den = s.add_scalar(cs_den, c.c2);
    let den = s.mul(lum_den, cs_den);

    let ratio = s.div(num, den);
    let b = s.shape(pred)[0];
    Ok(s.reshape(ratio, &[b]))
}

pub fn depth_terms(s: &mut Session, pred: Var, target: Var, c: SsimConstants) -> Result<DepthTerms> {
    let per_sample = ssim_graph(s, pred, target, c)?;
    let ssim = s.mean_all(per_sample);
    let neg = s.scale(ssim, -1.0);
    let ssim_loss = s.add_scalar(neg, 1.0);
    let diff = s.sub(pred, target);
    let abs = s.abs(diff);
    let mse_raw = s.sum_all(abs);
    let b = s.shape(pred)[0] as f64;
    let mse = s.scale(mse_raw, 1.0 / b);
    Ok(DepthTerms {
        ssim,
        ssim_loss,
        mse_raw,
        mse,
    })
}

/// `L_c + alpha * ssim_loss + beta * mse` on the graph.
pub fn total_graph(s: &mut Session, classification: Var, depth: Option<&DepthTerms>, w: LossWeights) -> Var {
    match depth {
        None => classification,
        Some(d) => {
            let a = s.scale(d.ssim_loss, w.alpha);
            let b = s.scale(d.mse, w.beta);
            let t = s.add(classification, a);
            s.add(t, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use facedepth_autograd::gradcheck::{numerical_input_grad, relative_error};
    use facedepth_autograd::tensor::tensor;
    use facedepth_autograd::ParamStore;
    use proptest::prelude::*;

    const C: SsimConstants = SsimConstants { c1: 1e-4, c2: 9e-4 };

    #[test]
    fn ssim_examples() {
        let a = [0.1, 0.5, 0.9, 0.3];
        assert!((ssim(&a, &a, C).unwrap() - 1.0).abs() < 1e-15);
        let b = [0.2, 0.4, 0.7, 0.1];
        assert_eq!(ssim(&a, &b, C).unwrap(), ssim(&b, &a, C).unwrap());
        // zero variances: (2*0.16 + c1) c2 / ((0.04 + 0.64 + c1) c2)
        let s = ssim(&[0.2; 196], &[0.8; 196], C).unwrap();
        let expected = (2.0 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.4707).abs() < 5e-5);
        assert!(ssim(&a, &b[..3], C).is_err());
    }

    #[test]
    fn ssim_loss_examples() {
        assert_eq!(ssim_loss(&[0.3; 4], &[0.3; 4], C).unwrap(), 0.0);
        assert!(ssim_loss(&[0.3; 4], &[0.6; 4], C).unwrap() > 0.0);
    }

    #[test]
    fn patch_mse_examples() {
        assert_eq!(patch_mse(&[vec![0.2, 0.3]], &[vec![0.2, 0.3]]).unwrap(), 0.0);
        let l = patch_mse(&[vec![0.5, 0.0]], &[vec![0.2, 0.4]]).unwrap();
        assert!((l - 0.7).abs() < 1e-15);
        let one = patch_mse(&[vec![0.1, 0.9]], &[vec![0.3, 0.2]]).unwrap();
        let two = patch_mse(&[vec![0.1, 0.9], vec![0.1, 0.9]], &[vec![0.3, 0.2], vec![0.3, 0.2]]).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-15);
        assert!(patch_mse(&[vec![0.1]], &[vec![0.1], vec![0.2]]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 0.2, 0.4, w).unwrap() - 1.42).abs() < 1e-12);
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.9, 5.0, 7.0, zero).unwrap(), 0.9);
        assert!(total_loss(f64::NAN, 0.0, 0.0, w).is_err());
        assert!(total_loss(1.0, 0.3, 0.4, w).unwrap() > total_loss(1.0, 0.2, 0.4, w).unwrap());
    }

    #[test]
    fn graph_ssim_matches_plain() {
        let pred = [0.1, 0.5, 0.9, 0.3, 0.4, 0.4, 0.2, 0.8];
        let target = [0.2, 0.4, 0.7, 0.1, 0.9, 0.1, 0.3, 0.3];
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let p = s.input(tensor(&[2, 4], pred.to_vec()));
        let t = s.input(tensor(&[2, 4], target.to_vec()));
        let per = ssim_graph(&mut s, p, t, C).unwrap();
        for i in 0..2 {
            let plain = ssim(&pred[i * 4..i * 4 + 4], &target[i * 4..i * 4 + 4], C).unwrap();
            assert!((s.value(per)[i] - plain).abs() < 1e-14);
        }
        let terms = depth_terms(&mut s, p, t, C).unwrap();
        let mse = patch_mse(&[&pred[..4], &pred[4..]], &[&target[..4], &target[4..]]).unwrap();
        assert!((s.scalar(terms.mse_raw) - mse).abs() < 1e-14);
        assert!((s.scalar(terms.mse) - mse / 2.0).abs() < 1e-14);
    }

    #[test]
    fn ssim_loss_gradient_matches_finite_differences() {
        let pred = tensor(&[2, 5], vec![0.12, 0.55, 0.91, 0.33, 0.47, 0.8, 0.25, 0.6, 0.05, 0.7]);
        let target = tensor(&[2, 5], vec![0.2, 0.4, 0.7, 0.1, 0.9, 0.1, 0.3, 0.3, 0.65, 0.5]);
        let eval = |p: &facedepth_autograd::Tensor, track: bool| {
            let store = ParamStore::new();
            let mut s = Session::inference(&store);
            let pv = if track { s.variable(p.clone()) } else { s.input(p.clone()) };
            let tv = s.input(target.clone());
            let terms = depth_terms(&mut s, pv, tv, C).unwrap();
            let value = s.scalar(terms.ssim_loss);
            let grad = track.then(|| s.backward(terms.ssim_loss).get(pv).unwrap().clone());
            (value, grad)
        };
        let analytic = eval(&pred, true).1.unwrap();
        let numeric = numerical_input_grad(&pred, 1e-6, |p| eval(p, false).0);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err:e}");
    }

    proptest! {
        #[test]
        fn ssim_bounded_by_one(
            a in proptest::collection::vec(0.0f64..1.0, 16),
            b in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let s = ssim(&a, &b, C).unwrap();
            prop_assert!(s <= 1.0 + 1e-12);
            prop_assert!(s > -1.0);
            let differs = a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3);
            if differs {
                prop_assert!(s < 1.0 - 1e-9);
            }
            prop_assert!(patch_mse(&[&a], &[&b]).unwrap() >= 0.0);
        }
    }
}
