//! Central-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences for every
/// coordinate of every parameter with `requires_grad` set.
///
/// `build` assembles the scalar objective on a fresh graph from the given
/// parameter values; it is invoked once for the analytic sweep and twice per
/// coordinate for the numeric probes. The relative error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(params: &BTreeMap<String, Tensor>, build: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Tensor>) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must be in (0, 1e-2], got {}",
            eps
        )));
    }
    let mut graph = Graph::new();
    let root = build(&mut graph, params)?;
    let analytic = graph.backward(root)?;

    let eval = |point: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, point)?;
        let v = g.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut point = params.clone();
    for (name, tensor) in params {
        if !tensor.requires_grad() {
            if analytic.contains_key(name) {
                return Err(Error::InvalidArgument(format!(
                    "frozen parameter {} received a gradient",
                    name
                )));
            }
            continue;
        }
        let grad = analytic.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no analytic gradient for trainable {}", name))
        })?;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            point.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&point)?;
            point.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&point)?;
            point.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        entries
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    fn bind(g: &mut Graph, p: &BTreeMap<String, Tensor>, name: &str) -> NodeId {
        g.named_leaf(name, p[name].clone(), p[name].requires_grad())
            .unwrap()
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = params(&[(
            "p",
            Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7])
                .unwrap()
                .with_grad(true),
        )]);
        // f = 0.5 * ||p||^2 via sum(p * 0.5 scaled elementwise products) -- use
        // matmul with itself transposed: p.p = sum of squares.
        let report = grad_check(
            &p,
            |g, point| {
                let x = bind(g, point, "p");
                let x2 = g.reshape(x, &[1, 4])?;
                let sq = g.matmul_bt(x2, x2)?; // [1,1] = sum p_i^2
                let half = g.scale(sq, 0.5)?;
                g.sum(half)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err = {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn frozen_leaf_is_excluded_from_the_report() {
        let p = params(&[
            (
                "w",
                Tensor::from_vec(&[2, 2], vec![0.5, -0.25, 0.75, 1.0])
                    .unwrap()
                    .with_grad(true),
            ),
            (
                "x",
                Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ),
        ]);
        let report = grad_check(
            &p,
            |g, point| {
                let w = bind(g, point, "w");
                let x = bind(g, point, "x");
                let y = g.matmul(w, x)?;
                g.sum(y)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 4, "only w is probed");
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn norm_matmul_cross_entropy_chain_checks_out() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rand_t = |dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(dims, data).unwrap().with_grad(true)
        };
        let p = params(&[
            ("x", rand_t(&[3, 8], &mut rng)),
            ("gamma", rand_t(&[8], &mut rng)),
            ("beta", rand_t(&[8], &mut rng)),
            ("w", rand_t(&[8, 5], &mut rng)),
        ]);
        let report = grad_check(
            &p,
            |g, point| {
                let x = bind(g, point, "x");
                let gamma = bind(g, point, "gamma");
                let beta = bind(g, point, "beta");
                let w = bind(g, point, "w");
                let normed = g.layer_norm(x, gamma, beta, 1e-5)?;
                let logits = g.matmul(normed, w)?;
                g.cross_entropy(logits, vec![1, 4, 0], u32::MAX)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "err = {}", report.max_rel_err);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let p = params(&[("p", Tensor::scalar(1.0).with_grad(true))]);
        let build = |g: &mut Graph, point: &BTreeMap<String, Tensor>| {
            let x = g.named_leaf("p", point["p"].clone(), true)?;
            g.sum(x)
        };
        assert!(grad_check(&p, build, 0.0).is_err());
        assert!(grad_check(&p, build, 0.05).is_err());
    }
}
