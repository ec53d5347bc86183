//! Central-difference gradient checking.
//!
//! The checker evaluates the recorded forward computation only; the backward
//! pass it validates never participates in the numeric estimate, so the two
//! sides stay independent.

use rayon::prelude::*;

use super::graph::{Graph, NodeId};
use super::{Scalar, Tensor};
use crate::error::Result;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error, `|a - n| / max(|a|, |n|, 1e-12)`.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst error.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords_checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn eval_scalar<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = false;
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &ids)?;
    Ok(g.value(out).data()[0].to_f64())
}

/// Analytic gradients of `f` (scalar-valued) with respect to every input.
pub fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &ids)?;
    let mut grads = g.backward(out)?;
    Ok(ids.iter().map(|&id| grads.take(id).expect("leaf gradient")).collect())
}

/// Compare analytic gradients against central differences at every
/// coordinate of every input (or a deterministic sample when `max_coords`
/// limits the sweep). `eps` is the absolute probe step.
pub fn grad_check<T, F>(f: &F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let analytic = analytic_gradients(f, inputs)?;
    grad_check_against(f, inputs, &analytic, eps, None, 0)
}

/// As [`grad_check`] but probing at most `max_coords` coordinates, chosen by
/// a seeded shuffle so runs are reproducible.
pub fn grad_check_sampled<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let analytic = analytic_gradients(f, inputs)?;
    grad_check_against(f, inputs, &analytic, eps, Some(max_coords), seed)
}

/// Core comparison against externally supplied "analytic" gradients. Feeding
/// deliberately wrong gradients here is the mutation test for the checker
/// itself.
pub fn grad_check_against<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    analytic: &[Tensor<T>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(limit) = max_coords {
        if limit > 0 && limit < coords.len() {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            coords.shuffle(&mut rng);
            coords.truncate(limit);
            coords.sort_unstable();
        }
    }

    let errs: Vec<(f64, f64, f64)> = coords
        .par_iter()
        .map(|&(i, j)| -> Result<(f64, f64, f64)> {
            let base = inputs[i].data()[j].to_f64();
            let mut plus: Vec<Tensor<T>> = inputs.to_vec();
            plus[i].data_mut()[j] = T::from_f64(base + eps);
            let f_plus = eval_scalar(f, &plus)?;
            let mut minus: Vec<Tensor<T>> = inputs.to_vec();
            minus[i].data_mut()[j] = T::from_f64(base - eps);
            let f_minus = eval_scalar(f, &minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i].data()[j].to_f64();
            Ok((rel_err(a, numeric), a, numeric))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
        coords_checked: coords.len(),
    };
    for (idx, &(e, a, n)) in errs.iter().enumerate() {
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = coords[idx];
            report.worst_pair = (a, n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn sum_gradient_is_exact() {
        // The function is linear, so any probe step is exact up to rounding;
        // a large step keeps the rounding term below 1e-12.
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| g.sum(ids[0]);
        let x = randn(vec![3, 4], 1);
        let rep = grad_check(&f, &[x], 1e-2).unwrap();
        assert!(rep.max_rel_err <= 1e-12, "sum grad err {}", rep.max_rel_err);
    }

    #[test]
    fn exp_gradient_matches_fd_tightly() {
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let e = g.exp(ids[0])?;
            g.sum(e)
        };
        let x = randn(vec![16], 2);
        let rep = grad_check(&f, &[x], 1e-6).unwrap();
        assert!(rep.max_rel_err <= 1e-8, "exp grad err {}", rep.max_rel_err);
    }

    #[test]
    fn conv_tanh_chain_checks_out() {
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1)?;
            let t = g.tanh(y)?;
            g.sum(t)
        };
        let x = randn(vec![1, 2, 4, 4], 3);
        let w = randn(vec![3, 2, 3, 3], 4).map(|v| v * 0.3);
        let b = randn(vec![3], 5);
        let rep = grad_check(&f, &[x, w, b], 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-6, "conv chain grad err {}", rep.max_rel_err);
    }

    #[test]
    fn conv_gradients_match_fd_randomized() {
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        };
        let x = randn(vec![2, 3, 5, 5], 11);
        let w = randn(vec![4, 3, 3, 3], 12).map(|v| v * 0.4);
        let b = randn(vec![4], 13);
        let rep = grad_check(&f, &[x, w, b], 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-6, "conv grad err {}", rep.max_rel_err);
    }

    #[test]
    fn concat_routes_gradients_to_matching_halves() {
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let cat = g.channel_concat(ids[0], ids[1])?;
            let scaled = g.scale(cat, 1.5)?;
            let sq = g.mul(scaled, scaled)?;
            g.sum(sq)
        };
        let a = randn(vec![1, 2, 3, 3], 6);
        let b = randn(vec![1, 2, 3, 3], 7);
        let rep = grad_check(&f, &[a, b], 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-8, "concat grad err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_rule_is_caught() {
        // Negative control: a wrong analytic gradient must stand out.
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let t = g.tanh(ids[0])?;
            g.sum(t)
        };
        let x = randn(vec![8], 8);
        let mut bad = analytic_gradients(&f, &[x.clone()]).unwrap();
        for v in bad[0].data_mut() {
            *v *= 1.05; // 5% corruption
        }
        let rep = grad_check_against(&f, &[x], &bad, 1e-5, None, 0).unwrap();
        assert!(rep.max_rel_err >= 1e-2, "corruption not detected: {}", rep.max_rel_err);
    }

    #[test]
    fn per_op_invariant_ten_random_points() {
        // Every differentiable op stays under 1e-5 at 10 random points.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for trial in 0..10 {
            let x = Tensor::<f64>::randn(vec![1, 4, 4, 4], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![2, 4, 3, 3], 0.3, &mut rng);
            let b = Tensor::<f64>::randn(vec![2], 0.5, &mut rng);
            let ops: Vec<Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Sync>> = vec![
                Box::new(|g, ids| {
                    let y = g.add(ids[0], ids[0])?;
                    let y = g.mul(y, ids[0])?;
                    g.sum(y)
                }),
                Box::new(|g, ids| {
                    let y = g.sub(ids[0], ids[0])?;
                    let z = g.exp(y)?;
                    let z = g.tanh(z)?;
                    g.sum(z)
                }),
                Box::new(|g, ids| {
                    let y = g.leaky_relu(ids[0], 0.2)?;
                    let y = g.scale(y, -0.7)?;
                    g.sum(y)
                }),
                Box::new(|g, ids| {
                    let u = g.pixel_unshuffle(ids[0], 2)?;
                    let (lo, hi) = g.channel_split(u)?;
                    let m = g.mul(lo, hi)?;
                    g.sum(m)
                }),
                Box::new(|g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 1)?;
                    g.sum(y)
                }),
            ];
            for (k, op) in ops.iter().enumerate() {
                let rep =
                    grad_check_against(op, &[x.clone(), w.clone(), b.clone()],
                        &analytic_gradients(op, &[x.clone(), w.clone(), b.clone()]).unwrap(),
                        1e-5, None, 0)
                    .unwrap();
                assert!(rep.max_rel_err <= 1e-5, "op {k} trial {trial}: err {}", rep.max_rel_err);
            }
        }
    }
}
