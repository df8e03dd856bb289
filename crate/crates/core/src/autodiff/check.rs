//! Central finite-difference gradient oracle.

use ndarray::Array2;

use super::graph::{Graph, GraphError, NodeId};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat row-major index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compare the tape gradient of a scalar function against central
/// differences. `build` receives a fresh graph and the leaf holding
/// `params`, and returns the scalar output node.
///
/// Returns `max |a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(build: F, params: &Array2<f64>, eps: f64) -> Result<f64, GraphError>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
{
    finite_diff_report(build, params, eps, None).map(|r| r.max_rel_error)
}

/// Like [`finite_diff_check`], optionally restricted to a subset of flat
/// coordinates.
pub fn finite_diff_report<F>(
    mut build: F,
    params: &Array2<f64>,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<FiniteDiffReport, GraphError>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(params.clone(), true);
    let out = build(&mut g, leaf)?;
    check_finite(g.scalar(out))?;
    let grads = g.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Array2::zeros(params.dim()));

    let mut eval = |p: Array2<f64>| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let leaf = g.leaf(p, false);
        let out = build(&mut g, leaf)?;
        check_finite(g.scalar(out))
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let ncols = params.ncols();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    for &flat in coords {
        let (r, c) = (flat / ncols, flat % ncols);
        let mut plus = params.clone();
        plus[[r, c]] += eps;
        let mut minus = params.clone();
        minus[[r, c]] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[[r, c]];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report = FiniteDiffReport {
                max_rel_error: rel,
                worst_index: flat,
                analytic: a,
                numeric,
                ..report
            };
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64, GraphError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GraphError::NonFinite {
            what: "finite-difference objective".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_at_three() {
        let p = array![[3.0]];
        let err = finite_diff_check(
            |g, x| {
                let xx = g.matmul(x, x)?;
                g.weighted_sum(xx, array![[1.0]])
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let p = array![[1.0, 2.0]];
        let err = finite_diff_check(|g, _x| Ok(g.constant(array![[7.0]])), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let p = array![[0.0]];
        let err = finite_diff_check(|g, x| g.weighted_log_sum(x, array![[1.0]]), &p, 1e-5).unwrap_err();
        assert!(matches!(err, GraphError::NonFinite { .. }));
    }

    #[test]
    fn every_op_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rand_mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let w = rand_mat(4, 6);
        let other = rand_mat(6, 4);
        let gamma = rand_mat(1, 6);
        let beta = rand_mat(1, 6);
        let weights = rand_mat(4, 6);
        let k = rand_mat(4, 6);
        let v = rand_mat(4, 6);
        let mask = array![
            [1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        ];
        let err = finite_diff_check(
            |g, x| {
                let o = g.constant(other.clone());
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let kk = g.constant(k.clone());
                let vv = g.constant(v.clone());
                let ln = g.layer_norm(x, ga, be)?;
                let act = g.gelu(ln);
                let att = g.causal_attention(act, kk, vv, 2, 2, 2)?;
                let mixed = g.add(att, x)?;
                let sm = g.softmax_rows(mixed);
                let renorm = g.topk_renorm(sm, mask.clone())?;
                let picked = g.gather_rows(renorm, &[3, 0, 2])?;
                let col = g.gather_column(sm, 2, &[3, 0, 2])?;
                let scaled = g.mul_rows(picked, col)?;
                let back = g.scatter_rows(scaled, &[1, 2, 0], 4)?;
                let lin = g.matmul(back, o)?;
                let ce = g.cross_entropy(lin, &[Some(1), None, Some(3), Some(0)])?;
                let ws = g.weighted_sum(x, weights.clone())?;
                let lg = g.weighted_log_sum(sm, mask.clone())?;
                let lg = g.scale(lg, -0.3);
                let t = g.add(ce, ws)?;
                g.add(t, lg)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn embedding_and_bias_gradients() {
        let table = array![[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6]];
        let err = finite_diff_check(
            |g, t| {
                let e = g.embedding(t, &[2, 0, 2, 1])?;
                let b = g.constant(array![[0.5, -0.5]]);
                let y = g.add_row(e, b)?;
                let y = g.gelu(y);
                g.weighted_sum(y, array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 1.0]])
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
