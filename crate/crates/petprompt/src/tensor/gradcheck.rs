//! Finite-difference verification of analytic gradients.
//!
//! The numeric side only ever calls a black-box loss closure, so it stays
//! independent of the tape implementation it is checking. Comparisons run at
//! 64-bit precision with central differences.

use ndarray::ArrayD;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default acceptance threshold on the max relative error per group.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Elements where both gradients are below this magnitude auto-pass
/// (finite differences cannot resolve them).
const ABS_FLOOR: f64 = 1e-7;

/// Verification result for one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Full gradient-check report over several parameter groups.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn failing(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| !g.pass).collect()
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Plain-text table, one line per group.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let width = self
            .groups
            .iter()
            .map(|g| g.name.len())
            .max()
            .unwrap_or(8)
            .max(8);
        out.push_str(&format!(
            "{:width$}  {:>8}  {:>12}  result\n",
            "group",
            "elems",
            "max rel err",
            width = width
        ));
        for g in &self.groups {
            out.push_str(&format!(
                "{:width$}  {:>8}  {:>12.3e}  {}\n",
                g.name,
                g.elements,
                g.max_rel_err,
                if g.pass { "ok" } else { "FAIL" },
                width = width
            ));
        }
        out
    }
}

/// Relative error with an absolute floor for unresolvable magnitudes.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// Central finite differences of `loss` w.r.t. every element of `params`.
///
/// `loss` receives the full parameter set each call; only one element is
/// perturbed at a time.
pub fn finite_diff<F>(params: &[ArrayD<f64>], step: f64, mut loss: F) -> Vec<ArrayD<f64>>
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for gi in 0..params.len() {
        let mut g = ArrayD::<f64>::zeros(params[gi].raw_dim());
        for idx in 0..params[gi].len() {
            let orig = params[gi].as_slice().unwrap()[idx];
            work[gi].as_slice_mut().unwrap()[idx] = orig + step;
            let up = loss(&work);
            work[gi].as_slice_mut().unwrap()[idx] = orig - step;
            let down = loss(&work);
            work[gi].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Compare analytic against numeric gradients group by group.
pub fn compare(
    names: &[String],
    analytic: &[ArrayD<f64>],
    numeric: &[ArrayD<f64>],
    tolerance: f64,
) -> GradReport {
    assert_eq!(names.len(), analytic.len());
    assert_eq!(names.len(), numeric.len());
    let groups = names
        .iter()
        .zip(analytic.iter().zip(numeric.iter()))
        .map(|(name, (a, n))| {
            assert_eq!(a.shape(), n.shape(), "group {name} shape");
            let max_rel_err = a
                .iter()
                .zip(n.iter())
                .map(|(&av, &nv)| rel_err(av, nv))
                .fold(0.0, f64::max);
            GroupReport {
                name: name.clone(),
                elements: a.len(),
                max_rel_err,
                pass: max_rel_err <= tolerance,
            }
        })
        .collect();
    GradReport { tolerance, groups }
}

/// Run a full check: analytic gradients from the caller, numeric from
/// central differences of `loss`.
pub fn check<F>(
    names: &[String],
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    tolerance: f64,
    loss: F,
) -> GradReport
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let numeric = finite_diff(params, FD_STEP, loss);
    compare(names, analytic, &numeric, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::arr1;

    #[test]
    fn quadratic_loss_grads_match() {
        // loss = sum(x^2) -> grad = 2x
        let params = vec![arr1(&[0.5, -1.25, 2.0]).into_dyn()];
        let analytic = vec![params[0].mapv(|v| 2.0 * v)];
        let report = check(
            &["x".to_string()],
            &params,
            &analytic,
            1e-7,
            |p: &[ArrayD<f64>]| p[0].iter().map(|v| v * v).sum(),
        );
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn corrupted_gradient_is_flagged_by_name() {
        let params = vec![
            arr1(&[1.0, 2.0]).into_dyn(),
            arr1(&[3.0]).into_dyn(),
        ];
        let mut analytic = vec![params[0].mapv(|v| 2.0 * v), params[1].mapv(|v| 2.0 * v)];
        analytic[1][[0]] += 1.0; // deliberately corrupt the second group
        let report = check(
            &["good".to_string(), "corrupt".to_string()],
            &params,
            &analytic,
            1e-6,
            |p: &[ArrayD<f64>]| p.iter().flat_map(|a| a.iter()).map(|v| v * v).sum(),
        );
        assert!(!report.passed());
        let failing = report.failing();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].name, "corrupt");
    }

    #[test]
    fn unattainable_tolerance_fails() {
        let params = vec![arr1(&[0.7]).into_dyn()];
        let analytic = vec![params[0].mapv(|v| (v as f64).cos())];
        let report = check(
            &["x".to_string()],
            &params,
            &analytic,
            1e-14,
            |p: &[ArrayD<f64>]| p[0][[0]].sin(),
        );
        assert!(!report.passed());
    }

    #[test]
    fn every_op_passes_fd() {
        use crate::tensor::Conv3dSpec;
        use ndarray::IxDyn;

        // Pseudorandom but fixed inputs, away from relu/abs kinks.
        fn fill(shape: &[usize], seed: u64) -> ArrayD<f64> {
            let mut s = seed;
            ArrayD::from_shape_fn(IxDyn(shape), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0 + 0.013
            })
        }

        struct Case {
            name: &'static str,
            shapes: Vec<Vec<usize>>,
            run: Box<dyn Fn(&mut Tape<f64>, &[crate::tensor::NodeId]) -> crate::tensor::NodeId>,
        }
        let cases = vec![
            Case {
                name: "conv3d_s1",
                shapes: vec![vec![2, 4, 3, 4], vec![3, 2, 3, 3, 3], vec![3]],
                run: Box::new(|t, p| t.conv3d(p[0], p[1], p[2], Conv3dSpec::SAME3)),
            },
            Case {
                name: "conv3d_s2",
                shapes: vec![vec![2, 4, 4, 4], vec![3, 2, 3, 3, 3], vec![3]],
                run: Box::new(|t, p| t.conv3d(p[0], p[1], p[2], Conv3dSpec::DOWN3)),
            },
            Case {
                name: "conv1x1",
                shapes: vec![vec![3, 2, 2, 3], vec![4, 3], vec![4]],
                run: Box::new(|t, p| t.conv1x1(p[0], p[1], p[2])),
            },
            Case {
                name: "dwconv3",
                shapes: vec![vec![2, 3, 4, 3], vec![2, 3, 3, 3], vec![2]],
                run: Box::new(|t, p| t.dwconv3(p[0], p[1], p[2])),
            },
            Case {
                name: "layernorm",
                shapes: vec![vec![4, 2, 2, 2], vec![4], vec![4]],
                run: Box::new(|t, p| t.layernorm_chan(p[0], p[1], p[2])),
            },
            Case {
                name: "groupnorm",
                shapes: vec![vec![4, 2, 2, 2], vec![4], vec![4]],
                run: Box::new(|t, p| t.groupnorm(p[0], p[1], p[2], 2)),
            },
            Case {
                name: "resize",
                shapes: vec![vec![2, 3, 3, 3]],
                run: Box::new(|t, p| t.resize_trilinear(p[0], (5, 2, 4))),
            },
            Case {
                name: "gap_broadcast",
                shapes: vec![vec![3, 2, 3, 2]],
                run: Box::new(|t, p| {
                    let g = t.gap(p[0]);
                    t.broadcast_spatial(g, (2, 2, 2))
                }),
            },
            Case {
                name: "linear_silu",
                shapes: vec![vec![3], vec![5, 3], vec![5]],
                run: Box::new(|t, p| {
                    let y = t.linear(p[0], p[1], p[2]);
                    t.silu(y)
                }),
            },
            Case {
                name: "sigmoid_mul",
                shapes: vec![vec![2, 2, 2, 2], vec![2, 2, 2, 2]],
                run: Box::new(|t, p| {
                    let s = t.sigmoid(p[0]);
                    t.mul(s, p[1])
                }),
            },
            Case {
                name: "lincomb_softmax1d",
                shapes: vec![vec![2, 2, 2, 2], vec![2, 2, 2, 2], vec![2, 2, 2, 2], vec![3]],
                run: Box::new(|t, p| {
                    let w = t.softmax_1d(p[3]);
                    t.lincomb(&[p[0], p[1], p[2]], w)
                }),
            },
            Case {
                name: "attention_nt",
                shapes: vec![vec![3, 4], vec![3, 4], vec![3, 4], vec![2]],
                run: Box::new(|t, p| {
                    let s = t.matmul_nt(p[0], p[1]);
                    let s = t.mul_scalar_elem(s, p[3], 1);
                    let a = t.softmax_rows(s);
                    t.matmul(a, p[2])
                }),
            },
            Case {
                name: "affine_chan",
                shapes: vec![vec![3, 2, 2, 2], vec![3], vec![3]],
                run: Box::new(|t, p| t.affine_chan(p[0], p[1], p[2])),
            },
            Case {
                name: "bias_relu_sub",
                shapes: vec![vec![3, 2, 2, 2], vec![3], vec![3, 2, 2, 2]],
                run: Box::new(|t, p| {
                    let y = t.add_bias_chan(p[0], p[1]);
                    let y = t.relu(y);
                    t.sub(y, p[2])
                }),
            },
        ];

        for (ci, case) in cases.iter().enumerate() {
            let params: Vec<ArrayD<f64>> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| fill(s, (ci * 13 + i + 1) as u64))
                .collect();
            let run = &case.run;
            let eval = |p: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
                let mut t: Tape<f64> = Tape::new();
                let ids: Vec<_> = p.iter().map(|a| t.leaf(a.clone())).collect();
                let out = run(&mut t, &ids);
                let w = fill(t.value(out).shape(), 999 + ci as u64);
                let loss = t.dot_const(out, w);
                let v = t.scalar(loss);
                let mut g = t.backward(loss);
                let grads = ids
                    .iter()
                    .map(|&id| {
                        g.take(id)
                            .unwrap_or_else(|| ArrayD::zeros(t.value(id).raw_dim()))
                    })
                    .collect();
                (v, grads)
            };
            let (_, analytic) = eval(&params);
            let names: Vec<String> = (0..params.len())
                .map(|i| format!("{}::p{}", case.name, i))
                .collect();
            let report = check(&names, &params, &analytic, 5e-6, |p| eval(p).0);
            assert!(report.passed(), "op {} failed FD:\n{}", case.name, report.table());
        }
    }

    #[test]
    fn tape_matmul_softmax_chain_passes_fd() {
        let names = vec!["a".to_string(), "b".to_string()];
        let params = vec![
            ndarray::arr2(&[[0.3, -0.4], [0.9, 0.2]]).into_dyn(),
            ndarray::arr2(&[[1.1, 0.5], [-0.3, 0.8]]).into_dyn(),
        ];
        let weights = ndarray::arr2(&[[0.21, -0.7], [0.55, 0.13]]).into_dyn();
        let run = |p: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
            let mut t: Tape<f64> = Tape::new();
            let a = t.leaf(p[0].clone());
            let b = t.leaf(p[1].clone());
            let m = t.matmul(a, b);
            let s = t.softmax_rows(m);
            let loss = t.dot_const(s, weights.clone());
            let val = t.scalar(loss);
            let mut g = t.backward(loss);
            (val, vec![g.take(a).unwrap(), g.take(b).unwrap()])
        };
        let (_, analytic) = run(&params);
        let report = check(&names, &params, &analytic, 1e-7, |p| run(p).0);
        assert!(report.passed(), "{}", report.table());
    }
}
