//! Finite-difference verification suites for every differentiable module.
//!
//! Each suite builds a small random instance at 64-bit precision, computes
//! analytic gradients through the tape, and compares them against central
//! finite differences of the same scalar loss. The loss is a fixed random
//! weighted sum of the outputs, which exercises every output element while
//! staying smooth.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::derive_seed;
use crate::injection::{inject_graph, InjectionConfig, InjectionParams};
use crate::model::{film_graph, forward_graph, Mode, ModelConfig, ModelParams};
use crate::nn::linear_init;
use crate::prompts::{clp_graph, fuse_graph, gpd_graph, ClpConfig, ClpParams, FusionParams, GpdConfig, GpdParams};
use crate::tensor::gradcheck::{check, GradReport};
use crate::tensor::{NodeId, Tape};

/// Full-model checks run at a looser tolerance than per-module checks
/// (longer chains accumulate finite-difference truncation).
pub const MODEL_TOLERANCE_FACTOR: f64 = 10.0;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-scale..scale))
}

/// Ordered parameter bundle + loss evaluator for one suite.
struct Suite {
    names: Vec<String>,
    params: Vec<ArrayD<f64>>,
    #[allow(clippy::type_complexity)]
    eval: Box<dyn Fn(&[ArrayD<f64>]) -> (f64, Vec<ArrayD<f64>>)>,
}

impl Suite {
    fn run(&self, tolerance: f64) -> GradReport {
        let (_, analytic) = (self.eval)(&self.params);
        check(&self.names, &self.params, &analytic, tolerance, |p| {
            (self.eval)(p).0
        })
    }
}

/// Helper: run `build` on a tape with `flat` installed as leaves, then
/// return the scalar loss and the leaf gradients in order.
fn eval_with_leaves(
    flat: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> (f64, Vec<ArrayD<f64>>) {
    let mut t: Tape<f64> = Tape::new();
    let ids: Vec<NodeId> = flat.iter().map(|a| t.leaf(a.clone())).collect();
    let loss = build(&mut t, &ids);
    let val = t.scalar(loss);
    let mut grads = t.backward(loss);
    let gs = ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| ArrayD::zeros(t.value(id).raw_dim()))
        })
        .collect();
    (val, gs)
}

/// CLP MLP + GPD generation + cross-attention fusion, composed end to end
/// on a small random instance (h = w = d = 2, c = 4, M = 8, N = 3).
pub fn gradcheck_prompts(seed: u64, tolerance: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let c = 4;
    let dims = (2usize, 2usize, 2usize);
    let clp_cfg = ClpConfig { hidden: 8, m: 8 };
    let gpd_cfg = GpdConfig {
        n: 3,
        base_dims: (2, 2, 2),
    };
    let clp: ClpParams<ArrayD<f64>> = ClpParams::init(&mut rng, &clp_cfg);
    let gpd: GpdParams<ArrayD<f64>> = GpdParams::init(&mut rng, c, &gpd_cfg);
    let fusion: FusionParams<ArrayD<f64>> = FusionParams::init(&mut rng, c, clp_cfg.m);
    let feature = random_array(&mut rng, &[c, dims.0, dims.1, dims.2], 1.0);
    let weights = random_array(&mut rng, &[c, dims.0, dims.1, dims.2], 1.0);
    let delta = 0.17;

    let mut names = Vec::new();
    let mut params = Vec::new();
    clp.for_each("clp", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    gpd.for_each("gpd", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    fusion.for_each("fusion", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });

    let n_clp = {
        let mut k = 0;
        clp.for_each("clp", &mut |_, _| k += 1);
        k
    };
    let n_gpd = {
        let mut k = 0;
        gpd.for_each("gpd", &mut |_, _| k += 1);
        k
    };

    let suite = Suite {
        names,
        params,
        eval: Box::new(move |flat| {
            eval_with_leaves(flat, |t, ids| {
                let mut cursor = ids.iter().copied();
                let clp_ids = clp.map(&mut |_| cursor.next().unwrap());
                let gpd_ids = gpd.map(&mut |_| cursor.next().unwrap());
                let fusion_ids = fusion.map(&mut |_| cursor.next().unwrap());
                let f = t.constant(feature.clone());
                let (pg, _) = gpd_graph(t, f, &gpd_ids);
                let pc = clp_graph(t, delta, &clp_ids);
                let (fused, _) = fuse_graph(t, pg, pc, &fusion_ids);
                t.dot_const(fused, weights.clone())
            })
        }),
    };
    let _ = (n_clp, n_gpd);
    suite.run(tolerance)
}

/// Injection block (reduce conv + MHTA + GFL) on a 2x2x2, 4-channel input.
pub fn gradcheck_injection(seed: u64, tolerance: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let c = 4;
    let cfg = InjectionConfig {
        heads: 2,
        expansion: 2,
    };
    let inj: InjectionParams<ArrayD<f64>> = InjectionParams::init(&mut rng, c, &cfg);
    let feature = random_array(&mut rng, &[c, 2, 2, 2], 1.0);
    let prompt = random_array(&mut rng, &[c, 2, 2, 2], 1.0);
    let weights = random_array(&mut rng, &[c, 2, 2, 2], 1.0);

    let mut names = Vec::new();
    let mut params = Vec::new();
    inj.for_each("injection", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    let suite = Suite {
        names,
        params,
        eval: Box::new(move |flat| {
            eval_with_leaves(flat, |t, ids| {
                let mut cursor = ids.iter().copied();
                let inj_ids = inj.map(&mut |_| cursor.next().unwrap());
                let f = t.constant(feature.clone());
                let p = t.constant(prompt.clone());
                let y = inject_graph(t, f, p, &inj_ids, cfg.heads);
                t.dot_const(y, weights.clone())
            })
        }),
    };
    suite.run(tolerance)
}

/// Per-channel affine conditioning baseline.
pub fn gradcheck_film(seed: u64, tolerance: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let c = 4;
    let hidden = 4;
    let fc1 = linear_init::<f64>(&mut rng, hidden, 1);
    let fc2 = linear_init::<f64>(&mut rng, 2 * c, hidden);
    let feature = random_array(&mut rng, &[c, 2, 2, 2], 1.0);
    let weights = random_array(&mut rng, &[c, 2, 2, 2], 1.0);
    let delta = 0.19;

    let mut names = Vec::new();
    let mut params = Vec::new();
    fc1.for_each("film.fc1", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    fc2.for_each("film.fc2", &mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    let suite = Suite {
        names,
        params,
        eval: Box::new(move |flat| {
            eval_with_leaves(flat, |t, ids| {
                let mut cursor = ids.iter().copied();
                let fc1_ids = fc1.map(&mut |_| cursor.next().unwrap());
                let fc2_ids = fc2.map(&mut |_| cursor.next().unwrap());
                let f = t.constant(feature.clone());
                let y = film_graph(t, f, delta, &fc1_ids, &fc2_ids);
                t.dot_const(y, weights.clone())
            })
        }),
    };
    suite.run(tolerance)
}

/// Tiny full-model configuration used by the end-to-end check:
/// one level, two base channels, 8x8x4 input.
pub fn tiny_model_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        levels: 1,
        base_channels: 2,
        mode,
        groups: 2,
        clp: ClpConfig { hidden: 4, m: 4 },
        gpd: GpdConfig {
            n: 3,
            base_dims: (2, 2, 2),
        },
        injection: InjectionConfig {
            heads: 2,
            expansion: 2,
        },
        film_hidden: 4,
        clamp_nonneg_inference: false,
    }
}

/// End-to-end check of the full tiny model in dual mode.
pub fn gradcheck_model(seed: u64, tolerance: f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let cfg = tiny_model_config(Mode::Dual);
    let model_params: ModelParams<ArrayD<f64>> =
        ModelParams::init(&cfg, derive_seed(seed, &[5])).unwrap();
    let input = random_array(&mut rng, &[1, 8, 8, 4], 1.0).mapv(f64::abs);
    let weights = random_array(&mut rng, &[1, 8, 8, 4], 1.0);
    let delta = 0.16;

    let mut names = Vec::new();
    let mut params = Vec::new();
    model_params.for_each(&mut |n, a| {
        names.push(n);
        params.push(a.clone());
    });
    let suite = Suite {
        names,
        params,
        eval: Box::new(move |flat| {
            eval_with_leaves(flat, |t, ids| {
                let mut cursor = ids.iter().copied();
                let p_ids = model_params.map(&mut |_| cursor.next().unwrap());
                let x = t.constant(input.clone());
                let y = forward_graph(t, x, &p_ids, &cfg, Some(delta));
                t.dot_const(y, weights.clone())
            })
        }),
    };
    suite.run(tolerance)
}

/// All verification suites with their names. The full-model suite runs at
/// `tolerance * MODEL_TOLERANCE_FACTOR`.
pub fn gradcheck_all(seed: u64, tolerance: f64) -> Vec<(String, GradReport)> {
    vec![
        ("prompts".to_string(), gradcheck_prompts(seed, tolerance)),
        ("injection".to_string(), gradcheck_injection(seed, tolerance)),
        ("film".to_string(), gradcheck_film(seed, tolerance)),
        (
            "model".to_string(),
            gradcheck_model(seed, tolerance * MODEL_TOLERANCE_FACTOR),
        ),
    ]
}
