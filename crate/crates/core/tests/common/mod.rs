#![allow(dead_code)]

use mmvenc::{Graph, Real, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Uniform values bounded away from zero, for kinked activations.
pub fn rand_away_from_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..2.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradStats {
    pub checked: usize,
    pub within: usize,
    pub max_rel: f64,
}

impl GradStats {
    pub fn merge(&mut self, o: GradStats) {
        self.checked += o.checked;
        self.within += o.within;
        self.max_rel = self.max_rel.max(o.max_rel);
    }

    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

pub struct Check {
    pub h: f64,
    /// Five-point central stencil instead of the two-point one.
    pub five_point: bool,
    pub floor: f64,
    pub tol: f64,
}

/// Step 3e-2 keeps f32 output rounding well below the tolerance; the
/// five-point stencil keeps truncation error at O(h⁴).
pub const F32_CHECK: Check = Check {
    h: 1e-2,
    five_point: true,
    floor: 1e-2,
    tol: 1e-3,
};

/// Ops that are linear in each input separately, where any step is exact up
/// to rounding, so a wider one is used.
pub const MULTILINEAR_OPS: &[&str] = &[
    "matmul",
    "bmm",
    "bmm_trans_b",
    "add",
    "mul",
    "add_row",
    "scale",
    "conv1d",
    "conv1d_batched_stride2",
    "transpose",
    "reshape",
    "concat_rows",
    "gather_rows",
    "split_heads",
    "merge_heads",
    "sum",
    "mean",
];

pub const F32_MULTILINEAR: Check = Check {
    h: 1e-1,
    five_point: false,
    floor: 1e-2,
    tol: 1e-3,
};

/// The coverage check: h = 1e-3 with the f32 tolerance.
pub const F32_COVERAGE: Check = Check {
    h: 1e-3,
    five_point: false,
    floor: 1e-2,
    tol: 1e-3,
};

pub const F64_CHECK: Check = Check {
    h: 1e-5,
    five_point: false,
    floor: 1e-3,
    tol: 1e-6,
};

/// Compares the analytic gradient of `Σ w ⊙ build(inputs)` (fixed random
/// weights `w`) against central differences for every input coordinate.
/// The differenced objective is accumulated in f64.
pub fn gradcheck<T: Real>(
    inputs: &[Tensor<T>],
    build: &dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    check: &Check,
    rng: &mut ChaCha8Rng,
) -> GradStats {
    let objective = |inputs: &[Tensor<T>], weights: Option<&[f64]>| -> (Vec<f64>, f64) {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let vals: Vec<f64> = g.value(out).values().iter().map(|v| v.to64()).collect();
        let f = weights.map_or(0.0, |w| vals.iter().zip(w).map(|(a, b)| a * b).sum());
        (vals, f)
    };
    let (out, _) = objective(inputs, None);
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out_var = build(&mut g, &vars).unwrap();
    let shape = g.shape(out_var).to_vec();
    let w = g.constant(Tensor::from_f64(shape, &weights).unwrap());
    let prod = g.mul(out_var, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut stats = GradStats::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(*v)
            .map(|gr| gr.iter().map(|x| x.to64()).collect())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].values()[j].to64();
            let diff = |step: f64| {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].values_mut()[j] = T::of(x + step);
                minus[i].values_mut()[j] = T::of(x - step);
                let span = plus[i].values()[j].to64() - minus[i].values()[j].to64();
                (objective(&plus, Some(&weights)).1 - objective(&minus, Some(&weights)).1) / span
            };
            let fd = if check.five_point {
                (4.0 * diff(check.h) - diff(2.0 * check.h)) / 3.0
            } else {
                diff(check.h)
            };
            let e = rel_err(analytic[j], fd, check.floor);
            stats.checked += 1;
            stats.within += usize::from(e < check.tol);
            stats.max_rel = stats.max_rel.max(e);
        }
    }
    stats
}

pub type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

pub const OP_NAMES: &[&str] = &[
    "matmul",
    "bmm",
    "bmm_trans_b",
    "add",
    "mul",
    "add_row",
    "scale",
    "tanh",
    "gelu",
    "relu",
    "softmax",
    "layer_norm",
    "conv1d",
    "conv1d_batched_stride2",
    "transpose",
    "reshape",
    "concat_rows",
    "gather_rows",
    "split_heads",
    "merge_heads",
    "sum",
    "mean",
    "pearson_loss",
    "attention",
];

/// Random inputs and graph builder for the named op.
pub fn op_case<T: Real>(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<T>>, Build<T>) {
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let n = rng.gen_range(1..4);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor::<T>(rng, s, 1.0);
    match name {
        "matmul" => (
            vec![r(rng, &[m, k]), r(rng, &[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        "bmm" => (
            vec![r(rng, &[2, m, k]), r(rng, &[2, k, n])],
            Box::new(|g, v| g.bmm(v[0], v[1], false)),
        ),
        "bmm_trans_b" => (
            vec![r(rng, &[2, m, k]), r(rng, &[2, n, k])],
            Box::new(|g, v| g.bmm(v[0], v[1], true)),
        ),
        "add" => (
            vec![r(rng, &[m, n]), r(rng, &[m, n])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        "mul" => (
            vec![r(rng, &[m, n]), r(rng, &[m, n])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        "add_row" => (
            vec![r(rng, &[m, n]), r(rng, &[n])],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        "scale" => (
            vec![r(rng, &[m, n])],
            Box::new(|g, v| g.scale(v[0], T::of(-1.7))),
        ),
        "tanh" => (vec![r(rng, &[m, n])], Box::new(|g, v| g.tanh(v[0]))),
        "gelu" => (
            vec![rand_tensor(rng, &[m, n], 3.0)],
            Box::new(|g, v| g.gelu(v[0])),
        ),
        "relu" => (
            vec![rand_away_from_zero(rng, &[m, n])],
            Box::new(|g, v| g.relu(v[0])),
        ),
        "softmax" => (
            vec![rand_tensor(rng, &[m, n + 1], 2.0)],
            Box::new(|g, v| g.softmax(v[0])),
        ),
        "layer_norm" => (
            vec![
                rand_tensor(rng, &[m, n + 2], 2.0),
                r(rng, &[n + 2]),
                r(rng, &[n + 2]),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        "conv1d" => {
            let len = rng.gen_range(3..7);
            let kk = rng.gen_range(1..=len);
            (
                vec![r(rng, &[2, len]), r(rng, &[3, 2, kk]), r(rng, &[3])],
                Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 1)),
            )
        }
        "conv1d_batched_stride2" => (
            vec![r(rng, &[2, 3, 7]), r(rng, &[2, 3, 3]), r(rng, &[2])],
            Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2)),
        ),
        "transpose" => (
            vec![r(rng, &[2, m, n])],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        "reshape" => (
            vec![r(rng, &[m, n * 2])],
            Box::new(move |g, v| g.reshape(v[0], [n, m * 2])),
        ),
        "concat_rows" => (
            vec![r(rng, &[m, n]), r(rng, &[k, n])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        "gather_rows" => {
            let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..m)).collect();
            (
                vec![r(rng, &[m, n])],
                Box::new(move |g, v| g.gather_rows(v[0], &idx)),
            )
        }
        "split_heads" => (
            vec![r(rng, &[2 * 3, 3 * 4])],
            Box::new(|g, v| {
                let q = g.split_heads(v[0], 1, 2, 3, 2)?;
                Ok(q)
            }),
        ),
        "merge_heads" => (
            vec![r(rng, &[2 * 2, 3, 2])],
            Box::new(|g, v| g.merge_heads(v[0], 2, 3, 2)),
        ),
        "sum" => (vec![r(rng, &[m, n])], Box::new(|g, v| g.sum(v[0]))),
        "mean" => (vec![r(rng, &[m, n])], Box::new(|g, v| g.mean(v[0]))),
        "pearson_loss" => {
            let t = rng.gen_range(3..6);
            let target = r(rng, &[t, n]);
            (
                vec![r(rng, &[t, n])],
                Box::new(move |g, v| g.pearson_loss(v[0], &target)),
            )
        }
        "attention" => (
            vec![r(rng, &[2 * 3, 4]), r(rng, &[4, 12]), r(rng, &[4])],
            Box::new(|g, v| {
                let x = g.layer_norm(v[0], v[2], v[2], 1e-5)?;
                let qkv = g.matmul(x, v[1])?;
                let q = g.split_heads(qkv, 0, 2, 3, 2)?;
                let k = g.split_heads(qkv, 1, 2, 3, 2)?;
                let val = g.split_heads(qkv, 2, 2, 3, 2)?;
                let s = g.bmm(q, k, true)?;
                let s = g.scale(s, T::of(1.0 / 2f64.sqrt()))?;
                let a = g.softmax(s)?;
                let o = g.bmm(a, val, false)?;
                let o = g.merge_heads(o, 2, 3, 2)?;
                let o = g.gelu(o)?;
                g.add(o, v[0])
            }),
        ),
        other => panic!("no gradient case for {other}"),
    }
}

pub mod model {
    use super::*;
    use mmvenc::encoder::{bind, forward, predict, ModelConfig, ModelParams, Stimulus};
    use mmvenc::objective;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    pub struct Problem {
        pub cfg: ModelConfig,
        pub params: ModelParams<f64>,
        pub images: Vec<Vec<f64>>,
        pub tokens: Vec<Vec<usize>>,
        pub target: Tensor<f64>,
    }

    impl Problem {
        /// Random batch and a generic parameter point (every tensor,
        /// including zero-initialised ones, jittered).
        pub fn new(cfg: ModelConfig, batch: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ModelParams::<f64>::init(&cfg, seed).unwrap();
            let jitter = Normal::new(0.0, 0.05).unwrap();
            for t in params.tensors_mut() {
                for v in t.values_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
            let images = (0..batch)
                .map(|_| (0..cfg.image_numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let tokens = (0..batch)
                .map(|_| (0..cfg.text_length).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
                .collect();
            let t: Vec<f64> = (0..batch * cfg.voxel_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = Tensor::from_f64([batch, cfg.voxel_count], &t).unwrap();
            Self {
                cfg,
                params,
                images,
                tokens,
                target,
            }
        }

        fn batch(&self) -> Vec<Stimulus<'_, f64>> {
            self.images
                .iter()
                .zip(&self.tokens)
                .map(|(i, t)| Stimulus { image: i, tokens: t })
                .collect()
        }

        pub fn loss(&self, params: &ModelParams<f64>) -> f64 {
            let p = predict(&self.cfg, params, &self.batch()).unwrap();
            objective::loss(&self.target, &p).unwrap()
        }

        /// Analytic gradient of the Pearson loss for every parameter tensor.
        pub fn gradients(&self) -> Vec<(String, Vec<f64>)> {
            let mut g = Graph::<f64>::new();
            let bound = bind(&mut g, &self.params, true);
            let f = forward(&mut g, &self.cfg, &bound, &self.batch()).unwrap();
            let loss = g.pearson_loss(f.predictions, &self.target).unwrap();
            g.backward(loss).unwrap();
            self.params
                .entries()
                .into_iter()
                .zip(&bound.all)
                .map(|((name, _, t), &v)| {
                    let grad = g.grad(v).map_or_else(|| vec![0.0; t.numel()], |x| x.to_vec());
                    (name, grad)
                })
                .collect()
        }

        /// Central differences on up to `per_group` random coordinates of
        /// every parameter tensor. Returns overall and per-group stats.
        pub fn check(&self, per_group: usize, check: &Check, seed: u64) -> (GradStats, Vec<(String, GradStats)>) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let analytic = self.gradients();
            let mut total = GradStats::default();
            let mut groups = Vec::new();
            for (gi, (name, grad)) in analytic.iter().enumerate() {
                let mut s = GradStats::default();
                let n = grad.len();
                let coords: Vec<usize> = if n <= per_group {
                    (0..n).collect()
                } else {
                    (0..per_group).map(|_| rng.gen_range(0..n)).collect()
                };
                for j in coords {
                    let eval = |step: f64| {
                        let mut p = self.params.clone();
                        p.tensors_mut()[gi].values_mut()[j] += step;
                        self.loss(&p)
                    };
                    let fd = (eval(check.h) - eval(-check.h)) / (2.0 * check.h);
                    let e = rel_err(grad[j], fd, check.floor);
                    s.checked += 1;
                    s.within += usize::from(e < check.tol);
                    s.max_rel = s.max_rel.max(e);
                }
                total.merge(s);
                groups.push((name.clone(), s));
            }
            (total, groups)
        }
    }

    /// Desk preset shrunk to a sequence of at most 30 tokens and 50 voxels.
    pub fn desk_gradcheck_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.text_length = 8;
        cfg.voxel_count = 50;
        cfg.vocab_size = 32;
        cfg
    }
}
