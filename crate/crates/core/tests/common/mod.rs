//! Independent reference implementations and the property suites shared
//! by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::time::Instant;

use agpad::attention::{
    cam_attention_map, cam_forward, cam_on, fuse_hierarchical_on, fuse_parallel_on, fuse_sequential_on,
    pam_attention_map, pam_forward, pam_on, CamParams, CamVars, ConvParams, ConvVars, PamParams, PamVars,
    ParallelVars, PostConvVars, SoftmaxAxis, HierarchicalVars,
};
use agpad::data::synth::{render_sample, Split, SynthConfig};
use agpad::data::Dataset;
use agpad::gradcam::grad_cam_from;
use agpad::rng::{rng_from, Rng};
use agpad::tensor::{grad_check, GradCheck, Scalar, Tape, Tensor, Var};
use agpad::Result;
use rand::Rng as _;

/// Result of one property run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// Loop oracles
// ---------------------------------------------------------------------------

pub fn matmul_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new([m, n], out).unwrap()
}

pub fn conv2d_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xo * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * cin + c) * kh + i) * kw + j];
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    Tensor::new([cout, oh, ow], out).unwrap()
}

pub fn maxpool_ref(x: &Tensor<f64>, window: usize, stride: usize) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..window {
                    for j in 0..window {
                        m = m.max(x.data()[(ch * h + y * stride + i) * w + xo * stride + j]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new([c, oh, ow], out).unwrap()
}

/// Column softmax without max subtraction.
pub fn softmax_cols_ref(x: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let total: f64 = (0..m).map(|i| x.data()[i * n + j].exp()).sum();
        for i in 0..m {
            out[i * n + j] = x.data()[i * n + j].exp() / total;
        }
    }
    Tensor::new([m, n], out).unwrap()
}

pub fn column_sums<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    (0..n).map(|j| (0..m).map(|i| x.data()[i * n + j].as_f64()).sum()).collect()
}

// ---------------------------------------------------------------------------
// Metric oracles: every distinct score (plus +inf) tried as a threshold
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPoint {
    pub threshold: f64,
    pub fdr: f64,
    pub tdr: f64,
}

fn rate_at_or_above(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

pub fn candidate_thresholds(live: &[f64], pa: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = live.iter().chain(pa).copied().collect();
    t.push(f64::INFINITY);
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

pub fn roc_ref(live: &[f64], pa: &[f64]) -> Vec<RefPoint> {
    candidate_thresholds(live, pa)
        .into_iter()
        .map(|t| RefPoint {
            threshold: t,
            fdr: rate_at_or_above(live, t),
            tdr: rate_at_or_above(pa, t),
        })
        .collect()
}

/// Largest TDR with FDR within the target; ties go to the highest threshold.
pub fn tdr_at_fdr_ref(live: &[f64], pa: &[f64], target: f64) -> (f64, f64) {
    let mut best: Option<RefPoint> = None;
    for p in roc_ref(live, pa) {
        if p.fdr > target {
            continue;
        }
        best = match best {
            None => Some(p),
            Some(b) if p.tdr > b.tdr || (p.tdr == b.tdr && p.threshold > b.threshold) => Some(p),
            keep => keep,
        };
    }
    let b = best.expect("+inf always qualifies");
    (b.tdr, b.threshold)
}

pub fn apcer_bpcer_ref(live: &[f64], pa: &[f64], t: f64) -> (f64, f64) {
    let apcer = pa.iter().filter(|&&s| s < t).count() as f64 / pa.len() as f64;
    let bpcer = live.iter().filter(|&&s| s >= t).count() as f64 / live.len() as f64;
    (apcer, bpcer)
}

/// Score lists with many ties (a coarse grid) mixed with continuous values.
pub fn random_scores(rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let draw = |n: usize, shift: f64, rng: &mut Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0..=10) as f64 / 10.0
                } else {
                    (rng.random_range(0.0..1.0) + shift).clamp(0.0, 1.0)
                }
            })
            .collect()
    };
    let n_live = rng.random_range(1..40);
    let n_pa = rng.random_range(1..40);
    let shift = rng.random_range(0.0..0.5);
    let live = draw(n_live, 0.0, rng);
    let pa = draw(n_pa, shift, rng);
    (live, pa)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// In-memory split of the synthetic corpus.
pub fn synth_dataset(cfg: &SynthConfig, split: Split) -> Dataset {
    let (live, pa) = cfg.counts(split);
    let mut ds = Dataset::default();
    for i in 0..live + pa {
        let (img, kind) = render_sample(cfg, split, i);
        ds.images.push(img);
        ds.labels.push(kind.label().class_index());
        ds.paths.push(format!("{}/{i}", split.name()));
    }
    ds
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

fn weighted_sum(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = t.constant(w.clone());
    let m = t.mul(y, c)?;
    t.sum(m)
}

struct Suite {
    cfg: GradCheck,
    rng: Rng,
    worst: Vec<(&'static str, f64)>,
}

impl Suite {
    /// Checks `sum(w ⊙ body(inputs))` for a fixed random `w`, so that ops
    /// whose plain sum is constant (softmax) still get a real gradient.
    fn check<F>(&mut self, name: &'static str, shapes: &[&[usize]], body: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(s, &mut self.rng)).collect();
        self.check_inputs(name, inputs, body);
    }

    fn check_inputs<F>(&mut self, name: &'static str, inputs: Vec<Tensor<f64>>, body: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = body(&mut t, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
            t.shape(y).to_vec()
        };
        let w = uniform(&out_shape, &mut self.rng);
        let report = grad_check(|t, v| {
                let y = body(t, v)?;
                weighted_sum(t, y, &w)
            }, &inputs, &self.cfg)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        match self.worst.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(report.max_rel_error),
            None => self.worst.push((name, report.max_rel_error)),
        }
    }
}

fn conv(v: &[Var], at: usize) -> ConvVars {
    ConvVars {
        weight: v[at],
        bias: v[at + 1],
    }
}

fn pam_shapes(c: usize, r: usize) -> Vec<Vec<usize>> {
    let q = c / r;
    vec![vec![q, c, 1, 1], vec![q], vec![q, c, 1, 1], vec![q], vec![c, c, 1, 1], vec![c], vec![1]]
}

fn pam_vars(v: &[Var], axis: SoftmaxAxis) -> PamVars {
    PamVars {
        conv_b: conv(v, 0),
        conv_c: conv(v, 2),
        conv_d: conv(v, 4),
        alpha: v[6],
        axis,
    }
}

fn post_shapes(c: usize) -> Vec<Vec<usize>> {
    vec![vec![c, c, 3, 3], vec![c], vec![c, c, 3, 3], vec![c]]
}

fn post_vars(v: &[Var]) -> PostConvVars {
    PostConvVars {
        conv1: conv(v, 0),
        conv2: conv(v, 2),
    }
}

/// PAM (7) + beta (1) + two post-conv stacks (4 each).
fn parallel_shapes(c: usize, r: usize) -> Vec<Vec<usize>> {
    let mut s = pam_shapes(c, r);
    s.push(vec![1]);
    s.extend(post_shapes(c));
    s.extend(post_shapes(c));
    s
}

const PARALLEL_LEN: usize = 16;

fn parallel_vars(v: &[Var]) -> ParallelVars {
    ParallelVars {
        pam: pam_vars(&v[0..7], SoftmaxAxis::Columns),
        cam: CamVars {
            beta: v[7],
            axis: SoftmaxAxis::Columns,
        },
        post_pam: post_vars(&v[8..12]),
        post_cam: post_vars(&v[12..16]),
    }
}

fn inputs_for(shapes: &[Vec<usize>], rng: &mut Rng) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| uniform(s, rng)).collect()
}

/// Worst relative error per differentiable op over `seeds` random draws.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut suite = Suite {
        cfg: GradCheck::default(),
        rng: rng_from(0),
        worst: Vec::new(),
    };
    for seed in 0..seeds {
        suite.rng = rng_from(1000 + seed);
        suite.cfg = GradCheck {
            eps: 1e-6,
            max_probes: Some(48),
            seed,
        };
        suite.check("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
        suite.check("add", &[&[2, 3, 3], &[2, 3, 3]], |t, v| t.add(v[0], v[1]));
        suite.check("mul", &[&[2, 3, 3], &[2, 3, 3]], |t, v| t.mul(v[0], v[1]));
        suite.check("relu", &[&[2, 3, 3]], |t, v| t.relu(v[0]));
        suite.check("reshape", &[&[2, 3, 3]], |t, v| t.reshape(v[0], [6, 3]));
        suite.check("transpose", &[&[3, 5]], |t, v| t.transpose(v[0]));
        suite.check("softmax_cols", &[&[4, 3]], |t, v| t.softmax_cols(v[0]));
        suite.check("conv2d (3x3, pad 1)", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1)
        });
        suite.check("conv2d (3x3, stride 2)", &[&[2, 6, 6], &[2, 2, 3, 3], &[2]], |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 0)
        });
        suite.check("maxpool2d (2x2)", &[&[2, 4, 4]], |t, v| t.maxpool2d(v[0], 2, 2));
        suite.check("maxpool2d (4x4)", &[&[1, 8, 8]], |t, v| t.maxpool2d(v[0], 4, 4));
        suite.check("global_avg_pool", &[&[3, 4, 4]], |t, v| t.global_avg_pool(v[0]));
        suite.check("dense", &[&[5], &[2, 5], &[2]], |t, v| t.dense(v[0], v[1], v[2]));
        suite.check("scale_by_scalar_param", &[&[2, 3], &[1]], |t, v| t.scale_by_scalar_param(v[0], v[1]));
        suite.check("scale", &[&[2, 3]], |t, v| t.scale(v[0], -1.7));
        suite.check("sum", &[&[2, 3]], |t, v| t.sum(v[0]));
        suite.check("select", &[&[6]], |t, v| t.select(v[0], 4));
        suite.check("concat", &[&[1, 2, 2], &[2, 2, 2]], |t, v| t.concat(&[v[0], v[1]]));
        for label in [0, 1] {
            suite.check("softmax_cross_entropy", &[&[2]], move |t, v| t.softmax_cross_entropy(v[0], label));
            suite.check("class_probability", &[&[2]], move |t, v| t.class_probability(v[0], label));
        }

        let mut shapes = vec![vec![4, 3, 3]];
        shapes.extend(pam_shapes(4, 2));
        let inputs = inputs_for(&shapes, &mut suite.rng);
        suite.check_inputs("pam", inputs.clone(), |t, v| {
            Ok(pam_on(t, v[0], &pam_vars(&v[1..], SoftmaxAxis::Columns))?.output)
        });
        suite.check_inputs("pam (row softmax)", inputs, |t, v| {
            Ok(pam_on(t, v[0], &pam_vars(&v[1..], SoftmaxAxis::Rows))?.output)
        });
        suite.check("cam", &[&[3, 2, 3], &[1]], |t, v| {
            let p = CamVars {
                beta: v[1],
                axis: SoftmaxAxis::Columns,
            };
            Ok(cam_on(t, v[0], &p)?.output)
        });

        let mut shapes = vec![vec![4, 2, 2]];
        shapes.extend(parallel_shapes(4, 2));
        let inputs = inputs_for(&shapes, &mut suite.rng);
        suite.check_inputs("fuse_parallel", inputs, |t, v| {
            Ok(fuse_parallel_on(t, v[0], &parallel_vars(&v[1..]))?.output)
        });

        let mut shapes = vec![vec![4, 2, 3]];
        shapes.extend(pam_shapes(4, 2));
        shapes.push(vec![1]);
        let inputs = inputs_for(&shapes, &mut suite.rng);
        suite.check_inputs("fuse_sequential", inputs, |t, v| {
            let cam = CamVars {
                beta: v[8],
                axis: SoftmaxAxis::Columns,
            };
            Ok(fuse_sequential_on(t, v[0], &cam, &pam_vars(&v[1..8], SoftmaxAxis::Columns))?.output)
        });

        let mut shapes = vec![vec![2, 4, 4], vec![2, 2, 2], vec![2, 1, 1]];
        shapes.extend(parallel_shapes(2, 2));
        shapes.extend(parallel_shapes(2, 2));
        shapes.push(vec![1]);
        let inputs = inputs_for(&shapes, &mut suite.rng);
        suite.check_inputs("fuse_hierarchical", inputs, |t, v| {
            let p = HierarchicalVars {
                tap3: parallel_vars(&v[3..3 + PARALLEL_LEN]),
                tap4: parallel_vars(&v[3 + PARALLEL_LEN..3 + 2 * PARALLEL_LEN]),
                tap5: CamVars {
                    beta: v[3 + 2 * PARALLEL_LEN],
                    axis: SoftmaxAxis::Columns,
                },
            };
            Ok(fuse_hierarchical_on(t, [v[0], v[1], v[2]], &p)?.output)
        });
    }
    suite.worst
}

pub fn gradient_outcome(seeds: u64) -> Outcome {
    let start = Instant::now();
    let worst = gradient_suite(seeds);
    let secs = start.elapsed().as_secs_f64();
    let (name, err) = worst
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    Outcome::new(
        failing.is_empty() && secs < 60.0,
        format!(
            "{} ops x {seeds} seeds, worst {name} {err:.2e}, {secs:.1}s{}",
            worst.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; over bound: {}", failing.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// Attention properties
// ---------------------------------------------------------------------------

fn random_pam<T: Scalar>(c: usize, r: usize, alpha: f64, rng: &mut Rng) -> PamParams<T> {
    let mut p = PamParams::<T>::new(c, r, rng).unwrap();
    p.alpha = T::of(alpha);
    let bias = |n: usize, rng: &mut Rng| Tensor::from_fn([n], |_| T::of(rng.random_range(-0.5..0.5)));
    p.conv_b.bias = bias(c / r, rng);
    p.conv_c.bias = bias(c / r, rng);
    p.conv_d.bias = bias(c, rng);
    p
}

fn random_map<T: Scalar>(rng: &mut Rng) -> Tensor<T> {
    let c = [2usize, 4, 8][rng.random_range(0..3)];
    let h = rng.random_range(1..6);
    let w = rng.random_range(1..6);
    let scale = [0.1, 1.0, 5.0][rng.random_range(0..3)];
    Tensor::from_fn([c, h, w], |_| T::of(scale * rng.random_range(-1.0..1.0)))
}

/// Zero residual scales give the input back bitwise; every attention map
/// is column-stochastic.
pub fn identity_outcome(cases: usize) -> Outcome {
    let mut rng = rng_from(7);
    let mut worst_col = 0.0f64;
    let mut broken = 0;
    for _ in 0..cases {
        let a: Tensor<f32> = random_map(&mut rng);
        let c = a.shape()[0];
        let pam = random_pam::<f32>(c, 2, 0.0, &mut rng);
        let cam = CamParams::<f32>::default();
        if pam_forward(&a, &pam).unwrap() != a || cam_forward(&a, &cam).unwrap() != a {
            broken += 1;
        }
        let p = pam_attention_map(&a, &pam).unwrap();
        let q = cam_attention_map(&a, SoftmaxAxis::Columns).unwrap();
        for s in column_sums(&p).into_iter().chain(column_sums(&q)) {
            worst_col = worst_col.max((s - 1.0).abs());
        }
    }
    Outcome::new(
        broken == 0 && worst_col <= 1e-6,
        format!("{cases} inputs, {broken} not bitwise identical, worst |column sum - 1| {worst_col:.2e}"),
    )
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// `out[c, j] = x[c, perm[j]]` over the flattened spatial axis.
pub fn permute_positions<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let n = perm.len();
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[(i / n) * n + perm[i % n]])
}

/// `out[c] = x[perm[c]]`.
pub fn permute_channels<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let n = x.numel() / perm.len();
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[perm[i / n] * n + i % n])
}

pub fn equivariance_outcome(perms: usize) -> Outcome {
    let mut rng = rng_from(11);
    let (mut pam_err, mut cam_err) = (0.0f64, 0.0f64);
    for _ in 0..perms {
        let a: Tensor<f32> = Tensor::from_fn([8, 4, 5], |_| rng.random_range(-1.0f32..1.0));
        let pam = random_pam::<f32>(8, 2, rng.random_range(0.2..1.5), &mut rng);
        let sigma = shuffled(20, &mut rng);
        let lhs = pam_forward(&permute_positions(&a, &sigma), &pam).unwrap();
        let rhs = permute_positions(&pam_forward(&a, &pam).unwrap(), &sigma);
        pam_err = pam_err.max(lhs.max_abs_diff(&rhs).unwrap());

        let cam = CamParams {
            beta: rng.random_range(0.2f32..1.5),
            axis: SoftmaxAxis::Columns,
        };
        let pi = shuffled(8, &mut rng);
        let lhs = cam_forward(&permute_channels(&a, &pi), &cam).unwrap();
        let rhs = permute_channels(&cam_forward(&a, &cam).unwrap(), &pi);
        cam_err = cam_err.max(lhs.max_abs_diff(&rhs).unwrap());
    }
    Outcome::new(
        pam_err <= 1e-5 && cam_err <= 1e-5,
        format!("{perms} permutations each, PAM max diff {pam_err:.2e}, CAM max diff {cam_err:.2e}"),
    )
}

/// CAM `C=2, N=1` and PAM `C=1, N=2` instances evaluated by hand.
pub fn hand_example_outcome() -> Outcome {
    let mut errs = Vec::new();

    let a = Tensor::new([2, 1, 1], vec![1.0f64, 0.0]).unwrap();
    let q = cam_attention_map(&a, SoftmaxAxis::Columns).unwrap();
    // Q is stored row-major: [q00, q01, q10, q11].
    let expected_q = [0.7311, 0.5, 0.2689, 0.5];
    errs.push(max_diff(q.data(), &expected_q));
    let out = cam_forward(
        &a,
        &CamParams {
            beta: 1.0,
            axis: SoftmaxAxis::Columns,
        },
    )
    .unwrap();
    errs.push(max_diff(out.data(), &[1.7311, 0.2689]));

    // a = [1, 2]: raw = [[1, 2], [2, 4]]; P column 0 = softmax(1, 2),
    // column 1 = softmax(2, 4); out_j = Σ_k a_k P_kj + a_j.
    let unit = || ConvParams {
        weight: Tensor::full([1, 1, 1, 1], 1.0),
        bias: Tensor::zeros([1]),
    };
    let pam = PamParams {
        conv_b: unit(),
        conv_c: unit(),
        conv_d: unit(),
        alpha: 1.0f64,
        reduction: 1,
        axis: SoftmaxAxis::Columns,
    };
    let a = Tensor::new([1, 1, 2], vec![1.0f64, 2.0]).unwrap();
    let p = pam_attention_map(&a, &pam).unwrap();
    errs.push(max_diff(p.data(), &[0.268941, 0.119203, 0.731059, 0.880797]));
    let out = pam_forward(&a, &pam).unwrap();
    errs.push(max_diff(out.data(), &[2.731059, 3.880797]));

    let worst = errs.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        worst <= 1e-4,
        format!(
            "CAM Q {:.1e}, CAM out {:.1e}, PAM P {:.1e}, PAM out {:.1e}",
            errs[0], errs[1], errs[2], errs[3]
        ),
    )
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Kernel and metric oracles
// ---------------------------------------------------------------------------

/// Kernels run at f32 on inputs already representable in f32; the loop
/// references accumulate in f64.
pub fn kernel_oracle_outcome(cases: usize) -> Outcome {
    use agpad::tensor::kernels;
    let mut rng = rng_from(3);
    let uniform = |shape: &[usize], rng: &mut Rng| uniform(shape, rng).cast::<f32>().cast::<f64>();
    let (mut mm, mut cv, mut mp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = uniform(&[m, k], &mut rng);
        let b = uniform(&[k, n], &mut rng);
        let got = kernels::matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap().cast::<f64>();
        mm = mm.max(got.max_abs_diff(&matmul_ref(&a, &b)).unwrap());

        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let kk = [1usize, 3, 5][rng.random_range(0..3)];
        let h = rng.random_range(kk..kk + 6);
        let w = rng.random_range(kk..kk + 6);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=kk / 2);
        let x = uniform(&[cin, h, w], &mut rng);
        let wt = uniform(&[cout, cin, kk, kk], &mut rng);
        let bias = uniform(&[cout], &mut rng);
        let got = kernels::conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), &bias.cast::<f32>(), stride, pad)
            .unwrap()
            .cast::<f64>();
        cv = cv.max(got.max_abs_diff(&conv2d_ref(&x, &wt, &bias, stride, pad)).unwrap());

        let win = rng.random_range(1..5);
        let st = rng.random_range(1..=win);
        let x = uniform(&[rng.random_range(1..4), win + rng.random_range(0..8), win + rng.random_range(0..8)], &mut rng);
        let got = kernels::maxpool2d(&x.cast::<f32>(), win, st).unwrap().cast::<f64>();
        mp = mp.max(got.max_abs_diff(&maxpool_ref(&x, win, st)).unwrap());
    }
    Outcome::new(
        mm <= 1e-5 && cv <= 1e-5 && mp <= 1e-5,
        format!("{cases} instances each (f32), matmul {mm:.1e}, conv2d {cv:.1e}, maxpool2d {mp:.1e}"),
    )
}

pub fn metric_oracle_outcome(sets: usize) -> Outcome {
    use agpad::metrics::{apcer_bpcer, roc, tdr_at_fdr, ScoreSet};
    let mut rng = rng_from(5);
    let (mut roc_bad, mut tdr_bad, mut err_bad, mut ident_bad) = (0, 0, 0, 0);
    for _ in 0..sets {
        let (live, pa) = random_scores(&mut rng);
        let set = ScoreSet::new(live.clone(), pa.clone()).unwrap();
        let curve = roc(&set);
        let reference = roc_ref(&live, &pa);
        let same = curve.points.len() == reference.len()
            && curve
                .points
                .iter()
                .zip(&reference)
                .all(|(p, r)| p.threshold == r.threshold && p.fdr == r.fdr && p.tdr == r.tdr);
        roc_bad += !same as usize;

        for target in [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, rng.random_range(0.0..1.0)] {
            if tdr_at_fdr(&set, target).unwrap() != tdr_at_fdr_ref(&live, &pa, target) {
                tdr_bad += 1;
            }
        }
        for t in candidate_thresholds(&live, &pa).into_iter().filter(|t| t.is_finite()) {
            let (apcer, bpcer) = apcer_bpcer(&set, t).unwrap();
            if (apcer, bpcer) != apcer_bpcer_ref(&live, &pa, t) {
                err_bad += 1;
            }
            // At the same threshold the ROC point is the error-rate pair.
            let p = curve.points.iter().find(|p| p.threshold == t).unwrap();
            if p.fdr != bpcer || (p.tdr - (1.0 - apcer)).abs() > 1e-12 {
                ident_bad += 1;
            }
        }
    }
    Outcome::new(
        roc_bad + tdr_bad + err_bad + ident_bad == 0,
        format!(
            "{sets} score sets: roc mismatches {roc_bad}, tdr_at_fdr {tdr_bad}, apcer/bpcer {err_bad}, FDR/BPCER TDR/APCER identity {ident_bad}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

/// For `score = Σ w ⊙ A` the gradient is `w`, so the heatmap is
/// `ReLU(Σ_c mean(w_c) A_c)` over its maximum.
pub fn linear_cam_error(rng: &mut Rng) -> f64 {
    let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
    let a = uniform(&[c, h, w], rng);
    let wt = uniform(&[c, h, w], rng);
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let wv = tape.constant(wt.clone());
    let prod = tape.mul(av, wv).unwrap();
    let score = tape.sum(prod).unwrap();
    let grads = tape.backward(score).unwrap();
    let heat = grad_cam_from(&a, grads.get(av).unwrap(), "linear").unwrap();

    let hw = h * w;
    let weights: Vec<f64> = (0..c).map(|ch| wt.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let mut closed: Vec<f64> = (0..hw)
        .map(|i| (0..c).map(|ch| weights[ch] * a.data()[ch * hw + i]).sum::<f64>().max(0.0))
        .collect();
    let max = closed.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        closed.iter_mut().for_each(|v| *v /= max);
    }
    max_diff(heat.values.data(), &closed)
}

// ---------------------------------------------------------------------------
// Run configurations
// ---------------------------------------------------------------------------

/// A pipeline run small enough for a test: 32-pixel corpus, two epochs.
pub const SMALL_RUN: &str = "\
seed = 5
model.input_size = 32
synth.size = 32
synth.train_live = 12
synth.train_pa = 12
synth.test_live = 8
synth.test_pa = 8
train.epochs = 2
train.batch_size = 8
train.lr = 1e-3
train.checkpoint_every = 1
eval.fdr_targets = 0.125, 0.25
";

pub fn small_run(out: &std::path::Path) -> agpad::config::RunConfig {
    let mut cfg = agpad::config::RunConfig::parse_str(SMALL_RUN).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}
