//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagood::net::{self, NetConfig, ProjectionParams};

/// Worst-case comparison between analytic and central-difference gradients
/// over every scalar parameter.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

fn objective(p: &ProjectionParams, x: &Array2<f32>, gp: &Array1<f64>, gl: &Array1<f64>) -> f64 {
    let out = net::forward(p, x.view()).unwrap();
    out.projected.dot(gp) + out.logits.dot(gl)
}

/// Central differences of `gp·projected + gl·logits`, step `h`, f64 throughout.
pub fn grad_check(params: &ProjectionParams, x: &Array2<f32>, seed: u64, h: f64, rel_tol: f64, abs_floor: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let gp = Array1::from_shape_fn(params.config.width, |_| rng.random_range(-1.0..1.0));
    let gl = Array1::from_shape_fn(params.config.n_classes, |_| rng.random_range(-1.0..1.0));

    let out = net::forward(params, x.view()).unwrap();
    let mut analytic = ProjectionParams::zeros(params.config);
    net::backward(params, &out.trace, &gp, &gl, &mut analytic).unwrap();

    let names = params.tensor_names();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut work = params.clone();
    let mut report = GradCheck { checked: 0, failures: vec![], worst_rel: 0.0, worst_abs: 0.0 };
    for (ti, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = work.tensors()[ti][i];
            work.tensors_mut()[ti][i] = orig + h;
            let up = objective(&work, x, &gp, &gl);
            work.tensors_mut()[ti][i] = orig - h;
            let down = objective(&work, x, &gp, &gl);
            work.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.tensors()[ti][i];
            let diff = (numeric - exact).abs();
            let rel = diff / numeric.abs().max(exact.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.worst_abs = report.worst_abs.max(diff);
            if diff > abs_floor {
                report.worst_rel = report.worst_rel.max(rel);
                if rel > rel_tol {
                    report.failures.push(format!("{}[{i}]: analytic {exact:e} numeric {numeric:e}", names[ti]));
                }
            }
        }
    }
    report
}

pub fn small_net(seed: u64) -> NetConfig {
    NetConfig { input_dim: 8, width: 16, n_blocks: 2, n_heads: 2, mlp_ratio: 2, n_classes: 3, seed }
}

/// Random instance with non-trivial layer-norm and bias parameters so their
/// gradients are not evaluated at a symmetric point.
pub fn random_instance(seed: u64) -> (ProjectionParams, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ProjectionParams::init(small_net(seed)).unwrap();
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let n_tok = rng.random_range(1..=5);
    let x = Array2::from_shape_fn((n_tok, 8), |_| rng.random_range(-2.0f32..2.0));
    (params, x)
}

/// O(n²) pairwise definition of AUROC.
pub fn auroc_pairwise(ind: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in ind {
        for &b in ood {
            acc += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    acc / (ind.len() * ood.len()) as f64
}

/// Tries every candidate threshold (observed IND scores and +inf) and keeps the
/// largest one that accepts at least `target` of the IND scores.
pub fn fpr_enumerated(ind: &[f64], ood: &[f64], target: f64) -> (f64, f64) {
    let mut candidates: Vec<f64> = ind.to_vec();
    candidates.push(f64::INFINITY);
    let mut best: Option<f64> = None;
    for &t in &candidates {
        let tpr = ind.iter().filter(|&&s| s >= t).count() as f64 / ind.len() as f64;
        if tpr >= target && best.map_or(true, |b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("min IND score always reaches full TPR");
    let fpr = ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64;
    (fpr, t)
}
