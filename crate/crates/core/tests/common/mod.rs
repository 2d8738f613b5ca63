#![allow(dead_code)]

use bayes_finetune::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so kinks (relu, clamp) are not straddled
/// by finite-difference steps.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar loss `Σ out ∘ probe` for a fixed random probe, so every output
/// coordinate contributes to the checked gradient.
fn probed_loss<F>(g: &mut Graph, inputs: &[Var], probe: &Tensor, build: &F) -> Result<Var>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out = build(g, inputs)?;
    let p = g.constant(probe.clone().reshape(g.shape(out).to_vec())?);
    let prod = g.mul(out, p)?;
    g.sum(prod)
}

/// Norm-wise relative error between autodiff gradients and central finite
/// differences, maximised over inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, step: f64, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).len()
    };
    let mut r = rng(seed);
    let probe = rand_tensor(&mut r, &[out_len], -1.0, 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = probed_loss(&mut g, &vars, &probe, &build).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = probed_loss(&mut g, &vars, &probe, &build).expect("forward");
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff: f64 = analytic[k]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic[k]).max(norm(&numeric)).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Direct nested-loop grouped cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, groups: usize, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let coutg = cout / groups;
    let mut out = Tensor::zeros([b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            let grp = o / coutg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cg {
                        let ci = grp * cg + c;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cg + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn([m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
    })
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / ‖b‖`, or the absolute norm when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let nb = norm(b);
    if nb == 0.0 {
        diff
    } else {
        diff / nb
    }
}

/// Central finite differences of a scalar function of a flat vector.
pub fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let fp = f(&work);
            work[i] = x[i] - h;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Average precision by explicit enumeration of the PR curve: every
/// distinct threshold contributes its precision weighted by the recall gained.
pub fn brute_force_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}
