//! Checks shared by the property tests and the acceptance report. Each
//! returns a one-line summary on success and the first violation otherwise.

#![allow(dead_code)]

use advinv_core::blackbox::{is_wrong_pseudo_label, pr_k, pseudo_label, simba_pseudo, DirectionSpace, SimbaParams};
use advinv_core::evalkit::{diversity, pseudo_label_consistency_probe, variance_probe};
use advinv_core::invert::semantic_loss;
use advinv_core::modelzoo::{build_model, ArchId, ModelHandle, ModelShape, QueryOracle};
use advinv_nn::loss::soft_cross_entropy;
use advinv_nn::{LayerSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Top-k by exhaustive subset search: the k-subset with the largest values,
/// ties broken by the lexicographically smallest index list.
pub fn brute_top_k(c: &[f32], k: usize) -> Vec<usize> {
    let n = c.len();
    let mut best: Option<(Vec<f32>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        // compare sorted-descending values, not sums, so rounding cannot mislead
        let mut vals: Vec<f32> = set.iter().map(|&i| c[i]).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let better = match &best {
            None => true,
            Some((bv, bs)) => match vals.partial_cmp(bv).unwrap() {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Equal => set < *bs,
                std::cmp::Ordering::Less => false,
            },
        };
        if better {
            best = Some((vals, set));
        }
    }
    best.unwrap().1
}

pub fn top_k_oracle(vectors: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ties = 0;
    for trial in 0..vectors {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=n);
        // a coarse value grid makes ties frequent
        let levels = if trial % 2 == 0 { 4 } else { 1000 };
        let raw: Vec<f32> = (0..n).map(|_| rng.random_range(0..levels) as f32 + 1.0).collect();
        let s: f32 = raw.iter().sum();
        let c: Vec<f32> = raw.iter().map(|v| v / s).collect();
        let mut sorted = c.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if k < n && sorted[k - 1] == sorted[k] {
            ties += 1;
        }
        let got = pseudo_label(&c, k).map_err(|e| e.to_string())?;
        let want = brute_top_k(&c, k);
        ensure(got.classes() == want.as_slice(), || format!("c = {c:?}, k = {k}: {:?} vs {want:?}", got.classes()))?;
    }
    ensure(ties * 20 > vectors, || format!("only {ties} tie cases generated"))?;
    Ok(format!("{vectors} vectors agree with brute force ({ties} with ties at the k boundary)"))
}

/// Softmax of a fixed random linear map.
pub struct ToyOracle {
    w: Vec<Vec<f32>>,
    shape: Vec<usize>,
}

impl ToyOracle {
    pub fn random(classes: usize, side: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = side * side;
        let w = (0..classes).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        Self { w, shape: vec![1, side, side] }
    }
}

impl QueryOracle for ToyOracle {
    fn num_classes(&self) -> usize {
        self.w.len()
    }
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn query(&self, x: &Tensor) -> advinv_core::Result<Tensor> {
        let mut out = Vec::new();
        for i in 0..x.batch() {
            let mut row: Vec<f32> = self.w.iter().map(|w| w.iter().zip(x.item(i)).map(|(a, b)| a * b).sum()).collect();
            advinv_nn::loss::softmax_inplace(&mut row);
            out.extend(row);
        }
        Ok(Tensor::new(vec![x.batch(), self.w.len()], out)?)
    }
}

pub fn simba_audit(attacks: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut successes, mut steps) = (0, 0);
    for a in 0..attacks {
        let classes = rng.random_range(2..=8);
        let k = rng.random_range(1..=classes / 2);
        let side = 4;
        let oracle = ToyOracle::random(classes, side, &mut rng);
        let x = Tensor::from_fn(&[1, 1, side, side], |_| rng.random_range(0.0..1.0));
        let space = if a % 4 == 3 { DirectionSpace::FrequencyBasis } else { DirectionSpace::PixelBasis };
        let params = SimbaParams { epsilon: 0.2, k, max_rounds: 30, direction_space: space };
        let t = simba_pseudo(&oracle, &x, &params, a).map_err(|e| e.to_string())?;

        for w in t.pr_k_history.windows(2) {
            ensure(w[1] <= w[0], || format!("attack {a}: accepted step raised Pr_k {} -> {}", w[0], w[1]))?;
        }
        steps += t.accepted_steps;
        ensure(t.pr_k_history.len() == t.accepted_steps + 1, || format!("attack {a}: history length"))?;
        ensure(t.queries_used <= 1 + 2 * t.rounds_executed as u64, || format!("attack {a}: query count"))?;
        ensure(t.rounds_executed <= params.max_rounds, || format!("attack {a}: round count"))?;

        let adv: Vec<f32> = x.data().iter().zip(&t.delta).map(|(a, b)| a + b).collect();
        ensure(adv.iter().all(|v| (0.0..=1.0).contains(v)), || format!("attack {a}: left the [0,1] box"))?;
        let adv = Tensor::new(vec![1, 1, side, side], adv).unwrap();
        let probs = oracle.query(&adv).unwrap();
        let fin = pseudo_label(probs.item(0), k).unwrap();
        ensure(fin == t.final_pseudo_label, || format!("attack {a}: recorded pseudo-label differs from a fresh query"))?;
        let orig = pseudo_label(oracle.query(&x).unwrap().item(0), k).unwrap();
        ensure(orig == t.original_pseudo_label, || format!("attack {a}: original pseudo-label"))?;
        let last = *t.pr_k_history.last().unwrap();
        ensure((pr_k(probs.item(0), &fin) - last).abs() < 1e-6, || format!("attack {a}: final Pr_k"))?;
        ensure(t.success == is_wrong_pseudo_label(&orig, &fin).unwrap(), || format!("attack {a}: success flag"))?;
        if t.success {
            successes += 1;
            ensure(orig.classes().iter().all(|c| !fin.contains(*c)), || format!("attack {a}: success without disjointness"))?;
        }
    }
    ensure(successes > 0, || "no toy attack succeeded".into())?;
    Ok(format!("{attacks} traces, {steps} accepted steps, {successes} successes, all disjoint"))
}

pub fn cross_entropy_at_target() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = rng.random_range(2..12);
        let raw: Vec<f32> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f32 = raw.iter().sum();
        let t: Vec<f32> = raw.iter().map(|v| v / s).collect();
        let logits = Tensor::new(vec![1, c], t.iter().map(|p| p.ln()).collect()).unwrap();
        let targets = Tensor::new(vec![1, c], t.clone()).unwrap();
        let (ce, _) = soft_cross_entropy(&logits, &targets, 1e-12).map_err(|e| e.to_string())?;
        let h: f64 = t.iter().map(|&p| -(p as f64) * (p as f64).ln()).sum();
        worst = worst.max((ce - h).abs());
        ensure((ce - h).abs() < 1e-6, || format!("CE {ce} vs H {h}"))?;
    }
    Ok(format!("200 distributions, max |CE - H| = {worst:.1e}"))
}

/// Smooth stand-in for a shadow, so finite differences see no kinks.
fn smooth_shadow(seed: u64) -> ModelHandle {
    let recipe = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 4, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Tanh,
        LayerSpec::Flatten,
        LayerSpec::Linear { inputs: 4 * 4 * 4, outputs: 5 },
    ];
    let shape = ModelShape::Classifier { image: vec![1, 8, 8], classes: 5 };
    build_model(ArchId::Residual18, shape, 1, Some(recipe), seed).unwrap()
}

pub fn semantic_gradient(probes: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for probe in 0..probes {
        let shadow = smooth_shadow(probe);
        let xhat = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let mut sup = Tensor::from_fn(&[3, 5], |_| rng.random_range(0.05..1.0));
        for i in 0..3 {
            let s: f32 = sup.item(i).iter().sum();
            sup.item_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let (_, g) = semantic_loss(&xhat, &sup, &shadow).map_err(|e| e.to_string())?;
        // directional derivative along a random direction tilted towards the
        // gradient, so the probe is not lost in f32 rounding
        let gn = g.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        let scale = (xhat.len() as f32).sqrt();
        let dir: Vec<f32> = g.data().iter().map(|v| rng.random_range(-1.0..1.0) / scale + v / gn).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
        let dir: Vec<f32> = dir.iter().map(|v| v / norm).collect();
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let h = 1e-2f32;
        let shift = |s: f32| {
            let mut t = xhat.clone();
            t.data_mut().iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
            semantic_loss(&t, &sup, &shadow).unwrap().0
        };
        let numeric = (shift(h) - shift(-h)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        worst = worst.max(rel);
        ensure(rel <= 1e-2, || format!("probe {probe}: numeric {numeric} analytic {analytic} (rel {rel:.3e})"))?;
    }
    Ok(format!("{probes} probes, max relative error {worst:.1e}"))
}

pub fn variance_identity(trials: usize) -> Check {
    let mut parts = Vec::new();
    for (i, sigma) in [0.1, 0.3, 0.5].into_iter().enumerate() {
        let p = variance_probe(sigma, sigma, 64, trials, i as u64).map_err(|e| e.to_string())?;
        let want = 2.0 * sigma * sigma;
        ensure((p.expected_r - want).abs() < 1e-12, || "expected value is not 2 sigma^2".into())?;
        ensure(p.within_tolerance(), || format!("sigma {sigma}: {p:?}"))?;
        parts.push(format!("σ={sigma}: {:.4} vs {want:.4}", p.mse_r));
    }
    let z = variance_probe(0.4, 0.0, 64, 200, 1).map_err(|e| e.to_string())?;
    ensure(z.mse_c == 0.0 && z.mse_r > z.mse_c, || "zero-sigma component is not zero".into())?;
    ensure(variance_probe(0.0, 0.0, 64, 10, 1).is_err(), || "non-positive sigma accepted".into())?;
    Ok(format!("{} (tol {:.3})", parts.join(", "), 3.0 / (trials as f64).sqrt()))
}

pub fn consistency_without_noise() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let oracle = ToyOracle::random(6, 4, &mut rng);
    let data = Tensor::from_fn(&[40, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    for r in pseudo_label_consistency_probe(&oracle, &data, 0.0, &[1, 2, 3], 3, 0).map_err(|e| e.to_string())? {
        ensure(r.consistency == 1.0 && r.exact == 1.0, || format!("k = {}: {} / {}", r.k, r.consistency, r.exact))?;
    }
    Ok("consistency 1 for k = 1, 2, 3 at noise 0".into())
}

pub fn diversity_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let d = diversity(&a, &a).map_err(|e| e.to_string())?;
        ensure(d == 0.0, || format!("diversity(A, A) = {d}"))?;
    }
    Ok("diversity(A, A) = 0 on 100 lists".into())
}
