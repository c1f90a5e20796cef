//! Shared test oracles, all independent of the library's implementation
//! paths: adaptive quadrature for divergences, a Nelder-Mead minimizer,
//! finite-difference plumbing over encoder parameters, and topic-recovery
//! matching.

#![allow(dead_code)]

use datm_core::encoder::EncoderParams;

/// Adaptive Simpson quadrature with an absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + rec(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, whole, m, fm, tol, 50)
}

/// KL(Weibull(k,λ) || Gamma(α, rate β)) by quadrature, using the
/// substitution u = (x/λ)^k so the Weibull measure becomes e^{-u} du.
pub fn kl_weibull_gamma_quadrature(k: f64, lam: f64, alpha: f64, beta: f64) -> f64 {
    let ln_gamma_alpha = ln_gamma(alpha);
    let h = move |u: f64| -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let ln_x = lam.ln() + u.ln() / k;
        let ln_q = k.ln() - k * lam.ln() + (k - 1.0) * ln_x - u;
        let ln_p = alpha * beta.ln() - ln_gamma_alpha + (alpha - 1.0) * ln_x
            - beta * lam * u.powf(1.0 / k);
        (-u).exp() * (ln_q - ln_p)
    };
    // split at u = 1: the substitution u = e^t removes the logarithmic
    // singularity at 0, and the e^{-u}·u^{1/k} tail decays late for small k
    let head = adaptive_simpson(&|t: f64| h(t.exp()) * t.exp(), -36.0, 0.0, 1e-9);
    let upper = 60.0 + 14.0 / k;
    head + adaptive_simpson(&h, 1.0, upper, 1e-9)
}

/// KL(Gamma(αq, rate βq) || Gamma(αp, rate βp)) by quadrature, using the
/// substitution u = βq·x.
pub fn kl_gamma_gamma_quadrature(aq: f64, bq: f64, ap: f64, bp: f64) -> f64 {
    let lg_q = ln_gamma(aq);
    let lg_p = ln_gamma(ap);
    let h = move |u: f64| -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let ln_x = u.ln() - bq.ln();
        let ln_q = aq * bq.ln() - lg_q + (aq - 1.0) * ln_x - u;
        let ln_p = ap * bp.ln() - lg_p + (ap - 1.0) * ln_x - bp * u / bq;
        (u.ln() * (aq - 1.0) - u - lg_q).exp() * (ln_q - ln_p)
    };
    adaptive_simpson(&h, 1e-14, 60.0 + 10.0 * aq, 1e-10)
}

/// Independent Lanczos ln Γ for the oracles (coefficients differ from the
/// library's set: Boost's g = 6.024680040776729583740234375 15-term set
/// would be overkill; the classic 6-term Numerical-style set reaches ~1e-12
/// here, enough for 1e-6 oracle work).
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0);
    // Pugh-style coefficients for g = 5, n = 6
    const C: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in C {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Multi-start Nelder-Mead on an n-dimensional function.
pub fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    iters: usize,
) -> (f64, Vec<f64>) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap());
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            for d in 0..n {
                centroid[d] += simplex[i][d] / n as f64;
            }
        }
        let reflect: Vec<f64> = (0..n)
            .map(|d| centroid[d] + (centroid[d] - simplex[worst][d]))
            .collect();
        let fr = f(&reflect);
        if fr < fv[best] {
            let expand: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 2.0 * (centroid[d] - simplex[worst][d]))
                .collect();
            let fe = f(&expand);
            if fe < fr {
                simplex[worst] = expand;
                fv[worst] = fe;
            } else {
                simplex[worst] = reflect;
                fv[worst] = fr;
            }
        } else if fr < fv[second_worst] {
            simplex[worst] = reflect;
            fv[worst] = fr;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 0.5 * (simplex[worst][d] - centroid[d]))
                .collect();
            let fc = f(&contract);
            if fc < fv[worst] {
                simplex[worst] = contract;
                fv[worst] = fc;
            } else {
                for &i in &order[1..] {
                    let s: Vec<f64> = (0..n)
                        .map(|d| 0.5 * (simplex[i][d] + simplex[best][d]))
                        .collect();
                    fv[i] = f(&s);
                    simplex[i] = s;
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=n {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    (fv[best], simplex[best].clone())
}

/// Number of scalar parameters in one encoder tensor.
pub fn tensor_len(enc: &EncoderParams<f64>, layer: usize, tensor: usize) -> usize {
    let l = &enc.layers[layer];
    match tensor {
        0 => l.w1.len(),
        1 => l.b1.len(),
        2 => l.w2.len(),
        3 => l.b2.len(),
        4 => l.w3.len(),
        5 => l.b3.len(),
        _ => unreachable!(),
    }
}

/// Mutable access to one scalar encoder parameter by flat index.
pub fn param_mut(enc: &mut EncoderParams<f64>, layer: usize, tensor: usize, idx: usize) -> &mut f64 {
    let l = &mut enc.layers[layer];
    match tensor {
        0 => &mut l.w1.as_slice_mut().unwrap()[idx],
        1 => &mut l.b1.as_slice_mut().unwrap()[idx],
        2 => &mut l.w2.as_slice_mut().unwrap()[idx],
        3 => &mut l.b2.as_slice_mut().unwrap()[idx],
        4 => &mut l.w3.as_slice_mut().unwrap()[idx],
        5 => &mut l.b3.as_slice_mut().unwrap()[idx],
        _ => unreachable!(),
    }
}

pub fn param_at(enc: &EncoderParams<f64>, layer: usize, tensor: usize, idx: usize) -> f64 {
    let l = &enc.layers[layer];
    match tensor {
        0 => l.w1.as_slice().unwrap()[idx],
        1 => l.b1.as_slice().unwrap()[idx],
        2 => l.w2.as_slice().unwrap()[idx],
        3 => l.b2.as_slice().unwrap()[idx],
        4 => l.w3.as_slice().unwrap()[idx],
        5 => l.b3.as_slice().unwrap()[idx],
        _ => unreachable!(),
    }
}

/// Relative error with an absolute floor for near-zero entries.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedily match learned topic columns to planted ones, returning the best
/// cosine for each planted topic (each learned column used at most once).
pub fn greedy_match_topics(learned: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in truth.iter().enumerate() {
        for (li, l) in learned.iter().enumerate() {
            pairs.push((cosine(t, l), ti, li));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used_t = vec![false; truth.len()];
    let mut used_l = vec![false; learned.len()];
    let mut out = vec![0.0; truth.len()];
    for (c, ti, li) in pairs {
        if !used_t[ti] && !used_l[li] {
            used_t[ti] = true;
            used_l[li] = true;
            out[ti] = c;
        }
    }
    out
}

use datm_core::corpus::Corpus;
use datm_core::decoder::{DecoderHyper, GlobalParams, NetworkShape};
use datm_core::rng::RngStream;
use ndarray::{Array1, Array2};

/// Single-layer corpus with disjoint block topics and sparse per-document
/// topic usage (identifiable by construction). Returns the corpus and the
/// planted word-simplex columns.
pub fn planted_corpus(v: usize, k: usize, n: usize, seed: u64) -> (Corpus, Vec<Vec<f64>>) {
    let shape = NetworkShape::new(vec![k], v);
    let hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
    let mut rng = RngStream::new(seed, 0);
    let mut truth = GlobalParams::init_random(shape, hyper, &mut rng);
    let block = v / k;
    let mut phi = Array2::zeros((v, k));
    for t in 0..k {
        for j in 0..block {
            phi[(t * block + j, t)] = 1.0 / block as f64;
        }
    }
    truth.phi[0] = phi.clone();
    truth.r = Array1::from_elem(k, 0.4);
    truth.hyper.c = 0.04;
    let (corpus, _) = truth.generate_synthetic(n, &mut rng);
    let cols = (0..k).map(|t| phi.column(t).to_vec()).collect();
    (corpus, cols)
}

/// Two-layer ground truth: block word topics under grouped super-topics, so
/// layer-1 usage is strongly correlated within groups. `k1` must be a
/// multiple of `k2` so every topic belongs to exactly one group.
pub fn hierarchical_corpus(v: usize, k1: usize, k2: usize, n: usize, seed: u64) -> Corpus {
    assert_eq!(k1 % k2, 0);
    let shape = NetworkShape::new(vec![k1, k2], v);
    let hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
    let mut rng = RngStream::new(seed, 0);
    let mut truth = GlobalParams::init_random(shape, hyper, &mut rng);
    let block = v / k1;
    let mut phi1 = Array2::zeros((v, k1));
    for t in 0..k1 {
        for j in 0..block {
            phi1[(t * block + j, t)] = 1.0 / block as f64;
        }
    }
    truth.phi[0] = phi1;
    let group = k1 / k2;
    let mut phi2 = Array2::zeros((k1, k2));
    for t in 0..k2 {
        for j in 0..group {
            phi2[(t * group + j, t)] = 1.0 / group as f64;
        }
    }
    truth.phi[1] = phi2;
    // sparse super-topic usage and very sparse within-group usage, so the
    // held-out tokens of a document often land on group-mates of its
    // training topics; expected length = k2·r/c² ≈ 31 tokens
    truth.r = Array1::from_elem(k2, 0.3);
    truth.hyper.c = 0.17;
    truth.generate_synthetic(n, &mut rng).0
}

/// Labeled corpus whose classes differ through the top-layer shapes r:
/// class 1 documents draw from the first half of the topics, class 2 from
/// the second half.
pub fn labeled_corpus(v: usize, k: usize, n_per_class: usize, seed: u64) -> Corpus {
    let shape = NetworkShape::new(vec![k], v);
    let hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
    let mut rng = RngStream::new(seed, 0);
    let mut truth = GlobalParams::init_random(shape, hyper, &mut rng);
    let block = v / k;
    let mut phi = Array2::zeros((v, k));
    for t in 0..k {
        for j in 0..block {
            phi[(t * block + j, t)] = 1.0 / block as f64;
        }
    }
    truth.phi[0] = phi;
    truth.hyper.c = 0.04;
    let half = k / 2;
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        let mut r = Array1::from_elem(k, 0.02);
        for t in 0..k {
            let in_class = if class == 0 { t < half } else { t >= half };
            if in_class {
                r[t] = 0.8;
            }
        }
        truth.r = r;
        let (part, _) = truth.generate_synthetic(n_per_class, &mut rng);
        docs.extend(part.docs);
        labels.extend(std::iter::repeat(class as u32 + 1).take(n_per_class));
    }
    // interleave classes so mini-batches stay mixed
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for i in 0..order.len() {
        let j = i + rng.gen_range(order.len() - i);
        order.swap(i, j);
    }
    let docs = order.iter().map(|&i| docs[i].clone()).collect();
    let labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
    Corpus::from_docs(docs, v).with_labels(labels).unwrap()
}

pub mod fd {
    //! Finite-difference gradient verification shared by the unit-level
    //! checks and the acceptance suite.

    use super::{param_at, param_mut, rel_err, tensor_len};
    use datm_core::config::HeadKind;
    use datm_core::decoder::{DecoderHyper, GlobalParams, NetworkShape};
    use datm_core::encoder::{
        draw_uniform_noise, elbo, elbo_grad, encode, DocNoise, EncodeCfg, EncoderParams,
        NoiseSpec, Variant,
    };
    use datm_core::rng::RngStream;
    use datm_core::supervised::{supervised_elbo, supervised_elbo_grad, ClassifierParams};
    use ndarray::Array2;

    pub const FD_STEP: f64 = 1e-5;

    pub fn toy_problem(
        seed: u64,
    ) -> (GlobalParams<f64>, EncoderParams<f64>, Vec<Vec<(u32, u32)>>) {
        let shape = NetworkShape::new(vec![8, 4], 20);
        let hyper = DecoderHyper::default_for(&shape);
        let mut rng = RngStream::new(seed, 0);
        let g = GlobalParams::init_random(shape, hyper, &mut rng);
        let enc = EncoderParams::init(&[8, 4], 20, &mut rng);
        let mut docs = Vec::new();
        for _ in 0..3 {
            let mut doc = Vec::new();
            for v in 0..20u32 {
                let c = rng.gen_range(4) as u32;
                if c > 0 {
                    doc.push((v, c));
                }
            }
            docs.push(doc);
        }
        (g, enc, docs)
    }

    pub fn noises_for(
        docs: &[&[(u32, u32)]],
        enc: &EncoderParams<f64>,
        g: &GlobalParams<f64>,
        cfg: EncodeCfg,
        seed: u64,
    ) -> Vec<DocNoise> {
        docs.iter()
            .enumerate()
            .map(|(i, doc)| match cfg.variant {
                Variant::Ghai => {
                    let mut rng = RngStream::derived(seed, &[7, i as u64]);
                    encode(doc, enc, g, cfg, NoiseSpec::Draw(&mut rng)).noise
                }
                _ => {
                    let mut rng = RngStream::derived(seed, &[7, i as u64]);
                    draw_uniform_noise(&g.shape.widths, &mut rng)
                }
            })
            .collect()
    }

    /// Worst relative error of the analytic ELBO gradient against central
    /// finite differences over every encoder parameter; panics above `tol`.
    pub fn check_variant(variant: Variant, tol: f64) -> f64 {
        let (g, enc, docs_owned) = toy_problem(42);
        let docs: Vec<&[(u32, u32)]> = docs_owned.iter().map(|d| d.as_slice()).collect();
        let cfg = EncodeCfg { variant, rsvi_b: 10 };
        let rho = 3.5;
        let noises = noises_for(&docs, &enc, &g, cfg, 99);

        let (grad, breakdown, _) = elbo_grad(&docs, &enc, &g, cfg, rho, &noises, false);
        assert!(breakdown.total.is_finite());
        assert!(breakdown.kl.iter().all(|&k| k >= -1e-9));

        let mut worst: f64 = 0.0;
        let mut enc_pert = enc.clone();
        for layer in 0..enc.layers.len() {
            for tensor in 0..6 {
                for idx in 0..tensor_len(&enc, layer, tensor) {
                    let orig = param_at(&enc, layer, tensor, idx);
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig + FD_STEP;
                    let up = elbo(&docs, &enc_pert, &g, cfg, rho, &noises).total;
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig - FD_STEP;
                    let down = elbo(&docs, &enc_pert, &g, cfg, rho, &noises).total;
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig;
                    let fd = (up - down) / (2.0 * FD_STEP);
                    let analytic = param_at(&grad, layer, tensor, idx);
                    let err = rel_err(analytic, fd);
                    assert!(
                        err < tol,
                        "{variant:?} layer {layer} tensor {tensor} idx {idx}: analytic {analytic} fd {fd} err {err}"
                    );
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    /// As [`check_variant`] for the supervised objective, also covering the
    /// classifier parameters (and the MLP head when nonlinear).
    pub fn check_supervised(variant: Variant, head: HeadKind, tol: f64) -> f64 {
        let (g, enc, docs_owned) = toy_problem(314);
        let docs: Vec<&[(u32, u32)]> = docs_owned.iter().map(|d| d.as_slice()).collect();
        let labels = vec![1u32, 3, 2];
        let cfg = EncodeCfg { variant, rsvi_b: 10 };
        let rho = 2.5;
        let beta = 0.7;
        let lw = 1.3;
        let noises = noises_for(&docs, &enc, &g, cfg, 555);
        let mut rng = RngStream::new(271, 0);
        let mut cls = ClassifierParams::init(&[8, 4], 3, head, 6, 5, &mut rng);
        cls.mu.mapv_inplace(|_| rng.normal() * 0.3);
        let w_eps = Array2::from_shape_fn(cls.mu.raw_dim(), |_| rng.normal());

        let (enc_grad, cls_grad, breakdown, _) = supervised_elbo_grad(
            &docs, &labels, &enc, &g, &cls, &w_eps, cfg, rho, &noises, beta, lw, false,
        );
        assert!(breakdown.total.is_finite());
        assert!(breakdown.kl_w >= 0.0);

        let value = |e: &EncoderParams<f64>, c: &ClassifierParams<f64>| {
            supervised_elbo(&docs, &labels, e, &g, c, &w_eps, cfg, rho, &noises, beta, lw).total
        };

        let mut worst: f64 = 0.0;
        let mut enc_pert = enc.clone();
        for layer in 0..enc.layers.len() {
            for tensor in 0..6 {
                for idx in 0..tensor_len(&enc, layer, tensor) {
                    let orig = param_at(&enc, layer, tensor, idx);
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig + FD_STEP;
                    let up = value(&enc_pert, &cls);
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig - FD_STEP;
                    let down = value(&enc_pert, &cls);
                    *param_mut(&mut enc_pert, layer, tensor, idx) = orig;
                    let fd = (up - down) / (2.0 * FD_STEP);
                    let analytic = param_at(&enc_grad, layer, tensor, idx);
                    let err = rel_err(analytic, fd);
                    assert!(err < tol, "{variant:?}/{head:?} enc l{layer} t{tensor} i{idx}: {analytic} vs {fd}");
                    worst = worst.max(err);
                }
            }
        }
        fn mu_rho_slot<'a>(c: &'a mut ClassifierParams<f64>, which: usize, idx: usize) -> &'a mut f64 {
            if which == 0 {
                &mut c.mu.as_slice_mut().unwrap()[idx]
            } else {
                &mut c.rho.as_slice_mut().unwrap()[idx]
            }
        }
        let mut cls_pert = cls.clone();
        for which in [0usize, 1] {
            for idx in 0..cls.mu.len() {
                let orig = *mu_rho_slot(&mut cls_pert, which, idx);
                *mu_rho_slot(&mut cls_pert, which, idx) = orig + FD_STEP;
                let up = value(&enc, &cls_pert);
                *mu_rho_slot(&mut cls_pert, which, idx) = orig - FD_STEP;
                let down = value(&enc, &cls_pert);
                *mu_rho_slot(&mut cls_pert, which, idx) = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let analytic = if which == 0 {
                    cls_grad.mu.as_slice().unwrap()[idx]
                } else {
                    cls_grad.rho.as_slice().unwrap()[idx]
                };
                let err = rel_err(analytic, fd);
                assert!(err < tol, "{variant:?}/{head:?} cls[{which}][{idx}]: {analytic} vs {fd}");
                worst = worst.max(err);
            }
        }
        if head == HeadKind::Nonlinear {
            fn slot<'a>(c: &'a mut ClassifierParams<f64>, mut idx: usize) -> &'a mut f64 {
                let m = c.mlp.as_mut().unwrap();
                for w in m.w_m1.iter_mut() {
                    if idx < w.len() {
                        return &mut w.as_slice_mut().unwrap()[idx];
                    }
                    idx -= w.len();
                }
                for b in m.b_m1.iter_mut() {
                    if idx < b.len() {
                        return &mut b.as_slice_mut().unwrap()[idx];
                    }
                    idx -= b.len();
                }
                if idx < m.w_m2.len() {
                    return &mut m.w_m2.as_slice_mut().unwrap()[idx];
                }
                idx -= m.w_m2.len();
                if idx < m.b_m2.len() {
                    return &mut m.b_m2.as_slice_mut().unwrap()[idx];
                }
                idx -= m.b_m2.len();
                if idx < m.w_m3.len() {
                    return &mut m.w_m3.as_slice_mut().unwrap()[idx];
                }
                idx -= m.w_m3.len();
                &mut m.b_m3.as_slice_mut().unwrap()[idx]
            }
            let flat_len = {
                let m = cls.mlp.as_ref().unwrap();
                m.w_m1.iter().map(|w| w.len()).sum::<usize>()
                    + m.b_m1.iter().map(|b| b.len()).sum::<usize>()
                    + m.w_m2.len()
                    + m.b_m2.len()
                    + m.w_m3.len()
                    + m.b_m3.len()
            };
            for idx in 0..flat_len {
                let orig = *slot(&mut cls_pert, idx);
                *slot(&mut cls_pert, idx) = orig + FD_STEP;
                let up = value(&enc, &cls_pert);
                *slot(&mut cls_pert, idx) = orig - FD_STEP;
                let down = value(&enc, &cls_pert);
                *slot(&mut cls_pert, idx) = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let mut gclone = cls_grad.clone();
                let analytic = *slot(&mut gclone, idx);
                let err = rel_err(analytic, fd);
                assert!(err < tol, "{variant:?} mlp[{idx}]: {analytic} vs {fd}");
                worst = worst.max(err);
            }
        }
        worst
    }
}
