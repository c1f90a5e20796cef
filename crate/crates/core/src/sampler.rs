//! Topic-layer-adaptive stochastic-gradient Riemannian MCMC for the global
//! parameters: simplex-constrained Langevin updates of every Φ^(l) column,
//! a reflected update of the top-layer shapes r, and the annealed per-topic
//! statistics M that precondition the common step size into effective rates
//! ε_t / M_k^(l).

use crate::decoder::{debug_assert_simplex, GlobalParams};
use crate::dist::crt_sample;
use crate::dist::sample::multinomial_split_weights;
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array1, Array2};
use rayon::prelude::*;

/// Global step-size schedule ε_t = a(1 + t/b)^(−c).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            a: 0.01,
            b: 1000.0,
            c: 0.75,
        }
    }
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        self.a * (1.0 + t as f64 / self.b).powf(-self.c)
    }
}

/// Per-topic annealed statistics M_k^(l), the top-layer scalar M^(L+1), and
/// the step counter.
#[derive(Debug, Clone)]
pub struct SamplerState<T> {
    /// m[l-1][k] tracks ρ·E[x̃_{·k·}^(l)].
    pub m: Vec<Array1<T>>,
    /// Tracks ρ·E[q̃^(L+1)].
    pub m_top: T,
    pub t: u64,
    pub schedule: StepSchedule,
    pub m_floor: T,
    pub initialized: bool,
}

impl<T: Real> SamplerState<T> {
    pub fn new(widths: &[usize], schedule: StepSchedule, m_floor: f64) -> Self {
        let floor = T::of_f64(m_floor);
        SamplerState {
            m: widths.iter().map(|&k| Array1::from_elem(k, floor)).collect(),
            m_top: floor,
            t: 0,
            schedule,
            m_floor: floor,
            initialized: false,
        }
    }

    pub fn step_size(&self, t: u64) -> T {
        T::of_f64(self.schedule.at(t))
    }

    /// On the first batch, seed M directly from ρ-scaled batch statistics.
    pub fn ensure_init(&mut self, counts: &AugmentedCounts<T>, rho: T) {
        if self.initialized {
            return;
        }
        for (l, totals) in counts.topic_totals.iter().enumerate() {
            for (k, &x) in totals.iter().enumerate() {
                self.m[l][k] = (rho * T::of_f64(x as f64)).max(self.m_floor);
            }
        }
        self.m_top = (rho * counts.q_top).max(self.m_floor);
        self.initialized = true;
    }

    /// Annealed weighting M ← (1−ε')M + ε'·ρ·(batch statistic), floored.
    pub fn update_m(&mut self, counts: &AugmentedCounts<T>, rho: T, eps_prime: T) {
        let one = T::one();
        for (l, totals) in counts.topic_totals.iter().enumerate() {
            for (k, &x) in totals.iter().enumerate() {
                let target = rho * T::of_f64(x as f64);
                self.m[l][k] = ((one - eps_prime) * self.m[l][k] + eps_prime * target)
                    .max(self.m_floor);
            }
        }
        let target = rho * counts.q_top;
        self.m_top = ((one - eps_prime) * self.m_top + eps_prime * target).max(self.m_floor);
    }
}

/// Latent count statistics allocated from one mini-batch: per-layer
/// word-topic tables x̃_{vk·}^(l), their per-topic totals x̃_{·k·}^(l), and the
/// top-layer x̃^(L+1), q̃^(L+1).
#[derive(Debug, Clone)]
pub struct AugmentedCounts<T> {
    /// word_topic[l-1]: K_{l-1} × K_l table of x̃_{vk·}^(l).
    pub word_topic: Vec<Array2<u64>>,
    /// topic_totals[l-1][k] = x̃_{·k·}^(l).
    pub topic_totals: Vec<Array1<u64>>,
    /// x̃^(L+1)_k: top-layer CRT counts.
    pub x_top: Array1<u64>,
    /// q̃^(L+1) summed over the batch.
    pub q_top: T,
}

impl<T: Real> AugmentedCounts<T> {
    fn zeros(g: &GlobalParams<T>) -> Self {
        let depth = g.depth();
        AugmentedCounts {
            word_topic: (1..=depth)
                .map(|l| Array2::zeros((g.shape.width(l - 1), g.shape.width(l))))
                .collect(),
            topic_totals: (1..=depth)
                .map(|l| Array1::zeros(g.shape.width(l)))
                .collect(),
            x_top: Array1::zeros(g.shape.width(depth)),
            q_top: T::zero(),
        }
    }

    fn merge(mut self, other: AugmentedCounts<T>) -> Self {
        for (a, b) in self.word_topic.iter_mut().zip(&other.word_topic) {
            *a += b;
        }
        for (a, b) in self.topic_totals.iter_mut().zip(&other.topic_totals) {
            *a += b;
        }
        self.x_top += &other.x_top;
        self.q_top += other.q_top;
        self
    }
}

/// The q-recursion q^(l+1) = ln(1 + q^(l)/c) with q^(1) = 1, shared by every
/// document under the fixed scale policy. Returns q^(1)..q^(L+1).
pub fn q_chain<T: Real>(depth: usize, c: T) -> Vec<T> {
    let mut q = Vec::with_capacity(depth + 1);
    q.push(T::one());
    for _ in 0..depth {
        let prev = *q.last().unwrap();
        q.push((prev / c).ln_1p());
    }
    q
}

fn allocate_doc<T: Real>(
    doc: &[(u32, u32)],
    thetas: &[Array1<T>],
    g: &GlobalParams<T>,
    acc: &mut AugmentedCounts<T>,
    rng: &mut RngStream,
) {
    let depth = g.depth();
    // layer 1: split each observed token count across topics ∝ φ_vk θ_k
    let k1 = g.shape.width(1);
    let mut m_prev = vec![0u64; k1];
    let theta1 = &thetas[0];
    let mut weights = vec![0.0f64; k1];
    for &(term, count) in doc {
        let v = term as usize;
        let mut mass = 0.0;
        for k in 0..k1 {
            let w = (g.phi[0][(v, k)] * theta1[k]).as_f64();
            weights[k] = w;
            mass += w;
        }
        if mass <= 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0);
            mass = k1 as f64;
        }
        let parts = multinomial_split_weights(count as u64, &weights, mass, rng);
        for (k, &p) in parts.iter().enumerate() {
            if p > 0 {
                acc.word_topic[0][(v, k)] += p;
                acc.topic_totals[0][k] += p;
                m_prev[k] += p;
            }
        }
    }
    // deeper layers: CRT upward on each m, then split across the next layer
    for l in 2..=depth {
        let k_in = g.shape.width(l - 1);
        let k_out = g.shape.width(l);
        let theta = &thetas[l - 1];
        let prior_shape = g.phi[l - 1].dot(theta);
        let mut m_next = vec![0u64; k_out];
        let mut weights = vec![0.0f64; k_out];
        for k in 0..k_in {
            let m = m_prev[k];
            if m == 0 {
                continue;
            }
            let shape = prior_shape[k].as_f64().max(1e-12);
            let x_up = crt_sample(m, T::of_f64(shape), rng);
            if x_up == 0 {
                continue;
            }
            let mut mass = 0.0;
            for k2 in 0..k_out {
                let w = (g.phi[l - 1][(k, k2)] * theta[k2]).as_f64();
                weights[k2] = w;
                mass += w;
            }
            if mass <= 0.0 {
                weights.iter_mut().for_each(|w| *w = 1.0);
                mass = k_out as f64;
            }
            let parts = multinomial_split_weights(x_up, &weights, mass, rng);
            for (k2, &p) in parts.iter().enumerate() {
                if p > 0 {
                    acc.word_topic[l - 1][(k, k2)] += p;
                    acc.topic_totals[l - 1][k2] += p;
                    m_next[k2] += p;
                }
            }
        }
        m_prev = m_next;
    }
    // top layer: CRT against r
    for (k, &m) in m_prev.iter().enumerate() {
        if m > 0 {
            let shape = g.r[k].max(T::of_f64(1e-12));
            acc.x_top[k] += crt_sample(m, shape, rng);
        }
    }
}

/// Allocate the observed tokens of a mini-batch into per-layer latent counts
/// given encoder θ samples. Document work is data-parallel; the integer
/// accumulators make the reduction order-independent, and each document owns
/// a derived noise stream, so results do not depend on thread count.
pub fn allocate_counts<T: Real>(
    docs: &[&[(u32, u32)]],
    thetas: &[Vec<Array1<T>>],
    g: &GlobalParams<T>,
    seed: u64,
    tag: &[u64],
) -> AugmentedCounts<T> {
    assert_eq!(docs.len(), thetas.len());
    let mut counts = docs
        .par_iter()
        .zip(thetas.par_iter())
        .enumerate()
        .fold(
            || AugmentedCounts::zeros(g),
            |mut acc, (i, (doc, theta))| {
                let mut tags = tag.to_vec();
                tags.push(0x616c_6c6f);
                tags.push(i as u64);
                let mut rng = RngStream::derived(seed, &tags);
                allocate_doc(doc, theta, g, &mut acc, &mut rng);
                acc
            },
        )
        .reduce(|| AugmentedCounts::zeros(g), AugmentedCounts::merge);
    let q = q_chain(g.depth(), g.hyper.c);
    counts.q_top = q[g.depth()] * T::of_usize(docs.len());
    counts
}

/// One preconditioned Langevin step of a topic column under the simplex
/// constraint, with the normal draws passed in explicitly:
///
///   φ ← [φ + (ε/M_k)((ρx̃ + η) − (ρx̃_· + ηV)φ) + √(2εφ/M_k)·ξ]_∠
pub fn phi_langevin_step<T: Real>(
    phi: &Array1<T>,
    x_col: &Array1<u64>,
    x_total: u64,
    eta: T,
    m_k: T,
    eps: T,
    rho: T,
    normals: &[f64],
) -> Array1<T> {
    let v = phi.len();
    assert_eq!(normals.len(), v);
    let vt = T::of_usize(v);
    let pull = rho * T::of_f64(x_total as f64) + eta * vt;
    let two = T::of_f64(2.0);
    let mut out = Array1::zeros(v);
    for i in 0..v {
        let drift = (eps / m_k) * (rho * T::of_f64(x_col[i] as f64) + eta - pull * phi[i]);
        let noise = (two * eps * phi[i] / m_k).max(T::zero()).sqrt() * T::of_f64(normals[i]);
        out[i] = phi[i] + drift + noise;
    }
    project_to_simplex(&mut out);
    out
}

/// Clamp negatives to zero and renormalize; an entirely non-positive column
/// resets to the uniform point.
fn project_to_simplex<T: Real>(v: &mut Array1<T>) {
    let zero = T::zero();
    v.mapv_inplace(|x| x.max(zero));
    let sum = v.sum();
    if sum > zero {
        v.mapv_inplace(|x| x / sum);
    } else {
        let u = T::of_usize(v.len()).recip();
        v.fill(u);
    }
}

/// Reflected Langevin step of the top-layer shapes:
///
///   r ← |r + (ε/M)[(ρx̃ + γ0/K_L) − r(c0 + ρq̃)] + √(2εr/M)·ξ|
pub fn r_langevin_step<T: Real>(
    r: &Array1<T>,
    x_top: &Array1<u64>,
    q_top: T,
    gamma0: T,
    c0: T,
    m_top: T,
    eps: T,
    rho: T,
    normals: &[f64],
) -> Array1<T> {
    let kl = T::of_usize(r.len());
    let two = T::of_f64(2.0);
    let mut out = Array1::zeros(r.len());
    for k in 0..r.len() {
        let drift = (eps / m_top)
            * ((rho * T::of_f64(x_top[k] as f64) + gamma0 / kl) - r[k] * (c0 + rho * q_top));
        let noise = (two * eps * r[k] / m_top).max(T::zero()).sqrt() * T::of_f64(normals[k]);
        out[k] = (r[k] + drift + noise).abs().max(T::of_f64(1e-300));
    }
    out
}

/// Full TLASGR update for one mini-batch: M annealing (ε' = ε_t), then every
/// Φ column, then r; advances the step counter.
pub fn tlasgr_update<T: Real>(
    g: &mut GlobalParams<T>,
    state: &mut SamplerState<T>,
    counts: &AugmentedCounts<T>,
    rho: T,
    rng: &mut RngStream,
) {
    state.ensure_init(counts, rho);
    let eps = state.step_size(state.t);
    state.update_m(counts, rho, eps);
    for l in 1..=g.depth() {
        let eta = g.hyper.eta[l - 1];
        let rows = g.shape.width(l - 1);
        for k in 0..g.shape.width(l) {
            let normals: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
            let col = g.phi[l - 1].column(k).to_owned();
            let x_col = counts.word_topic[l - 1].column(k).to_owned();
            let new = phi_langevin_step(
                &col,
                &x_col,
                counts.topic_totals[l - 1][k],
                eta,
                state.m[l - 1][k],
                eps,
                rho,
                &normals,
            );
            g.phi[l - 1].column_mut(k).assign(&new);
        }
    }
    let normals: Vec<f64> = (0..g.r.len()).map(|_| rng.normal()).collect();
    g.r = r_langevin_step(
        &g.r,
        &counts.x_top,
        counts.q_top,
        g.hyper.gamma0,
        g.hyper.c0,
        state.m_top,
        eps,
        rho,
        &normals,
    );
    state.t += 1;
    debug_assert_simplex(g);
}

/// Fisher information block for a topic column in the reduced-mean
/// parameterization (first V−1 coordinates):
/// I(φ_k) = M_k [diag(1/φ) + 11ᵀ/(1 − φ_·)].
pub fn fim_phi<T: Real>(phi_reduced: &Array1<T>, m_k: T) -> Array2<T> {
    let v = phi_reduced.len();
    let tail = T::one() - phi_reduced.sum();
    let mut out = Array2::from_elem((v, v), m_k / tail);
    for i in 0..v {
        out[(i, i)] += m_k / phi_reduced[i];
    }
    out
}

/// Closed-form inverse of [`fim_phi`]: M_k^{-1}[diag(φ) − φφᵀ].
pub fn fim_phi_inv<T: Real>(phi_reduced: &Array1<T>, m_k: T) -> Array2<T> {
    let v = phi_reduced.len();
    let mut out = Array2::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            let d = if i == j { phi_reduced[i] } else { T::zero() };
            out[(i, j)] = (d - phi_reduced[i] * phi_reduced[j]) / m_k;
        }
    }
    out
}

/// Fisher information block for r: M^(L+1) diag(1/r).
pub fn fim_r<T: Real>(r: &Array1<T>, m_top: T) -> Array2<T> {
    Array2::from_diag(&r.mapv(|x| m_top / x))
}

/// Γ_v(φ_k) = (1 − Vφ_v)/M_k on the reduced coordinates, where V is the full
/// column dimension.
pub fn gamma_correction_phi<T: Real>(phi_reduced: &Array1<T>, m_k: T) -> Array1<T> {
    let v_full = T::of_usize(phi_reduced.len() + 1);
    phi_reduced.mapv(|p| (T::one() - v_full * p) / m_k)
}

/// Γ_k(r) = 1/M^(L+1) for every k.
pub fn gamma_correction_r<T: Real>(m_top: T) -> T {
    m_top.recip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderHyper, NetworkShape};

    #[test]
    fn schedule_closed_forms_and_monotonicity() {
        let s = StepSchedule { a: 0.3, b: 500.0, c: 1.0 };
        assert_eq!(s.at(0), 0.3);
        assert!((s.at(500) - 0.15).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in (0..100_000).step_by(101) {
            let e = s.at(t);
            assert!(e > 0.0 && e <= prev);
            prev = e;
        }
    }

    #[test]
    fn q_chain_fixed_c_values() {
        let q = q_chain(3, 1.0f64);
        assert_eq!(q[0], 1.0);
        assert!((q[1] - (2.0f64).ln()).abs() < 1e-15);
        assert!((q[2] - (1.0 + q[1]).ln()).abs() < 1e-15);
        assert!((q[3] - (1.0 + q[2]).ln()).abs() < 1e-15);
    }

    fn toy(widths: Vec<usize>, vocab: usize, seed: u64) -> GlobalParams<f64> {
        let shape = NetworkShape::new(widths, vocab);
        let hyper = DecoderHyper::default_for(&shape);
        GlobalParams::init_random(shape, hyper, &mut RngStream::new(seed, 0))
    }

    #[test]
    fn zero_step_is_identity() {
        let g = toy(vec![3], 6, 1);
        let phi = g.phi[0].column(0).to_owned();
        let x_col = Array1::from_vec(vec![4u64, 0, 1, 9, 2, 2]);
        let normals = vec![0.7; 6];
        let out = phi_langevin_step(&phi, &x_col, 18, 0.1, 2.0, 0.0, 3.0, &normals);
        for v in 0..6 {
            assert!((out[v] - phi[v]).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_point_is_stationary_without_noise() {
        // φ* = (ρx̃+η)/(ρx̃_·+ηV) is unchanged by a noise-free step
        let x_col = Array1::from_vec(vec![4u64, 0, 1, 9]);
        let (rho, eta) = (7.0, 0.25);
        let x_total: u64 = x_col.sum();
        let denom = rho * x_total as f64 + eta * 4.0;
        let phi = x_col.mapv(|x| (rho * x as f64 + eta) / denom);
        let out = phi_langevin_step(&phi, &x_col, x_total, eta, 1.3, 0.05, rho, &[0.0; 4]);
        for v in 0..4 {
            assert!((out[v] - phi[v]).abs() < 1e-14);
        }
    }

    #[test]
    fn updates_preserve_simplex_invariant() {
        let mut rng = RngStream::new(11, 0);
        let mut phi = Array1::from_vec(vec![0.2, 0.5, 0.3]);
        let x_col = Array1::from_vec(vec![30u64, 1, 12]);
        for i in 0..10_000 {
            let normals: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let eps = 0.05 / (1.0 + i as f64 / 100.0);
            phi = phi_langevin_step(&phi, &x_col, 43, 0.1, 0.8, eps, 5.0, &normals);
            assert!(phi.iter().all(|&x| x >= 0.0));
            assert!((phi.sum() - 1.0).abs() < 1e-9, "sum {}", phi.sum());
        }
    }

    #[test]
    fn r_update_closed_forms_and_positivity() {
        let r = Array1::from_vec(vec![0.5, 2.0]);
        let x_top = Array1::from_vec(vec![3u64, 8]);
        // ε = 0 leaves r unchanged
        let out = r_langevin_step(&r, &x_top, 1.4, 1.0, 1.0, 2.0, 0.0, 3.0, &[0.4, 0.4]);
        assert_eq!(out, r);
        // noise-free fixed point r* = (ρx̃+γ0/K)/(c0+ρq̃)
        let (rho, q, g0, c0) = (3.0, 1.4, 1.0, 1.0);
        let rstar = x_top.mapv(|x| (rho * x as f64 + g0 / 2.0) / (c0 + rho * q));
        let out = r_langevin_step(&rstar, &x_top, q, g0, c0, 2.0, 0.07, rho, &[0.0, 0.0]);
        for k in 0..2 {
            assert!((out[k] - rstar[k]).abs() < 1e-14);
        }
        // positivity across noisy updates
        let mut rng = RngStream::new(13, 0);
        let mut r = Array1::from_vec(vec![1e-4, 5.0]);
        for _ in 0..10_000 {
            let normals: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            r = r_langevin_step(&r, &x_top, q, g0, c0, 0.4, 0.05, rho, &normals);
            assert!(r.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn m_update_is_an_exponential_average() {
        let g = toy(vec![2], 4, 3);
        let mut state: SamplerState<f64> = SamplerState::new(&[2], StepSchedule::default(), 1e-3);
        let counts = AugmentedCounts {
            word_topic: vec![Array2::zeros((4, 2))],
            topic_totals: vec![Array1::from_vec(vec![10u64, 4])],
            x_top: Array1::zeros(2),
            q_top: 1.0,
        };
        let _ = &g;
        state.ensure_init(&counts, 2.0);
        assert_eq!(state.m[0][0], 20.0);
        // ε' = 0 leaves M unchanged; ε' = 1 jumps to the batch statistic
        state.update_m(&counts, 3.0, 0.0);
        assert_eq!(state.m[0][0], 20.0);
        state.update_m(&counts, 3.0, 1.0);
        assert_eq!(state.m[0][0], 30.0);
        assert_eq!(state.m_top, 3.0);
        // constant input converges geometrically to ρ·s
        for _ in 0..400 {
            state.update_m(&counts, 5.0, 0.1);
        }
        assert!((state.m[0][0] - 50.0).abs() < 1e-10);
        assert!((state.m[0][1] - 20.0).abs() < 1e-10);
    }

    #[test]
    fn allocation_single_topic_collects_everything() {
        let mut g = toy(vec![1], 4, 5);
        g.phi[0] = Array2::from_shape_vec((4, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let docs: Vec<&[(u32, u32)]> = vec![&[(0, 2), (3, 5)], &[(1, 1)]];
        let thetas = vec![
            vec![Array1::from_vec(vec![0.7])],
            vec![Array1::from_vec(vec![2.0])],
        ];
        let counts = allocate_counts(&docs, &thetas, &g, 1, &[0]);
        assert_eq!(counts.topic_totals[0][0], 8);
        assert_eq!(counts.word_topic[0][(0, 0)], 2);
        assert_eq!(counts.word_topic[0][(3, 0)], 5);
        assert_eq!(counts.word_topic[0][(1, 0)], 1);
        // q̃ = batch_size · ln 2 under c = 1
        assert!((counts.q_top - 2.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn allocation_conserves_tokens_at_layer_one() {
        let g = toy(vec![5, 3], 12, 6);
        let mut rng = RngStream::new(21, 0);
        let docs_owned: Vec<Vec<(u32, u32)>> = (0..8)
            .map(|_| {
                (0..12)
                    .filter_map(|v| {
                        let c = rng.gen_range(4) as u32;
                        (c > 0).then_some((v as u32, c))
                    })
                    .collect()
            })
            .collect();
        let docs: Vec<&[(u32, u32)]> = docs_owned.iter().map(|d| d.as_slice()).collect();
        let thetas: Vec<Vec<Array1<f64>>> = (0..8)
            .map(|_| {
                vec![
                    Array1::from_shape_fn(5, |_| rng.open_uniform() + 0.1),
                    Array1::from_shape_fn(3, |_| rng.open_uniform() + 0.1),
                ]
            })
            .collect();
        let counts = allocate_counts(&docs, &thetas, &g, 77, &[1]);
        let total: u64 = docs_owned
            .iter()
            .flat_map(|d| d.iter().map(|&(_, c)| c as u64))
            .sum();
        assert_eq!(counts.word_topic[0].sum(), total);
        // per-term conservation
        for v in 0..12 {
            let want: u64 = docs_owned
                .iter()
                .flat_map(|d| d.iter())
                .filter(|&&(t, _)| t as usize == v)
                .map(|&(_, c)| c as u64)
                .sum();
            let got: u64 = counts.word_topic[0].row(v).sum();
            assert_eq!(got, want, "term {v}");
        }
        // deeper layers shrink: CRT tables never exceed customers
        assert!(counts.word_topic[1].sum() <= total);
        assert!(counts.x_top.sum() <= counts.word_topic[1].sum());
    }

    #[test]
    fn allocation_is_thread_count_invariant() {
        let g = toy(vec![4, 2], 9, 7);
        let mut rng = RngStream::new(30, 0);
        let docs_owned: Vec<Vec<(u32, u32)>> = (0..30)
            .map(|_| (0..9).map(|v| (v as u32, 1 + rng.gen_range(3) as u32)).collect())
            .collect();
        let docs: Vec<&[(u32, u32)]> = docs_owned.iter().map(|d| d.as_slice()).collect();
        let thetas: Vec<Vec<Array1<f64>>> = (0..30)
            .map(|_| {
                vec![
                    Array1::from_shape_fn(4, |_| rng.open_uniform()),
                    Array1::from_shape_fn(2, |_| rng.open_uniform()),
                ]
            })
            .collect();
        let a = allocate_counts(&docs, &thetas, &g, 5, &[9]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| allocate_counts(&docs, &thetas, &g, 5, &[9]));
        assert_eq!(a.word_topic, b.word_topic);
        assert_eq!(a.x_top, b.x_top);
    }

    #[test]
    fn two_topic_allocation_matches_enumerated_expectation() {
        // Single term with count 2 split across two topics: exact expected
        // allocation is 2·w_k/(w_1+w_2); empirical mean within 3 SE.
        let mut g = toy(vec![2], 1, 8);
        g.phi[0] = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let theta = vec![Array1::from_vec(vec![0.3, 0.9])];
        let doc: &[(u32, u32)] = &[(0, 2)];
        let reps = 10_000;
        let mut sum0 = 0.0;
        for i in 0..reps {
            let counts = allocate_counts(&[doc], std::slice::from_ref(&theta), &g, 99, &[i]);
            sum0 += counts.word_topic[0][(0, 0)] as f64;
        }
        let mean = sum0 / reps as f64;
        let p = 0.3 / 1.2;
        let want = 2.0 * p;
        let se = (2.0 * p * (1.0 - p) / reps as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn fim_product_is_identity_and_corrections_match() {
        let mut rng = RngStream::new(44, 0);
        for _ in 0..20 {
            let v = 6;
            let full = crate::dist::dirichlet_sample(&vec![1.0; v], &mut rng);
            let reduced = Array1::from_vec(full[..v - 1].to_vec());
            let m_k = 0.5 + rng.open_uniform() * 4.0;
            let fim = fim_phi(&reduced, m_k);
            let inv = fim_phi_inv(&reduced, m_k);
            let prod = fim.dot(&inv);
            for i in 0..v - 1 {
                for j in 0..v - 1 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[(i, j)] - want).abs() < 1e-8, "({i},{j}) {}", prod[(i, j)]);
                }
            }
        }
        // uniform column zeroes the correction
        let v = 5;
        let uniform = Array1::from_elem(v - 1, 1.0 / v as f64);
        let c = gamma_correction_phi(&uniform, 2.0);
        assert!(c.iter().all(|&x| x.abs() < 1e-15));
        assert_eq!(gamma_correction_r(4.0f64), 0.25);
        let r = Array1::from_vec(vec![2.0, 0.5]);
        let f = fim_r(&r, 3.0);
        assert_eq!(f[(0, 0)], 1.5);
        assert_eq!(f[(1, 1)], 6.0);
        assert_eq!(f[(0, 1)], 0.0);
    }

    #[test]
    fn tlasgr_update_keeps_invariants_and_advances() {
        let mut g = toy(vec![3, 2], 7, 9);
        let mut state = SamplerState::new(&[3, 2], StepSchedule::default(), 1e-3);
        let mut rng = RngStream::new(50, 0);
        let docs_owned: Vec<Vec<(u32, u32)>> =
            (0..6).map(|d| vec![((d % 7) as u32, 3u32), (((d + 2) % 7) as u32, 1)]).collect();
        let docs: Vec<&[(u32, u32)]> = docs_owned.iter().map(|d| d.as_slice()).collect();
        for it in 0..50 {
            let thetas: Vec<Vec<Array1<f64>>> = (0..6)
                .map(|_| {
                    vec![
                        Array1::from_shape_fn(3, |_| rng.open_uniform() * 2.0),
                        Array1::from_shape_fn(2, |_| rng.open_uniform() * 2.0),
                    ]
                })
                .collect();
            let counts = allocate_counts(&docs, &thetas, &g, 7, &[it]);
            tlasgr_update(&mut g, &mut state, &counts, 1.0, &mut rng);
        }
        assert_eq!(state.t, 50);
        assert!(g.columns_on_simplex(1e-9));
        assert!(g.r.iter().all(|&x| x > 0.0));
        assert!(state.m.iter().all(|m| m.iter().all(|&x| x >= 1e-3)));
    }
}
