//! Small-scale batch Gibbs chain used as a correctness oracle on tiny
//! corpora: upward count augmentation through multinomial splits and CRT
//! draws, downward gamma resampling of θ, and conjugate Φ/r refreshes.
//! Single-threaded by design.

use crate::corpus::{Corpus, HeldoutSplit};
use crate::decoder::GlobalParams;
use crate::dist::{crt_sample, dirichlet_sample, gamma_sample, GammaParams};
use crate::eval::{EvalError, PerplexityAccum};
use crate::real::Real;
use crate::rng::RngStream;
use crate::sampler::q_chain;
use ndarray::{Array1, Array2};

/// Per-document latent topic weights for every layer (thetas[l-1] is
/// K_l × N) plus the deterministic p/q chains under the fixed scale policy.
#[derive(Debug, Clone)]
pub struct GibbsState<T> {
    pub thetas: Vec<Array2<T>>,
    pub q: Vec<T>,
}

impl<T: Real> GibbsState<T> {
    /// θ initialized from unit-mean gamma draws.
    pub fn init(g: &GlobalParams<T>, num_docs: usize, rng: &mut RngStream) -> Self {
        let thetas = (1..=g.depth())
            .map(|l| {
                Array2::from_shape_fn((g.shape.width(l), num_docs), |_| {
                    gamma_sample(
                        GammaParams {
                            shape: T::one(),
                            rate: T::one(),
                        },
                        rng,
                    )
                })
            })
            .collect();
        GibbsState {
            thetas,
            q: q_chain(g.depth(), g.hyper.c),
        }
    }
}

fn split_weights<T: Real>(
    phi_row: ndarray::ArrayView1<'_, T>,
    theta: ndarray::ArrayView1<'_, T>,
    weights: &mut [f64],
) -> f64 {
    let mut mass = 0.0;
    for (k, w) in weights.iter_mut().enumerate() {
        *w = (phi_row[k] * theta[k]).as_f64();
        mass += *w;
    }
    if mass <= 0.0 {
        weights.iter_mut().for_each(|w| *w = 1.0);
        mass = weights.len() as f64;
    }
    mass
}

/// One full sweep: upward counts, downward θ, then conjugate draws of every
/// Φ column and of r. Mutates the globals in place and returns the per-layer
/// allocated word-topic tables (used by conservation checks).
pub fn gibbs_sweep<T: Real>(
    state: &mut GibbsState<T>,
    corpus: &Corpus,
    g: &mut GlobalParams<T>,
    rng: &mut RngStream,
) -> Vec<Array2<u64>> {
    let depth = g.depth();
    let n_docs = corpus.num_docs();
    let q = &state.q;
    let tiny = T::of_f64(1e-12);

    // upward pass
    let mut word_topic: Vec<Array2<u64>> = (1..=depth)
        .map(|l| Array2::zeros((g.shape.width(l - 1), g.shape.width(l))))
        .collect();
    // m[l-1][(k, n)] = m^{(l)(l+1)}_{kn}
    let mut m: Vec<Array2<u64>> = (1..=depth)
        .map(|l| Array2::zeros((g.shape.width(l), n_docs)))
        .collect();
    let mut x_top: Array1<u64> = Array1::zeros(g.shape.width(depth));

    for n in 0..n_docs {
        let k1 = g.shape.width(1);
        let mut weights = vec![0.0; k1];
        for &(term, count) in corpus.doc(n) {
            let v = term as usize;
            let mass = split_weights(g.phi[0].row(v), state.thetas[0].column(n), &mut weights);
            let parts =
                crate::dist::sample::multinomial_split_weights(count as u64, &weights, mass, rng);
            for (k, &p) in parts.iter().enumerate() {
                if p > 0 {
                    word_topic[0][(v, k)] += p;
                    m[0][(k, n)] += p;
                }
            }
        }
        for l in 2..=depth {
            let k_in = g.shape.width(l - 1);
            let k_out = g.shape.width(l);
            let prior_shape = g.phi[l - 1].dot(&state.thetas[l - 1].column(n).to_owned());
            let mut weights = vec![0.0; k_out];
            for k in 0..k_in {
                let customers = m[l - 2][(k, n)];
                if customers == 0 {
                    continue;
                }
                let tables = crt_sample(customers, prior_shape[k].max(tiny), rng);
                if tables == 0 {
                    continue;
                }
                let mass =
                    split_weights(g.phi[l - 1].row(k), state.thetas[l - 1].column(n), &mut weights);
                let parts =
                    crate::dist::sample::multinomial_split_weights(tables, &weights, mass, rng);
                for (k2, &p) in parts.iter().enumerate() {
                    if p > 0 {
                        word_topic[l - 1][(k, k2)] += p;
                        m[l - 1][(k2, n)] += p;
                    }
                }
            }
        }
        for k in 0..g.shape.width(depth) {
            let customers = m[depth - 1][(k, n)];
            if customers > 0 {
                x_top[k] += crt_sample(customers, g.r[k].max(tiny), rng);
            }
        }
    }

    // downward pass: θ^(l) | − ~ Gamma(m + prior shape, 1/(c + q^(l)))
    for l in (1..=depth).rev() {
        let rate = g.hyper.c + q[l - 1];
        for n in 0..n_docs {
            let prior_shape: Array1<T> = if l == depth {
                g.r.clone()
            } else {
                g.phi[l].dot(&state.thetas[l].column(n).to_owned())
            };
            for k in 0..g.shape.width(l) {
                let shape = (prior_shape[k] + T::of_f64(m[l - 1][(k, n)] as f64)).max(tiny);
                state.thetas[l - 1][(k, n)] = gamma_sample(GammaParams { shape, rate }, rng);
            }
        }
    }

    // conjugate refresh of the globals
    for l in 1..=depth {
        let eta = g.hyper.eta[l - 1];
        let rows = g.shape.width(l - 1);
        for k in 0..g.shape.width(l) {
            let conc: Vec<T> = (0..rows)
                .map(|v| eta + T::of_f64(word_topic[l - 1][(v, k)] as f64))
                .collect();
            let col = dirichlet_sample(&conc, rng);
            for v in 0..rows {
                g.phi[l - 1][(v, k)] = col[v];
            }
        }
    }
    let k_top = g.shape.width(depth);
    let q_sum = q[depth] * T::of_usize(n_docs);
    for k in 0..k_top {
        let shape = g.hyper.gamma0 / T::of_usize(k_top) + T::of_f64(x_top[k] as f64);
        let rate = g.hyper.c0 + q_sum;
        g.r[k] = gamma_sample(
            GammaParams {
                shape: shape.max(tiny),
                rate,
            },
            rng,
        );
    }
    word_topic
}

/// Test-time latent inference for a single document with the globals held
/// fixed: the iterative per-document path that the encoder replaces.
/// Returns the final θ^(1..L) draws.
pub fn gibbs_infer_doc<T: Real>(
    doc: &[(u32, u32)],
    g: &GlobalParams<T>,
    sweeps: usize,
    rng: &mut RngStream,
) -> Vec<Array1<T>> {
    let depth = g.depth();
    let q = q_chain(depth, g.hyper.c);
    let tiny = T::of_f64(1e-12);
    let mut thetas: Vec<Array1<T>> = (1..=depth)
        .map(|l| {
            Array1::from_shape_fn(g.shape.width(l), |_| {
                gamma_sample(
                    GammaParams {
                        shape: T::one(),
                        rate: T::one(),
                    },
                    rng,
                )
            })
        })
        .collect();
    for _ in 0..sweeps {
        // upward counts for this document
        let mut m: Vec<Vec<u64>> = (1..=depth).map(|l| vec![0u64; g.shape.width(l)]).collect();
        let k1 = g.shape.width(1);
        let mut weights = vec![0.0; k1];
        for &(term, count) in doc {
            let v = term as usize;
            let mass = split_weights(g.phi[0].row(v), thetas[0].view(), &mut weights);
            let parts =
                crate::dist::sample::multinomial_split_weights(count as u64, &weights, mass, rng);
            for (k, &p) in parts.iter().enumerate() {
                m[0][k] += p;
            }
        }
        for l in 2..=depth {
            let k_out = g.shape.width(l);
            let prior_shape = g.phi[l - 1].dot(&thetas[l - 1]);
            let mut weights = vec![0.0; k_out];
            for k in 0..g.shape.width(l - 1) {
                let customers = m[l - 2][k];
                if customers == 0 {
                    continue;
                }
                let tables = crt_sample(customers, prior_shape[k].max(tiny), rng);
                if tables == 0 {
                    continue;
                }
                let mass = split_weights(g.phi[l - 1].row(k), thetas[l - 1].view(), &mut weights);
                let parts =
                    crate::dist::sample::multinomial_split_weights(tables, &weights, mass, rng);
                for (k2, &p) in parts.iter().enumerate() {
                    m[l - 1][k2] += p;
                }
            }
        }
        // downward θ
        for l in (1..=depth).rev() {
            let rate = g.hyper.c + q[l - 1];
            let prior_shape: Array1<T> = if l == depth {
                g.r.clone()
            } else {
                g.phi[l].dot(&thetas[l])
            };
            for k in 0..g.shape.width(l) {
                let shape = (prior_shape[k] + T::of_f64(m[l - 1][k] as f64)).max(tiny);
                thetas[l - 1][k] = gamma_sample(GammaParams { shape, rate }, rng);
            }
        }
    }
    thetas
}

/// Train a Gibbs chain on the training half of a split and evaluate the
/// same per-heldout-word perplexity as the encoder path, using the chain's
/// own (Φ^(1), θ^(1)) samples collected after burn-in.
pub fn gibbs_perplexity<T: Real>(
    split: &HeldoutSplit,
    g_init: &GlobalParams<T>,
    sweeps: usize,
    burn_in: usize,
    rng: &mut RngStream,
) -> Result<f64, EvalError> {
    assert!(burn_in < sweeps);
    let mut g = g_init.clone();
    let mut state = GibbsState::init(&g, split.train.num_docs(), rng);
    let mut accum = PerplexityAccum::new(&split.test)?;
    for sweep in 0..sweeps {
        gibbs_sweep(&mut state, &split.train, &mut g, rng);
        if sweep >= burn_in {
            let theta1 = &state.thetas[0];
            let provider = |n: usize| theta1.column(n).to_owned();
            accum.absorb(&g.phi[0], &provider);
        }
    }
    Ok(accum.finish())
}
