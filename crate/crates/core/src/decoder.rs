//! The generative model: a stack of gamma-distributed topic-weight layers
//! whose shapes are linear maps of the layer above, emitting word counts
//! through a Poisson likelihood.

use crate::dist::{dirichlet_sample, gamma_sample, lgamma, poisson_sample, GammaParams};
use crate::corpus::Corpus;
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array1, Array2};

/// Rate floor applied before taking logarithms of Poisson intensities.
pub const RATE_FLOOR: f64 = 1e-10;

/// Layer widths `[K_1, ..., K_L]` (layer 1 nearest the data) over a
/// vocabulary of size `V = K_0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    pub widths: Vec<usize>,
    pub vocab_size: usize,
}

impl NetworkShape {
    pub fn new(widths: Vec<usize>, vocab_size: usize) -> Self {
        assert!(!widths.is_empty(), "at least one hidden layer required");
        assert!(widths.iter().all(|&k| k >= 1));
        assert!(vocab_size >= 1);
        NetworkShape { widths, vocab_size }
    }

    /// Number of hidden layers L.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// K_l for l in 0..=L, where K_0 is the vocabulary size.
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.vocab_size
        } else {
            self.widths[l - 1]
        }
    }
}

/// Model hyperparameters: Dirichlet concentrations η^(l), the top-layer
/// gamma-negative-binomial prior (γ_0, c_0), and the fixed gamma scale
/// policy c (all c_n^(l) share it).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHyper<T> {
    pub eta: Vec<T>,
    pub gamma0: T,
    pub c0: T,
    pub c: T,
}

impl<T: Real> DecoderHyper<T> {
    /// η^(l) = 1/K_l, γ_0 = c_0 = c = 1.
    pub fn default_for(shape: &NetworkShape) -> Self {
        DecoderHyper {
            eta: shape
                .widths
                .iter()
                .map(|&k| T::of_usize(k).recip())
                .collect(),
            gamma0: T::one(),
            c0: T::one(),
            c: T::one(),
        }
    }
}

/// Per-layer column-stochastic topic matrices Φ^(l) and the top-layer gamma
/// shapes r, plus hyperparameters.
#[derive(Debug, Clone)]
pub struct GlobalParams<T> {
    pub shape: NetworkShape,
    /// phi[l-1] is Φ^(l) with shape (K_{l-1}, K_l).
    pub phi: Vec<Array2<T>>,
    pub r: Array1<T>,
    pub hyper: DecoderHyper<T>,
}

impl<T: Real> GlobalParams<T> {
    /// Columns drawn from a symmetric Dirichlet(1); r initialized to ones.
    pub fn init_random(shape: NetworkShape, hyper: DecoderHyper<T>, rng: &mut RngStream) -> Self {
        let mut phi = Vec::with_capacity(shape.depth());
        for l in 1..=shape.depth() {
            let rows = shape.width(l - 1);
            let cols = shape.width(l);
            let mut m = Array2::zeros((rows, cols));
            let conc = vec![T::one(); rows];
            for k in 0..cols {
                let col = dirichlet_sample(&conc, rng);
                for v in 0..rows {
                    m[(v, k)] = col[v];
                }
            }
            phi.push(m);
        }
        let r = Array1::from_elem(shape.width(shape.depth()), T::one());
        GlobalParams {
            shape,
            phi,
            r,
            hyper,
        }
    }

    pub fn depth(&self) -> usize {
        self.shape.depth()
    }

    /// Project topic k of layer l down to the word simplex:
    /// [∏_{t=1}^{l−1} Φ^(t)] φ_k^(l), renormalized. Layer 1 columns are
    /// returned unchanged.
    pub fn project_topic(&self, layer: usize, k: usize) -> Array1<T> {
        assert!(layer >= 1 && layer <= self.depth(), "layer {layer} out of range");
        assert!(k < self.shape.width(layer), "topic {k} out of range");
        let mut v = self.phi[layer - 1].column(k).to_owned();
        if layer == 1 {
            return v;
        }
        for t in (1..layer).rev() {
            v = self.phi[t - 1].dot(&v);
        }
        let sum = v.sum();
        if sum > T::zero() {
            v.mapv_inplace(|x| x / sum);
        }
        v
    }

    /// Gamma shape of the conditional prior for layer l: Φ^(l+1) θ^(l+1)
    /// below the top, and r at the top layer.
    pub fn conditional_theta_shape(&self, theta_next: &Array1<T>, layer: usize) -> Array1<T> {
        assert!(layer >= 1 && layer <= self.depth());
        if layer == self.depth() {
            self.r.clone()
        } else {
            self.phi[layer].dot(theta_next)
        }
    }

    /// Log Poisson likelihood of a sparse count vector under rates Φ^(1) θ^(1),
    /// with rates floored at [`RATE_FLOOR`] before the logarithm.
    pub fn poisson_loglik(&self, doc: &[(u32, u32)], theta1: &Array1<T>) -> T {
        let rates = self.phi[0].dot(theta1);
        let floor = T::of_f64(RATE_FLOOR);
        let mut ll = -rates.sum();
        for &(term, count) in doc {
            let lam = rates[term as usize].max(floor);
            let c = T::of_f64(count as f64);
            ll += c * lam.ln() - lgamma(c + T::one());
        }
        ll
    }

    /// Ancestral sampling: draws per-document latents top-down and emits
    /// Poisson counts. Returns the corpus and the true θ^(l) records
    /// (outermost index: document; inner: layer 1..=L).
    pub fn generate_synthetic(
        &self,
        num_docs: usize,
        rng: &mut RngStream,
    ) -> (Corpus, Vec<Vec<Array1<f64>>>) {
        let depth = self.depth();
        let scale_rate = self.hyper.c;
        let mut docs = Vec::with_capacity(num_docs);
        let mut truths = Vec::with_capacity(num_docs);
        for _ in 0..num_docs {
            let mut thetas: Vec<Array1<T>> = vec![Array1::zeros(0); depth];
            for l in (1..=depth).rev() {
                let shape_vec = if l == depth {
                    self.r.clone()
                } else {
                    self.phi[l].dot(&thetas[l])
                };
                let mut theta = Array1::zeros(self.shape.width(l));
                for (k, &s) in shape_vec.iter().enumerate() {
                    theta[k] = if s.as_f64() > 1e-12 {
                        gamma_sample(
                            GammaParams {
                                shape: s,
                                rate: scale_rate,
                            },
                            rng,
                        )
                    } else {
                        T::zero()
                    };
                }
                thetas[l - 1] = theta;
            }
            let rates = self.phi[0].dot(&thetas[0]);
            let mut doc = Vec::new();
            for (v, &lam) in rates.iter().enumerate() {
                let x = poisson_sample(lam.as_f64(), rng);
                if x > 0 {
                    doc.push((v as u32, x as u32));
                }
            }
            docs.push(doc);
            truths.push(
                thetas
                    .iter()
                    .map(|t| t.mapv(|x| x.as_f64()))
                    .collect::<Vec<_>>(),
            );
        }
        (Corpus::from_docs(docs, self.shape.vocab_size), truths)
    }

    /// Check the column-simplex invariant on every Φ^(l).
    pub fn columns_on_simplex(&self, tol: f64) -> bool {
        self.phi.iter().all(|m| {
            (0..m.ncols()).all(|k| {
                let col = m.column(k);
                col.iter().all(|&x| x >= T::zero())
                    && (col.sum().as_f64() - 1.0).abs() <= tol
            })
        })
    }
}

/// Debug-build assertion of the column-simplex invariant, with the
/// tolerance scaled to the scalar's precision (1e-9 for f64).
pub fn debug_assert_simplex<T: Real>(g: &GlobalParams<T>) {
    let tol = (T::epsilon().as_f64() * 100.0).max(1e-9);
    debug_assert!(
        g.columns_on_simplex(tol),
        "a topic column left the simplex"
    );
}
