//! The Weibull upward-downward variational encoder: a deterministic upward
//! neural path producing per-layer Weibull parameters, a stochastic downward
//! pass that augments each layer's shape with Φ^(l+1)θ^(l+1), the evidence
//! lower bound, and exact hand-derived gradients through the Weibull (or
//! rejection-sampler gamma) reparameterization.

use crate::decoder::{GlobalParams, RATE_FLOOR};
use crate::dist::{
    gamma_from_noise, gamma_gamma_kl, gamma_gamma_kl_grad, gamma_reparam_grad,
    gamma_sample_reparam, sigmoid, softplus, softplus_inv, weibull_gamma_kl,
    weibull_gamma_kl_grad, weibull_sample, GammaNoise, GammaParams, WeibullParams,
    WEIBULL_SHAPE_FLOOR,
};
use crate::opt::{AdamCfg, AdamSlot};
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use std::str::FromStr;

/// Floor applied to prior gamma shapes and head outputs before they enter
/// logs and divisions.
const SHAPE_FLOOR: f64 = 1e-10;

/// Documents per parallel gradient chunk; chunk boundaries are fixed by
/// index and chunk results are reduced in order, so sums are bit-identical
/// for any thread count.
pub(crate) const GRAD_CHUNK: usize = 8;

/// Inference-network flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Weibull posterior, stochastic downward shape augmentation, TLASGR
    /// globals.
    Whai,
    /// As WHAI but globals learned by SGD on softmax logits.
    Wai,
    /// Gamma posterior with rejection-sampler reparameterization.
    Ghai,
    /// Weibull posterior without the downward connections.
    Iwhai,
}

impl Variant {
    /// Whether θ^(l+1) feeds the layer-l posterior shape.
    pub fn downward(self) -> bool {
        !matches!(self, Variant::Iwhai)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Whai => "whai",
            Variant::Wai => "wai",
            Variant::Ghai => "ghai",
            Variant::Iwhai => "iwhai",
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "whai" => Ok(Variant::Whai),
            "wai" => Ok(Variant::Wai),
            "ghai" => Ok(Variant::Ghai),
            "iwhai" => Ok(Variant::Iwhai),
            other => Err(format!("unknown variant {other:?} (expected whai|wai|ghai|iwhai)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeCfg {
    pub variant: Variant,
    /// Shape boost B for the rejection-sampler reparameterization.
    pub rsvi_b: u32,
}

/// Per-layer affine weights: the k head (w1, b1), the λ head (w2, b2), and
/// the upward transform (w3, b3).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub w3: Array2<T>,
    pub b3: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

fn glorot<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<T> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::of_f64((rng.uniform() * 2.0 - 1.0) * s))
}

impl<T: Real> EncoderParams<T> {
    /// Uniform ±√(6/(fan_in+fan_out)) weights; head biases start at
    /// softplus⁻¹(1) so the initial Weibull parameters sit near one.
    pub fn init(widths: &[usize], vocab_size: usize, rng: &mut RngStream) -> Self {
        let b0 = softplus_inv(T::one());
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &k) in widths.iter().enumerate() {
            let below = if i == 0 { vocab_size } else { widths[i - 1] };
            layers.push(LayerParams {
                w1: glorot(k, k, rng),
                b1: Array1::from_elem(k, b0),
                w2: glorot(k, k, rng),
                b2: Array1::from_elem(k, b0),
                w3: glorot(k, below, rng),
                b3: Array1::zeros(k),
            });
        }
        EncoderParams { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w1: Array2::zeros(l.w1.raw_dim()),
                    b1: Array1::zeros(l.b1.raw_dim()),
                    w2: Array2::zeros(l.w2.raw_dim()),
                    b2: Array1::zeros(l.b2.raw_dim()),
                    w3: Array2::zeros(l.w3.raw_dim()),
                    b3: Array1::zeros(l.b3.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
            a.w3 += &b.w3;
            a.b3 += &b.b3;
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.w1 *= s;
            l.b1 *= s;
            l.w2 *= s;
            l.b2 *= s;
            l.w3 *= s;
            l.b3 *= s;
        }
    }

    pub fn sq_norm(&self) -> T {
        let mut acc = T::zero();
        for l in &self.layers {
            acc += l.w1.iter().map(|&x| x * x).sum();
            acc += l.b1.iter().map(|&x| x * x).sum();
            acc += l.w2.iter().map(|&x| x * x).sum();
            acc += l.b2.iter().map(|&x| x * x).sum();
            acc += l.w3.iter().map(|&x| x * x).sum();
            acc += l.b3.iter().map(|&x| x * x).sum();
        }
        acc
    }

    /// Rescale in place so the global L2 norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: T) {
        let norm = self.sq_norm().sqrt();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
    }
}

/// Recorded reparameterization noise for one document.
#[derive(Debug, Clone)]
pub enum LayerNoise {
    /// One uniform (0,1) draw per unit.
    Uniform(Vec<f64>),
    /// Accepted rejection-sampler noise per unit.
    Gamma(Vec<GammaNoise>),
}

#[derive(Debug, Clone)]
pub struct DocNoise {
    pub layers: Vec<LayerNoise>,
}

/// Pre-draw the uniform noise for the Weibull variants.
pub fn draw_uniform_noise(widths: &[usize], rng: &mut RngStream) -> DocNoise {
    DocNoise {
        layers: widths
            .iter()
            .map(|&k| LayerNoise::Uniform((0..k).map(|_| rng.open_uniform()).collect()))
            .collect(),
    }
}

pub enum NoiseSpec<'a> {
    Draw(&'a mut RngStream),
    Replay(&'a DocNoise),
}

/// One encoded document: upward activations, per-layer Weibull parameters,
/// total (augmented) shapes, θ samples, and the noise that produced them.
#[derive(Debug, Clone)]
pub struct EncodedDoc<T> {
    /// h^(0)..h^(L).
    pub h: Vec<Array1<T>>,
    pub k_head: Vec<Array1<T>>,
    pub lam: Vec<Array1<T>>,
    /// k head plus Φ^(l+1)θ^(l+1) where the downward connection is active.
    pub k_total: Vec<Array1<T>>,
    pub theta: Vec<Array1<T>>,
    pub noise: DocNoise,
    pub(crate) a1: Vec<Array1<T>>,
    pub(crate) a2: Vec<Array1<T>>,
    pub(crate) a3: Vec<Array1<T>>,
}

fn bow_input<T: Real>(doc: &[(u32, u32)], vocab_size: usize) -> Array1<T> {
    let mut h0 = Array1::zeros(vocab_size);
    for &(term, count) in doc {
        h0[term as usize] = T::of_f64((1.0 + count as f64).ln());
    }
    h0
}

fn head<T: Real>(w: &Array2<T>, h: &Array1<T>, b: &Array1<T>) -> (Array1<T>, Array1<T>) {
    let a = w.dot(h) + b;
    let out = a.mapv(|x| softplus(x).max(T::of_f64(SHAPE_FLOOR)));
    (a, out)
}

/// Run the upward-downward pass. The upward path computes h^(1..L); the
/// downward path samples θ^(L) from Weibull(k^(L), λ^(L)) and then each
/// θ^(l) from Weibull(k^(l) + Φ^(l+1)θ^(l+1), λ^(l)) (shape augmentation
/// dropped under IWHAI; gamma posterior with the rejection-sampler path
/// under GHAI).
pub fn encode<T: Real>(
    doc: &[(u32, u32)],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cfg: EncodeCfg,
    mut spec: NoiseSpec<'_>,
) -> EncodedDoc<T> {
    let depth = enc.depth();
    let mut h = Vec::with_capacity(depth + 1);
    let mut a3 = Vec::with_capacity(depth);
    h.push(bow_input(doc, g.shape.vocab_size));
    for l in 1..=depth {
        let lp = &enc.layers[l - 1];
        let a = lp.w3.dot(&h[l - 1]) + &lp.b3;
        h.push(a.mapv(softplus));
        a3.push(a);
    }

    let zero1 = || vec![Array1::zeros(0); depth];
    let (mut k_head, mut lam, mut k_total, mut theta) = (zero1(), zero1(), zero1(), zero1());
    let mut a1 = zero1();
    let mut a2 = zero1();
    let mut noise_layers: Vec<LayerNoise> = (0..depth)
        .map(|_| LayerNoise::Uniform(Vec::new()))
        .collect();
    let floor = T::of_f64(WEIBULL_SHAPE_FLOOR);

    for l in (1..=depth).rev() {
        let lp = &enc.layers[l - 1];
        let (a1l, k) = head(&lp.w1, &h[l], &lp.b1);
        let (a2l, lm) = head(&lp.w2, &h[l], &lp.b2);
        let ktot = if l < depth && cfg.variant.downward() {
            let up = g.phi[l].dot(&theta[l]);
            (k.clone() + &up).mapv(|x| x.max(floor))
        } else {
            k.mapv(|x| x.max(floor))
        };
        let kl = ktot.len();
        let th: Array1<T> = match (&mut spec, cfg.variant) {
            (NoiseSpec::Draw(rng), Variant::Ghai) => {
                let mut samples = Array1::zeros(kl);
                let mut draws = Vec::with_capacity(kl);
                for j in 0..kl {
                    let shape = ktot[j];
                    let boost = if shape < T::one() { cfg.rsvi_b.max(1) } else { cfg.rsvi_b };
                    let (v, n) = gamma_sample_reparam(
                        GammaParams { shape, rate: lm[j].recip() },
                        boost,
                        rng,
                    );
                    samples[j] = v;
                    draws.push(n);
                }
                noise_layers[l - 1] = LayerNoise::Gamma(draws);
                samples
            }
            (NoiseSpec::Draw(rng), _) => {
                let eps: Vec<f64> = (0..kl).map(|_| rng.open_uniform()).collect();
                let th = Array1::from_shape_fn(kl, |j| {
                    weibull_sample(WeibullParams { shape: ktot[j], scale: lm[j] }, eps[j])
                });
                noise_layers[l - 1] = LayerNoise::Uniform(eps);
                th
            }
            (NoiseSpec::Replay(noise), Variant::Ghai) => {
                let LayerNoise::Gamma(draws) = &noise.layers[l - 1] else {
                    panic!("replayed noise kind does not match the GHAI variant");
                };
                Array1::from_shape_fn(kl, |j| {
                    gamma_from_noise(
                        GammaParams { shape: ktot[j], rate: lm[j].recip() },
                        &draws[j],
                    )
                })
            }
            (NoiseSpec::Replay(noise), _) => {
                let LayerNoise::Uniform(eps) = &noise.layers[l - 1] else {
                    panic!("replayed noise kind does not match a Weibull variant");
                };
                Array1::from_shape_fn(kl, |j| {
                    weibull_sample(WeibullParams { shape: ktot[j], scale: lm[j] }, eps[j])
                })
            }
        };
        assert!(
            th.iter().all(|x| x.is_finite()),
            "non-finite θ at layer {l}"
        );
        a1[l - 1] = a1l;
        a2[l - 1] = a2l;
        k_head[l - 1] = k;
        lam[l - 1] = lm;
        k_total[l - 1] = ktot;
        theta[l - 1] = th;
    }
    if let NoiseSpec::Replay(noise) = &spec {
        noise_layers = noise.layers.clone();
    }
    EncodedDoc {
        h,
        k_head,
        lam,
        k_total,
        theta,
        noise: DocNoise { layers: noise_layers },
        a1,
        a2,
        a3,
    }
}

/// Deterministic downward pass for evaluation: θ is replaced by the
/// variational mean at every layer (λΓ(1+1/k) for Weibull, kλ for GHAI).
pub fn encode_mean<T: Real>(
    doc: &[(u32, u32)],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cfg: EncodeCfg,
) -> Vec<Array1<T>> {
    let depth = enc.depth();
    let mut h = bow_input(doc, g.shape.vocab_size);
    let mut hs = Vec::with_capacity(depth);
    for l in 1..=depth {
        let lp = &enc.layers[l - 1];
        h = (lp.w3.dot(&h) + &lp.b3).mapv(softplus);
        hs.push(h.clone());
    }
    let floor = T::of_f64(WEIBULL_SHAPE_FLOOR);
    let mut theta: Vec<Array1<T>> = vec![Array1::zeros(0); depth];
    for l in (1..=depth).rev() {
        let lp = &enc.layers[l - 1];
        let (_, k) = head(&lp.w1, &hs[l - 1], &lp.b1);
        let (_, lm) = head(&lp.w2, &hs[l - 1], &lp.b2);
        let ktot = if l < depth && cfg.variant.downward() {
            (k + &g.phi[l].dot(&theta[l])).mapv(|x| x.max(floor))
        } else {
            k.mapv(|x| x.max(floor))
        };
        theta[l - 1] = match cfg.variant {
            Variant::Ghai => Array1::from_shape_fn(ktot.len(), |j| ktot[j] * lm[j]),
            _ => Array1::from_shape_fn(ktot.len(), |j| {
                WeibullParams { shape: ktot[j], scale: lm[j] }.mean()
            }),
        };
    }
    theta
}

/// ELBO value and per-term breakdown, scaled by ρ to estimate the full
/// corpus objective from a mini-batch.
#[derive(Debug, Clone)]
pub struct ElboBreakdown<T> {
    pub total: T,
    pub recon: T,
    /// KL(q || p) per layer, each ≥ 0.
    pub kl: Vec<T>,
}

fn prior_shape<T: Real>(g: &GlobalParams<T>, enc_doc: &EncodedDoc<T>, l: usize) -> Array1<T> {
    let depth = enc_doc.theta.len();
    let floor = T::of_f64(SHAPE_FLOOR);
    if l == depth {
        g.r.mapv(|x| x.max(floor))
    } else {
        g.phi[l].dot(&enc_doc.theta[l]).mapv(|x| x.max(floor))
    }
}

/// Per-document ELBO terms from an encoded document: the Poisson
/// reconstruction under one θ sample and the analytic per-layer KL
/// against Gamma(prior shape, rate c).
pub fn elbo_doc<T: Real>(
    doc: &[(u32, u32)],
    enc_doc: &EncodedDoc<T>,
    g: &GlobalParams<T>,
    variant: Variant,
) -> (T, Vec<T>) {
    let depth = enc_doc.theta.len();
    let recon = g.poisson_loglik(doc, &enc_doc.theta[0]);
    let c = g.hyper.c;
    let mut kls = Vec::with_capacity(depth);
    for l in 1..=depth {
        let alpha = prior_shape(g, enc_doc, l);
        let mut kl = T::zero();
        for j in 0..alpha.len() {
            let p = GammaParams { shape: alpha[j], rate: c };
            kl += match variant {
                Variant::Ghai => gamma_gamma_kl(
                    GammaParams {
                        shape: enc_doc.k_total[l - 1][j],
                        rate: enc_doc.lam[l - 1][j].recip(),
                    },
                    p,
                ),
                _ => weibull_gamma_kl(
                    WeibullParams {
                        shape: enc_doc.k_total[l - 1][j],
                        scale: enc_doc.lam[l - 1][j],
                    },
                    p,
                ),
            };
        }
        kls.push(kl);
    }
    (recon, kls)
}

/// Mini-batch ELBO under replayed noise.
pub fn elbo<T: Real>(
    docs: &[&[(u32, u32)]],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cfg: EncodeCfg,
    rho: T,
    noises: &[DocNoise],
) -> ElboBreakdown<T> {
    let depth = enc.depth();
    let mut recon = T::zero();
    let mut kl = vec![T::zero(); depth];
    for (doc, noise) in docs.iter().zip(noises) {
        let ed = encode(doc, enc, g, cfg, NoiseSpec::Replay(noise));
        let (r, kls) = elbo_doc(doc, &ed, g, cfg.variant);
        recon += r;
        for (a, b) in kl.iter_mut().zip(kls) {
            *a += b;
        }
    }
    recon *= rho;
    for k in kl.iter_mut() {
        *k *= rho;
    }
    ElboBreakdown {
        total: recon - kl.iter().copied().sum(),
        recon,
        kl,
    }
}

/// Gradient of the batch ELBO with respect to the global parameters,
/// used by the SGD-only variant: dF/dΦ^(l) per layer.
pub type PhiGrad<T> = Vec<Array2<T>>;

pub(crate) struct DocBackpropOut<T> {
    pub recon: T,
    pub kl: Vec<T>,
}

/// Backpropagate one document's ELBO (plus an optional externally supplied
/// ∂F/∂θ^(l) source, used by the supervised head) into encoder-parameter
/// gradients, accumulating into `grad` and optionally `phi_grad`.
pub(crate) fn doc_backprop<T: Real>(
    doc: &[(u32, u32)],
    ed: &EncodedDoc<T>,
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    variant: Variant,
    extra_theta_grad: Option<&[Array1<T>]>,
    kl_weight: T,
    grad: &mut EncoderParams<T>,
    mut phi_grad: Option<&mut PhiGrad<T>>,
) -> DocBackpropOut<T> {
    let depth = enc.depth();
    let c = g.hyper.c;
    let one = T::one();
    let rate_floor = T::of_f64(RATE_FLOOR);

    // reconstruction value and its gradient into θ^(1) (and Φ^(1))
    let rates = g.phi[0].dot(&ed.theta[0]);
    let mut recon = T::zero();
    let mut resid = rates.mapv(|_| -one);
    for &(term, count) in doc {
        let v = term as usize;
        let lam = rates[v].max(rate_floor);
        let cnt = T::of_f64(count as f64);
        recon += cnt * lam.ln() - crate::dist::lgamma(cnt + one);
        if rates[v] >= rate_floor {
            resid[v] += cnt / lam;
        }
    }
    recon -= rates.sum();

    let mut g_theta: Vec<Array1<T>> = ed.theta.iter().map(|t| Array1::zeros(t.len())).collect();
    g_theta[0] = g.phi[0].t().dot(&resid);
    if let Some(ref mut pg) = phi_grad {
        // dF/dφ^(1)_{vk} = resid_v θ_k
        for (v, &rv) in resid.iter().enumerate() {
            if rv != T::zero() {
                for k in 0..ed.theta[0].len() {
                    pg[0][(v, k)] += rv * ed.theta[0][k];
                }
            }
        }
    }
    if let Some(extra) = extra_theta_grad {
        for (gt, ex) in g_theta.iter_mut().zip(extra) {
            *gt += ex;
        }
    }

    let mut kls = Vec::with_capacity(depth);
    let mut g_h: Vec<Array1<T>> = ed.h.iter().map(|h| Array1::zeros(h.len())).collect();
    let shape_clamp = T::of_f64(WEIBULL_SHAPE_FLOOR);

    for l in 1..=depth {
        let alpha = prior_shape(g, ed, l);
        let k_units = alpha.len();
        let ktot = &ed.k_total[l - 1];
        let lam = &ed.lam[l - 1];
        let theta = &ed.theta[l - 1];
        let mut kl_sum = T::zero();
        let mut g_ktot = Array1::zeros(k_units);
        let mut g_lam = Array1::zeros(k_units);
        // ∂F/∂(Φ^(l+1)θ^(l+1)): both the posterior shape augmentation and
        // the prior shape read the same vector.
        let mut g_up = Array1::zeros(k_units);
        for j in 0..k_units {
            let p = GammaParams { shape: alpha[j], rate: c };
            let gt = g_theta[l - 1][j];
            match variant {
                Variant::Ghai => {
                    let q = GammaParams { shape: ktot[j], rate: lam[j].recip() };
                    kl_sum += gamma_gamma_kl(q, p);
                    let klg = gamma_gamma_kl_grad(q, p);
                    let LayerNoise::Gamma(draws) = &ed.noise.layers[l - 1] else {
                        panic!("noise kind mismatch");
                    };
                    let (_, dv_dshape, dv_dscale) = gamma_reparam_grad(q, &draws[j]);
                    g_ktot[j] = gt * dv_dshape - kl_weight * klg.d_shape;
                    // λ is the scale; β_q = 1/λ
                    g_lam[j] = gt * dv_dscale + kl_weight * klg.d_rate / (lam[j] * lam[j]);
                    g_up[j] = -kl_weight * klg.d_prior_shape;
                }
                _ => {
                    let q = WeibullParams { shape: ktot[j], scale: lam[j] };
                    kl_sum += weibull_gamma_kl(q, p);
                    let klg = weibull_gamma_kl_grad(q, p);
                    let LayerNoise::Uniform(eps) = &ed.noise.layers[l - 1] else {
                        panic!("noise kind mismatch");
                    };
                    // θ = λ t^(1/k): ∂θ/∂k = −θ ln(t)/k², ∂θ/∂λ = θ/λ
                    let t = -(1.0 - eps[j]).ln();
                    let w = T::of_f64(t.ln());
                    let dtheta_dk = -theta[j] * w / (ktot[j] * ktot[j]);
                    g_ktot[j] = gt * dtheta_dk - kl_weight * klg.d_shape;
                    g_lam[j] = gt * theta[j] / lam[j] - kl_weight * klg.d_scale;
                    g_up[j] = -kl_weight * klg.d_prior_shape;
                }
            }
            // frozen units: the shape clamp is active, so nothing flows
            if ktot[j] <= shape_clamp {
                g_ktot[j] = T::zero();
            }
        }
        kls.push(kl_sum);

        if l < depth {
            let du = if variant.downward() {
                g_up + &g_ktot
            } else {
                g_up
            };
            g_theta[l] += &g.phi[l].t().dot(&du);
            if let Some(ref mut pg) = phi_grad {
                for j in 0..du.len() {
                    if du[j] != T::zero() {
                        for k in 0..ed.theta[l].len() {
                            pg[l][(j, k)] += du[j] * ed.theta[l][k];
                        }
                    }
                }
            }
        }

        // heads at this layer
        let lp = &enc.layers[l - 1];
        let ga1 = Array1::from_shape_fn(k_units, |j| sigmoid(ed.a1[l - 1][j]) * g_ktot[j]);
        let ga2 = Array1::from_shape_fn(k_units, |j| sigmoid(ed.a2[l - 1][j]) * g_lam[j]);
        let gl = &mut grad.layers[l - 1];
        for j in 0..k_units {
            if ga1[j] != T::zero() {
                for i in 0..ed.h[l].len() {
                    gl.w1[(j, i)] += ga1[j] * ed.h[l][i];
                }
            }
            if ga2[j] != T::zero() {
                for i in 0..ed.h[l].len() {
                    gl.w2[(j, i)] += ga2[j] * ed.h[l][i];
                }
            }
        }
        gl.b1 += &ga1;
        gl.b2 += &ga2;
        g_h[l] += &lp.w1.t().dot(&ga1);
        g_h[l] += &lp.w2.t().dot(&ga2);
    }

    // upward chain, backwards
    for l in (1..=depth).rev() {
        let lp = &enc.layers[l - 1];
        let ga3 = Array1::from_shape_fn(g_h[l].len(), |j| sigmoid(ed.a3[l - 1][j]) * g_h[l][j]);
        let gl = &mut grad.layers[l - 1];
        for j in 0..ga3.len() {
            if ga3[j] != T::zero() {
                for i in 0..ed.h[l - 1].len() {
                    gl.w3[(j, i)] += ga3[j] * ed.h[l - 1][i];
                }
            }
        }
        gl.b3 += &ga3;
        if l > 1 {
            let back = lp.w3.t().dot(&ga3);
            g_h[l - 1] += &back;
        }
    }

    DocBackpropOut { recon, kl: kls }
}

/// Gradient of the mini-batch ELBO with respect to every encoder parameter
/// (and, when requested, the topic matrices), under replayed noise. Work is
/// chunked over documents with an order-fixed reduction.
pub fn elbo_grad<T: Real>(
    docs: &[&[(u32, u32)]],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cfg: EncodeCfg,
    rho: T,
    noises: &[DocNoise],
    want_phi_grad: bool,
) -> (EncoderParams<T>, ElboBreakdown<T>, Option<PhiGrad<T>>) {
    assert_eq!(docs.len(), noises.len());
    let depth = enc.depth();
    let zero_phi = || -> PhiGrad<T> {
        (1..=depth)
            .map(|l| Array2::zeros((g.shape.width(l - 1), g.shape.width(l))))
            .collect()
    };
    struct Chunk<T> {
        grad: EncoderParams<T>,
        phi: Option<PhiGrad<T>>,
        recon: T,
        kl: Vec<T>,
    }
    let chunks: Vec<Chunk<T>> = docs
        .par_chunks(GRAD_CHUNK)
        .zip(noises.par_chunks(GRAD_CHUNK))
        .map(|(dc, nc)| {
            let mut grad = enc.zeros_like();
            let mut phi = want_phi_grad.then(zero_phi);
            let mut recon = T::zero();
            let mut kl = vec![T::zero(); depth];
            for (doc, noise) in dc.iter().zip(nc) {
                let ed = encode(doc, enc, g, cfg, NoiseSpec::Replay(noise));
                let out = doc_backprop(
                    doc,
                    &ed,
                    enc,
                    g,
                    cfg.variant,
                    None,
                    T::one(),
                    &mut grad,
                    phi.as_mut(),
                );
                recon += out.recon;
                for (a, b) in kl.iter_mut().zip(out.kl) {
                    *a += b;
                }
            }
            Chunk { grad, phi, recon, kl }
        })
        .collect();

    let mut grad = enc.zeros_like();
    let mut phi = want_phi_grad.then(zero_phi);
    let mut recon = T::zero();
    let mut kl = vec![T::zero(); depth];
    for ch in chunks {
        grad.add_assign(&ch.grad);
        if let (Some(acc), Some(part)) = (phi.as_mut(), ch.phi.as_ref()) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
        recon += ch.recon;
        for (a, b) in kl.iter_mut().zip(&ch.kl) {
            *a += *b;
        }
    }
    grad.scale(rho);
    if let Some(acc) = phi.as_mut() {
        for a in acc.iter_mut() {
            *a *= rho;
        }
    }
    recon *= rho;
    for k in kl.iter_mut() {
        *k *= rho;
    }
    let breakdown = ElboBreakdown {
        total: recon - kl.iter().copied().sum(),
        recon,
        kl,
    };
    (grad, breakdown, phi)
}

/// Adam state over the encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderOpt<T> {
    pub cfg: AdamCfg,
    pub t: u64,
    pub grad_clip: f64,
    slots: Vec<[AdamSlot<T, ndarray::Ix2>; 3]>,
    bias_slots: Vec<[AdamSlot<T, ndarray::Ix1>; 3]>,
}

impl<T: Real> EncoderOpt<T> {
    pub fn new(enc: &EncoderParams<T>, cfg: AdamCfg, grad_clip: f64) -> Self {
        EncoderOpt {
            cfg,
            t: 0,
            grad_clip,
            slots: enc
                .layers
                .iter()
                .map(|l| {
                    [
                        AdamSlot::zeros_like(&l.w1),
                        AdamSlot::zeros_like(&l.w2),
                        AdamSlot::zeros_like(&l.w3),
                    ]
                })
                .collect(),
            bias_slots: enc
                .layers
                .iter()
                .map(|l| {
                    [
                        AdamSlot::zeros_like(&l.b1),
                        AdamSlot::zeros_like(&l.b2),
                        AdamSlot::zeros_like(&l.b3),
                    ]
                })
                .collect(),
        }
    }

    /// One ascent step on a (clipped) ELBO gradient.
    pub fn step(&mut self, enc: &mut EncoderParams<T>, grad: &EncoderParams<T>) {
        let mut grad = grad.clone();
        grad.clip_global_norm(T::of_f64(self.grad_clip));
        self.t += 1;
        for (i, l) in enc.layers.iter_mut().enumerate() {
            let gl = &grad.layers[i];
            self.slots[i][0].ascend(&mut l.w1, &gl.w1, &self.cfg, self.t);
            self.slots[i][1].ascend(&mut l.w2, &gl.w2, &self.cfg, self.t);
            self.slots[i][2].ascend(&mut l.w3, &gl.w3, &self.cfg, self.t);
            self.bias_slots[i][0].ascend(&mut l.b1, &gl.b1, &self.cfg, self.t);
            self.bias_slots[i][1].ascend(&mut l.b2, &gl.b2, &self.cfg, self.t);
            self.bias_slots[i][2].ascend(&mut l.b3, &gl.b3, &self.cfg, self.t);
        }
    }

    pub fn moments(&self) -> (Vec<Vec<&Array2<T>>>, Vec<Vec<&Array1<T>>>) {
        let m2 = self
            .slots
            .iter()
            .map(|s| s.iter().flat_map(|sl| [&sl.m, &sl.v]).collect())
            .collect();
        let m1 = self
            .bias_slots
            .iter()
            .map(|s| s.iter().flat_map(|sl| [&sl.m, &sl.v]).collect())
            .collect();
        (m2, m1)
    }

    pub fn moments_mut(&mut self) -> (Vec<Vec<&mut Array2<T>>>, Vec<Vec<&mut Array1<T>>>) {
        let m2 = self
            .slots
            .iter_mut()
            .map(|s| s.iter_mut().flat_map(|sl| [&mut sl.m, &mut sl.v]).collect())
            .collect();
        let m1 = self
            .bias_slots
            .iter_mut()
            .map(|s| s.iter_mut().flat_map(|sl| [&mut sl.m, &mut sl.v]).collect())
            .collect();
        (m2, m1)
    }
}
