//! Joint document/label modeling: multi-layer feature concatenation, linear
//! and MLP classification heads with diagonal-Gaussian softmax weights, the
//! supervised ELBO with KL warm-up, and Monte-Carlo label prediction.

use crate::config::{HeadKind, TrainConfig};
use crate::corpus::Corpus;
use crate::decoder::GlobalParams;
use crate::dist::{sigmoid, softplus, softplus_inv};
use crate::encoder::{
    doc_backprop, encode, DocNoise, EncodeCfg, EncoderParams, NoiseSpec, PhiGrad, Variant,
    GRAD_CHUNK,
};
use crate::opt::{AdamCfg, AdamSlot};
use crate::real::Real;
use crate::rng::RngStream;
use crate::trainer::{Trainer, TrainError, STREAM_CLASSIFIER};
use rayon::prelude::*;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupervisedError {
    #[error("corpus has no labels")]
    MissingLabels,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which algebraic form of the Gaussian weight KL to use. The exact
/// diagonal form is the default; the norm-log form ½(‖μ‖²+‖σ‖²) − ln‖σ‖
/// (a whole-vector variant seen in existing implementations) is kept
/// behind this switch for comparability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaussianKlForm {
    #[default]
    Exact,
    NormLog,
}

/// Layer-specific MLP head: per-layer g1 transforms, then g2 on the
/// concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w_m1: Vec<Array2<T>>,
    pub b_m1: Vec<Array1<T>>,
    pub w_m2: Array2<T>,
    pub b_m2: Array1<T>,
    pub w_m3: Array2<T>,
    pub b_m3: Array1<T>,
}

/// Variational softmax weights: per class a diagonal Gaussian with mean μ_c
/// and scale σ_c = softplus(ρ_c), plus the MLP parameters for the nonlinear
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub head: HeadKind,
    pub num_classes: usize,
    /// C × D; D = ΣK_l for the linear head, a2 for the nonlinear one.
    pub mu: Array2<T>,
    pub rho: Array2<T>,
    pub mlp: Option<MlpParams<T>>,
    pub kl_form: GaussianKlForm,
}

fn glorot<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<T> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::of_f64((rng.uniform() * 2.0 - 1.0) * s))
}

impl<T: Real> ClassifierParams<T> {
    pub fn init(
        widths: &[usize],
        num_classes: usize,
        head: HeadKind,
        a1: usize,
        a2: usize,
        rng: &mut RngStream,
    ) -> Self {
        let sum_k: usize = widths.iter().sum();
        let feat_dim = match head {
            HeadKind::Linear => sum_k,
            HeadKind::Nonlinear => a2,
        };
        let mu = Array2::from_shape_fn((num_classes, feat_dim), |_| {
            T::of_f64(rng.normal() * 0.01)
        });
        let rho = Array2::from_elem((num_classes, feat_dim), softplus_inv(T::of_f64(0.05)));
        let mlp = matches!(head, HeadKind::Nonlinear).then(|| MlpParams {
            w_m1: widths.iter().map(|&k| glorot(k, k, rng)).collect(),
            b_m1: widths.iter().map(|&k| Array1::zeros(k)).collect(),
            w_m2: glorot(a1, sum_k, rng),
            b_m2: Array1::zeros(a1),
            w_m3: glorot(a2, a1, rng),
            b_m3: Array1::zeros(a2),
        });
        ClassifierParams {
            head,
            num_classes,
            mu,
            rho,
            mlp,
            kl_form: GaussianKlForm::Exact,
        }
    }

    pub fn sigma(&self) -> Array2<T> {
        self.rho.mapv(softplus)
    }

    /// Reparameterized weight draw w = μ + σ ⊙ ε.
    pub fn draw_weights(&self, eps: &Array2<T>) -> Array2<T> {
        &self.mu + &(self.sigma() * eps)
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams {
            head: self.head,
            num_classes: self.num_classes,
            mu: Array2::zeros(self.mu.raw_dim()),
            rho: Array2::zeros(self.rho.raw_dim()),
            mlp: self.mlp.as_ref().map(|m| MlpParams {
                w_m1: m.w_m1.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
                b_m1: m.b_m1.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
                w_m2: Array2::zeros(m.w_m2.raw_dim()),
                b_m2: Array1::zeros(m.b_m2.raw_dim()),
                w_m3: Array2::zeros(m.w_m3.raw_dim()),
                b_m3: Array1::zeros(m.b_m3.raw_dim()),
            }),
            kl_form: self.kl_form,
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.mu += &other.mu;
        self.rho += &other.rho;
        if let (Some(a), Some(b)) = (self.mlp.as_mut(), other.mlp.as_ref()) {
            for (x, y) in a.w_m1.iter_mut().zip(&b.w_m1) {
                *x += y;
            }
            for (x, y) in a.b_m1.iter_mut().zip(&b.b_m1) {
                *x += y;
            }
            a.w_m2 += &b.w_m2;
            a.b_m2 += &b.b_m2;
            a.w_m3 += &b.w_m3;
            a.b_m3 += &b.b_m3;
        }
    }

    fn scale(&mut self, s: T) {
        self.mu *= s;
        self.rho *= s;
        if let Some(m) = self.mlp.as_mut() {
            for w in m.w_m1.iter_mut() {
                *w *= s;
            }
            for b in m.b_m1.iter_mut() {
                *b *= s;
            }
            m.w_m2 *= s;
            m.b_m2 *= s;
            m.w_m3 *= s;
            m.b_m3 *= s;
        }
    }
}

/// Intermediate activations of the feature path for one document.
pub struct FeatureTrace<T> {
    /// Concatenated features s (after per-layer g1 for the nonlinear head).
    pub s: Array1<T>,
    /// What the softmax weights read: s itself, or g2(s).
    pub feat: Array1<T>,
    a_m1: Vec<Array1<T>>,
    a_m2: Option<Array1<T>>,
    a_m3: Option<Array1<T>>,
    h_mid: Option<Array1<T>>,
}

/// Build the latent feature vector from per-layer θ: a plain concatenation
/// for the linear head, per-layer softplus MLPs for the nonlinear one.
pub fn concat_features<T: Real>(
    thetas: &[Array1<T>],
    cls: &ClassifierParams<T>,
) -> FeatureTrace<T> {
    match (&cls.head, cls.mlp.as_ref()) {
        (HeadKind::Linear, _) => {
            let total: usize = thetas.iter().map(|t| t.len()).sum();
            let mut s = Array1::zeros(total);
            let mut at = 0;
            for t in thetas {
                s.slice_mut(ndarray::s![at..at + t.len()]).assign(t);
                at += t.len();
            }
            FeatureTrace {
                feat: s.clone(),
                s,
                a_m1: Vec::new(),
                a_m2: None,
                a_m3: None,
                h_mid: None,
            }
        }
        (HeadKind::Nonlinear, Some(mlp)) => {
            let total: usize = thetas.iter().map(|t| t.len()).sum();
            let mut s = Array1::zeros(total);
            let mut a_m1 = Vec::with_capacity(thetas.len());
            let mut at = 0;
            for (l, t) in thetas.iter().enumerate() {
                let a = mlp.w_m1[l].dot(t) + &mlp.b_m1[l];
                s.slice_mut(ndarray::s![at..at + t.len()])
                    .assign(&a.mapv(softplus));
                at += t.len();
                a_m1.push(a);
            }
            let a2 = mlp.w_m2.dot(&s) + &mlp.b_m2;
            let h = a2.mapv(softplus);
            let a3 = mlp.w_m3.dot(&h) + &mlp.b_m3;
            let feat = a3.mapv(softplus);
            FeatureTrace {
                s,
                feat,
                a_m1,
                a_m2: Some(a2),
                a_m3: Some(a3),
                h_mid: Some(h),
            }
        }
        (HeadKind::Nonlinear, None) => panic!("nonlinear head without MLP parameters"),
    }
}

/// Softmax class probabilities under one weight draw, stabilized by max
/// subtraction. Entries are positive and sum to one.
pub fn class_probs<T: Real>(feat: &Array1<T>, weights: &Array2<T>) -> Array1<T> {
    let c = weights.nrows();
    let mut z = Array1::zeros(c);
    for i in 0..c {
        z[i] = weights.row(i).dot(feat);
    }
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut p = z.mapv(|v| (v - m).exp());
    let sum = p.sum();
    p.mapv_inplace(|v| v / sum);
    p
}

/// Σ_c KL[q(w_c) || N(0, I)] in the configured algebraic form.
pub fn gaussian_weight_kl<T: Real>(cls: &ClassifierParams<T>) -> T {
    let sigma = cls.sigma();
    let half = T::of_f64(0.5);
    let two = T::of_f64(2.0);
    match cls.kl_form {
        GaussianKlForm::Exact => {
            let mut acc = T::zero();
            for (&m, &s) in cls.mu.iter().zip(sigma.iter()) {
                acc += half * (m * m + s * s - T::one() - two * s.ln());
            }
            acc
        }
        GaussianKlForm::NormLog => {
            let mut acc = T::zero();
            for c in 0..cls.num_classes {
                let mu2: T = cls.mu.row(c).iter().map(|&x| x * x).sum();
                let s2: T = sigma.row(c).iter().map(|&x| x * x).sum();
                acc += half * (mu2 + s2) - s2.sqrt().ln();
            }
            acc
        }
    }
}

/// Gradient of [`gaussian_weight_kl`] with respect to (μ, ρ).
fn gaussian_weight_kl_grad<T: Real>(cls: &ClassifierParams<T>) -> (Array2<T>, Array2<T>) {
    let sigma = cls.sigma();
    match cls.kl_form {
        GaussianKlForm::Exact => {
            let d_mu = cls.mu.clone();
            let mut d_rho = Array2::zeros(cls.rho.raw_dim());
            for ((dr, &s), &rho) in d_rho.iter_mut().zip(sigma.iter()).zip(cls.rho.iter()) {
                *dr = (s - s.recip()) * sigmoid(rho);
            }
            (d_mu, d_rho)
        }
        GaussianKlForm::NormLog => {
            let d_mu = cls.mu.clone();
            let mut d_rho = Array2::zeros(cls.rho.raw_dim());
            for c in 0..cls.num_classes {
                let s2: T = sigma.row(c).iter().map(|&x| x * x).sum();
                for j in 0..cls.rho.ncols() {
                    let s = sigma[(c, j)];
                    d_rho[(c, j)] = (s - s / s2) * sigmoid(cls.rho[(c, j)]);
                }
            }
            (d_mu, d_rho)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupBreakdown<T> {
    pub total: T,
    pub recon: T,
    pub label: T,
    pub kl_layers: Vec<T>,
    pub kl_w: T,
}

/// Supervised ELBO of a labeled mini-batch under replayed noise:
/// ρ·Σ_n [ln p(x_n|·) + label_weight·ln p(y_n|·)] − β_t·(ρ·ΣΣ KL_layers +
/// Σ_c KL_w), with one reparameterized weight draw shared by the batch.
#[allow(clippy::too_many_arguments)]
pub fn supervised_elbo<T: Real>(
    docs: &[&[(u32, u32)]],
    labels: &[u32],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cls: &ClassifierParams<T>,
    w_eps: &Array2<T>,
    cfg: EncodeCfg,
    rho: T,
    noises: &[DocNoise],
    beta: T,
    label_weight: T,
) -> SupBreakdown<T> {
    let weights = cls.draw_weights(w_eps);
    let depth = enc.depth();
    let mut recon = T::zero();
    let mut label = T::zero();
    let mut kl = vec![T::zero(); depth];
    for ((doc, &y), noise) in docs.iter().zip(labels).zip(noises) {
        let ed = encode(doc, enc, g, cfg, NoiseSpec::Replay(noise));
        let (r, kls) = crate::encoder::elbo_doc(doc, &ed, g, cfg.variant);
        recon += r;
        for (a, b) in kl.iter_mut().zip(kls) {
            *a += b;
        }
        let trace = concat_features(&ed.theta, cls);
        let p = class_probs(&trace.feat, &weights);
        label += p[(y - 1) as usize].max(T::of_f64(1e-300)).ln();
    }
    let kl_w = gaussian_weight_kl(cls);
    recon *= rho;
    label *= rho;
    for k in kl.iter_mut() {
        *k *= rho;
    }
    let total =
        recon + label_weight * label - beta * (kl.iter().copied().sum::<T>() + kl_w);
    SupBreakdown {
        total,
        recon,
        label,
        kl_layers: kl,
        kl_w,
    }
}

/// One document's supervised-gradient contribution, accumulated into the
/// chunk-local buffers.
#[allow(clippy::too_many_arguments)]
fn grad_one_doc<T: Real>(
    doc: &[(u32, u32)],
    y: u32,
    noise: &DocNoise,
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cls: &ClassifierParams<T>,
    weights: &Array2<T>,
    w_eps: &Array2<T>,
    sigma_grad_mask: &Array2<T>,
    cfg: EncodeCfg,
    beta: T,
    label_weight: T,
    enc_grad: &mut EncoderParams<T>,
    cls_grad: &mut ClassifierParams<T>,
    phi_grad: Option<&mut PhiGrad<T>>,
    recon: &mut T,
    label: &mut T,
    kl: &mut [T],
) {
    let ed = encode(doc, enc, g, cfg, NoiseSpec::Replay(noise));
    let trace = concat_features(&ed.theta, cls);
    let p = class_probs(&trace.feat, weights);
    let yi = (y - 1) as usize;
    *label += p[yi].max(T::of_f64(1e-300)).ln();

    // d label / d z_c = δ_{c=y} − p_c, scaled by the label weight
    let mut gz = p.mapv(|v| -v * label_weight);
    gz[yi] += label_weight;
    // weight gradients: d/dw_c = gz_c · feat  → μ directly, ρ via ⊙ε⊙σ'(ρ)
    for c in 0..cls.num_classes {
        if gz[c] != T::zero() {
            for j in 0..trace.feat.len() {
                let d = gz[c] * trace.feat[j];
                cls_grad.mu[(c, j)] += d;
                cls_grad.rho[(c, j)] += d * w_eps[(c, j)] * sigma_grad_mask[(c, j)];
            }
        }
    }
    // feature gradient: d/d feat = Σ_c gz_c w_c
    let mut g_feat = Array1::zeros(trace.feat.len());
    for c in 0..cls.num_classes {
        if gz[c] != T::zero() {
            g_feat += &weights.row(c).mapv(|w| w * gz[c]);
        }
    }
    // back through the head into per-layer θ gradients
    let g_s = match cls.head {
        HeadKind::Linear => g_feat,
        HeadKind::Nonlinear => {
            let mlp = cls.mlp.as_ref().unwrap();
            let mlp_grad = cls_grad.mlp.as_mut().unwrap();
            let a3 = trace.a_m3.as_ref().unwrap();
            let a2 = trace.a_m2.as_ref().unwrap();
            let h = trace.h_mid.as_ref().unwrap();
            let ga3 = Array1::from_shape_fn(a3.len(), |j| sigmoid(a3[j]) * g_feat[j]);
            for j in 0..ga3.len() {
                for i in 0..h.len() {
                    mlp_grad.w_m3[(j, i)] += ga3[j] * h[i];
                }
            }
            mlp_grad.b_m3 += &ga3;
            let gh = mlp.w_m3.t().dot(&ga3);
            let ga2 = Array1::from_shape_fn(a2.len(), |j| sigmoid(a2[j]) * gh[j]);
            for j in 0..ga2.len() {
                for i in 0..trace.s.len() {
                    mlp_grad.w_m2[(j, i)] += ga2[j] * trace.s[i];
                }
            }
            mlp_grad.b_m2 += &ga2;
            mlp.w_m2.t().dot(&ga2)
        }
    };
    let depth = ed.theta.len();
    let mut extra: Vec<Array1<T>> = Vec::with_capacity(depth);
    let mut at = 0;
    for (l, t) in ed.theta.iter().enumerate() {
        let slice = g_s.slice(ndarray::s![at..at + t.len()]).to_owned();
        at += t.len();
        match cls.head {
            HeadKind::Linear => extra.push(slice),
            HeadKind::Nonlinear => {
                let mlp = cls.mlp.as_ref().unwrap();
                let mlp_grad = cls_grad.mlp.as_mut().unwrap();
                let a1 = &trace.a_m1[l];
                let ga1 = Array1::from_shape_fn(a1.len(), |j| sigmoid(a1[j]) * slice[j]);
                for j in 0..ga1.len() {
                    for i in 0..t.len() {
                        mlp_grad.w_m1[l][(j, i)] += ga1[j] * t[i];
                    }
                }
                mlp_grad.b_m1[l] += &ga1;
                extra.push(mlp.w_m1[l].t().dot(&ga1));
            }
        }
    }
    let out = doc_backprop(
        doc,
        &ed,
        enc,
        g,
        cfg.variant,
        Some(&extra),
        beta,
        enc_grad,
        phi_grad,
    );
    *recon += out.recon;
    for (a, b) in kl.iter_mut().zip(out.kl) {
        *a += b;
    }
}

/// Gradients of the supervised ELBO with respect to the encoder, the
/// classifier, and (optionally) the topic matrices.
#[allow(clippy::too_many_arguments)]
pub fn supervised_elbo_grad<T: Real>(
    docs: &[&[(u32, u32)]],
    labels: &[u32],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cls: &ClassifierParams<T>,
    w_eps: &Array2<T>,
    cfg: EncodeCfg,
    rho: T,
    noises: &[DocNoise],
    beta: T,
    label_weight: T,
    want_phi_grad: bool,
) -> (EncoderParams<T>, ClassifierParams<T>, SupBreakdown<T>, Option<PhiGrad<T>>) {
    let weights = cls.draw_weights(w_eps);
    let sigma_grad_mask = cls.rho.mapv(sigmoid);
    let depth = enc.depth();
    let mut recon = T::zero();
    let mut label = T::zero();
    let mut kl = vec![T::zero(); depth];

    // chunked exactly like the unsupervised gradient so that a zero label
    // weight reproduces its accumulation order bit for bit
    struct Chunk<T> {
        enc_grad: EncoderParams<T>,
        cls_grad: ClassifierParams<T>,
        phi: Option<PhiGrad<T>>,
        recon: T,
        label: T,
        kl: Vec<T>,
    }
    let zero_phi = || -> PhiGrad<T> {
        (1..=depth)
            .map(|l| ndarray::Array2::zeros((g.shape.width(l - 1), g.shape.width(l))))
            .collect()
    };
    let chunks: Vec<Chunk<T>> = docs
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .zip(noises.par_chunks(GRAD_CHUNK))
        .map(|((dc, lc), nc)| {
            let mut ch = Chunk {
                enc_grad: enc.zeros_like(),
                cls_grad: cls.zeros_like(),
                phi: want_phi_grad.then(zero_phi),
                recon: T::zero(),
                label: T::zero(),
                kl: vec![T::zero(); depth],
            };
            for ((doc, &y), noise) in dc.iter().zip(lc).zip(nc) {
                grad_one_doc(
                    doc, y, noise, enc, g, cls, &weights, w_eps, &sigma_grad_mask, cfg, beta,
                    label_weight, &mut ch.enc_grad, &mut ch.cls_grad, ch.phi.as_mut(),
                    &mut ch.recon, &mut ch.label, &mut ch.kl,
                );
            }
            ch
        })
        .collect();
    let mut enc_grad = enc.zeros_like();
    let mut cls_grad = cls.zeros_like();
    let mut phi_grad = want_phi_grad.then(zero_phi);
    for ch in chunks {
        enc_grad.add_assign(&ch.enc_grad);
        cls_grad.add_assign(&ch.cls_grad);
        if let (Some(acc), Some(part)) = (phi_grad.as_mut(), ch.phi.as_ref()) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
        recon += ch.recon;
        label += ch.label;
        for (a, b) in kl.iter_mut().zip(&ch.kl) {
            *a += *b;
        }
    }

    enc_grad.scale(rho);
    cls_grad.scale(rho);
    if let Some(pg) = phi_grad.as_mut() {
        for a in pg.iter_mut() {
            *a *= rho;
        }
    }
    // the global weight-KL term, warm-up scaled, unscaled by ρ
    let (d_mu, d_rho) = gaussian_weight_kl_grad(cls);
    cls_grad.mu -= &d_mu.mapv(|x| x * beta);
    cls_grad.rho -= &d_rho.mapv(|x| x * beta);

    let kl_w = gaussian_weight_kl(cls);
    recon *= rho;
    label *= rho;
    for k in kl.iter_mut() {
        *k *= rho;
    }
    let total =
        recon + label_weight * label - beta * (kl.iter().copied().sum::<T>() + kl_w);
    (
        enc_grad,
        cls_grad,
        SupBreakdown {
            total,
            recon,
            label,
            kl_layers: kl,
            kl_w,
        },
        phi_grad,
    )
}

/// Adam state over the classifier parameters.
#[derive(Debug, Clone)]
pub struct ClassifierOpt<T> {
    pub cfg: AdamCfg,
    pub t: u64,
    pub(crate) mu: AdamSlot<T, ndarray::Ix2>,
    pub(crate) rho: AdamSlot<T, ndarray::Ix2>,
    pub(crate) mlp2: Vec<AdamSlot<T, ndarray::Ix2>>,
    pub(crate) mlp1: Vec<AdamSlot<T, ndarray::Ix1>>,
}

impl<T: Real> ClassifierOpt<T> {
    pub fn new(cls: &ClassifierParams<T>, cfg: AdamCfg) -> Self {
        let (mlp2, mlp1) = match cls.mlp.as_ref() {
            None => (Vec::new(), Vec::new()),
            Some(m) => {
                let mut w: Vec<AdamSlot<T, ndarray::Ix2>> =
                    m.w_m1.iter().map(AdamSlot::zeros_like).collect();
                w.push(AdamSlot::zeros_like(&m.w_m2));
                w.push(AdamSlot::zeros_like(&m.w_m3));
                let mut b: Vec<AdamSlot<T, ndarray::Ix1>> =
                    m.b_m1.iter().map(AdamSlot::zeros_like).collect();
                b.push(AdamSlot::zeros_like(&m.b_m2));
                b.push(AdamSlot::zeros_like(&m.b_m3));
                (w, b)
            }
        };
        ClassifierOpt {
            cfg,
            t: 0,
            mu: AdamSlot::zeros_like(&cls.mu),
            rho: AdamSlot::zeros_like(&cls.rho),
            mlp2,
            mlp1,
        }
    }

    pub fn step(&mut self, cls: &mut ClassifierParams<T>, grad: &ClassifierParams<T>) {
        self.t += 1;
        self.mu.ascend(&mut cls.mu, &grad.mu, &self.cfg, self.t);
        self.rho.ascend(&mut cls.rho, &grad.rho, &self.cfg, self.t);
        if let (Some(m), Some(gm)) = (cls.mlp.as_mut(), grad.mlp.as_ref()) {
            let n1 = m.w_m1.len();
            for l in 0..n1 {
                self.mlp2[l].ascend(&mut m.w_m1[l], &gm.w_m1[l], &self.cfg, self.t);
                self.mlp1[l].ascend(&mut m.b_m1[l], &gm.b_m1[l], &self.cfg, self.t);
            }
            self.mlp2[n1].ascend(&mut m.w_m2, &gm.w_m2, &self.cfg, self.t);
            self.mlp1[n1].ascend(&mut m.b_m2, &gm.b_m2, &self.cfg, self.t);
            self.mlp2[n1 + 1].ascend(&mut m.w_m3, &gm.w_m3, &self.cfg, self.t);
            self.mlp1[n1 + 1].ascend(&mut m.b_m3, &gm.b_m3, &self.cfg, self.t);
        }
    }
}

/// A trained supervised model.
#[derive(Debug, Clone)]
pub struct SupervisedModel<T> {
    pub trainer: Trainer<T>,
    pub classifier: ClassifierParams<T>,
    pub cls_opt: ClassifierOpt<T>,
}

/// Monte-Carlo label prediction: average class probabilities over
/// `n_collect` paired draws (θ from the encoder, w from q(w)); argmax with
/// ties broken toward the lowest class index. Returns the 1-based label and
/// the averaged probability vector.
pub fn predict<T: Real>(
    doc: &[(u32, u32)],
    enc: &EncoderParams<T>,
    g: &GlobalParams<T>,
    cls: &ClassifierParams<T>,
    cfg: EncodeCfg,
    n_collect: usize,
    rng: &mut RngStream,
) -> (u32, Array1<T>) {
    let mut acc = Array1::zeros(cls.num_classes);
    for _ in 0..n_collect.max(1) {
        let ed = encode(doc, enc, g, cfg, NoiseSpec::Draw(rng));
        let trace = concat_features(&ed.theta, cls);
        let eps = Array2::from_shape_fn(cls.mu.raw_dim(), |_| T::of_f64(rng.normal()));
        let weights = cls.draw_weights(&eps);
        acc += &class_probs(&trace.feat, &weights);
    }
    acc.mapv_inplace(|v| v / T::of_usize(n_collect.max(1)));
    let mut best = 0usize;
    for c in 1..cls.num_classes {
        if acc[c] > acc[best] {
            best = c;
        }
    }
    (best as u32 + 1, acc)
}

/// Two-phase supervised training: label-free epochs first, then supervised
/// epochs with a linear KL warm-up; globals stay on their Algorithm-1
/// update path throughout.
pub fn train_supervised<T: Real>(
    corpus: &Corpus,
    cfg: TrainConfig,
) -> Result<SupervisedModel<T>, SupervisedError> {
    let labels = corpus.labels.clone().ok_or(SupervisedError::MissingLabels)?;
    let num_classes = corpus.num_classes.unwrap() as usize;
    let mut trainer: Trainer<T> = Trainer::new(cfg.clone(), corpus.vocab_size);
    trainer.seed_topics_from_docs(corpus);
    let iters_per_epoch = (corpus.num_docs() as u64).div_ceil(cfg.batch_size as u64);
    for _ in 0..cfg.unsup_epochs as u64 * iters_per_epoch {
        trainer.step(corpus)?;
    }
    let mut cls_rng = RngStream::new(cfg.seed, STREAM_CLASSIFIER);
    let mut classifier = ClassifierParams::init(
        &trainer.globals.shape.widths,
        num_classes,
        cfg.head,
        cfg.mlp_a1,
        cfg.mlp_a2,
        &mut cls_rng,
    );
    let mut cls_opt = ClassifierOpt::new(
        &classifier,
        AdamCfg {
            lr: cfg.classifier_lr,
            ..Default::default()
        },
    );
    let enc_cfg = trainer.encode_cfg();
    let want_phi = cfg.variant == Variant::Wai;
    for it in 0..cfg.sup_epochs as u64 * iters_per_epoch {
        let epoch = it / iters_per_epoch;
        let beta = if cfg.kl_warmup_epochs == 0 {
            T::one()
        } else {
            T::of_f64(((epoch + 1) as f64 / cfg.kl_warmup_epochs as f64).min(1.0))
        };
        let batch = trainer.draw_batch(corpus);
        let docs: Vec<&[(u32, u32)]> = batch.doc_indices.iter().map(|&i| corpus.doc(i)).collect();
        let batch_labels: Vec<u32> = batch.doc_indices.iter().map(|&i| labels[i]).collect();
        let rho = T::of_f64(batch.ratio);
        let noises = trainer.doc_noise(&docs, 0);
        let w_eps = Array2::from_shape_fn(classifier.mu.raw_dim(), |_| {
            T::of_f64(cls_rng.normal())
        });
        let (enc_grad, cls_grad, breakdown, phi_grad) = supervised_elbo_grad(
            &docs,
            &batch_labels,
            &trainer.encoder,
            &trainer.globals,
            &classifier,
            &w_eps,
            enc_cfg,
            rho,
            &noises,
            beta,
            T::of_f64(cfg.label_weight),
            want_phi,
        );
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteElbo {
                iter: trainer.iter,
                recon: breakdown.recon.as_f64(),
                kl: breakdown.kl_layers.iter().map(|k| k.as_f64()).collect(),
            }
            .into());
        }
        trainer.enc_opt.step(&mut trainer.encoder, &enc_grad);
        cls_opt.step(&mut classifier, &cls_grad);
        trainer.update_globals(&docs, &noises, phi_grad.as_ref(), rho);
        trainer.iter += 1;
    }
    Ok(SupervisedModel {
        trainer,
        classifier,
        cls_opt,
    })
}
