//! Joint training (hybrid SG-MCMC over globals plus gradient ascent on the
//! encoder), greedy layer-wise structure learning with shrinkage pruning,
//! and posterior-snapshot collection.

use crate::config::TrainConfig;
use crate::corpus::{next_batch, Corpus, MiniBatch};
use crate::decoder::{DecoderHyper, GlobalParams, NetworkShape};
use crate::encoder::{
    draw_uniform_noise, elbo_grad, encode, DocNoise, ElboBreakdown, EncodeCfg, EncodedDoc,
    EncoderOpt, EncoderParams, NoiseSpec, PhiGrad, Variant,
};
use crate::opt::{AdamCfg, AdamSlot};
use crate::real::Real;
use crate::rng::RngStream;
use crate::sampler::{allocate_counts, tlasgr_update, SamplerState};
use ndarray::{Array1, Array2};
use thiserror::Error;

// Stream ids of the persistent generators; per-document noise is derived
// from (seed, purpose tag, iteration, document slot) instead.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_BATCH: u64 = 2;
pub(crate) const STREAM_SAMPLER: u64 = 3;
pub(crate) const STREAM_CLASSIFIER: u64 = 4;
pub(crate) const TAG_ENC_NOISE: u64 = 0x656e63;
pub(crate) const TAG_ALLOC: u64 = 0x616c63;
pub(crate) const TAG_TOPIC_SEED: u64 = 0x7473;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite ELBO at iteration {iter} (recon {recon}, kl {kl:?})")]
    NonFiniteElbo {
        iter: u64,
        recon: f64,
        kl: Vec<f64>,
    },
    #[error("every topic of layer {layer} fell below the prune threshold {threshold}")]
    AllTopicsPruned { layer: usize, threshold: f64 },
    #[error("corpus has no documents")]
    EmptyCorpus,
}

/// Collected post-burn-in snapshots of the global parameters plus the final
/// encoder.
#[derive(Debug, Clone)]
pub struct PosteriorCollection<T> {
    pub snapshots: Vec<GlobalParams<T>>,
    pub encoder: EncoderParams<T>,
}

/// Softmax-logit state for the SGD-only global updates.
#[derive(Debug, Clone)]
pub struct WaiState<T> {
    pub logits: Vec<Array2<T>>,
    pub slots: Vec<AdamSlot<T, ndarray::Ix2>>,
    pub t: u64,
}

impl<T: Real> WaiState<T> {
    fn from_phi(phi: &[Array2<T>]) -> Self {
        let floor = T::of_f64(1e-12);
        let logits: Vec<Array2<T>> = phi.iter().map(|m| m.mapv(|p| p.max(floor).ln())).collect();
        let slots = logits.iter().map(AdamSlot::zeros_like).collect();
        WaiState { logits, slots, t: 0 }
    }

    fn refresh_phi(&self, g: &mut GlobalParams<T>) {
        for (l, z) in self.logits.iter().enumerate() {
            for k in 0..z.ncols() {
                let col = z.column(k);
                let m = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                let mut exps = Array1::zeros(col.len());
                for (v, &zv) in col.iter().enumerate() {
                    let e = (zv - m).exp();
                    exps[v] = e;
                    sum += e;
                }
                for v in 0..col.len() {
                    g.phi[l][(v, k)] = exps[v] / sum;
                }
            }
        }
    }

    /// Chain dF/dφ through the column softmax and take one Adam ascent step.
    fn ascend(&mut self, g: &mut GlobalParams<T>, phi_grad: &PhiGrad<T>, cfg: &AdamCfg) {
        self.t += 1;
        for l in 0..self.logits.len() {
            let (rows, cols) = self.logits[l].dim();
            let mut grad = Array2::zeros((rows, cols));
            for k in 0..cols {
                let phi_col = g.phi[l].column(k);
                let g_col = phi_grad[l].column(k);
                let inner: T = phi_col.iter().zip(g_col.iter()).map(|(&p, &d)| p * d).sum();
                for v in 0..rows {
                    grad[(v, k)] = phi_col[v] * (g_col[v] - inner);
                }
            }
            self.slots[l].ascend(&mut self.logits[l], &grad, cfg, self.t);
        }
        self.refresh_phi(g);
    }
}

/// Mutable training state: the decoder globals, the encoder and its
/// optimizer, the sampler statistics, and the persistent noise streams.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub globals: GlobalParams<T>,
    pub encoder: EncoderParams<T>,
    pub enc_opt: EncoderOpt<T>,
    pub sampler: SamplerState<T>,
    pub wai: Option<WaiState<T>>,
    pub iter: u64,
    pub batch_rng: RngStream,
    pub sampler_rng: RngStream,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, vocab_size: usize) -> Self {
        Self::with_widths(cfg.clone(), cfg.widths.clone(), vocab_size)
    }

    fn with_widths(cfg: TrainConfig, widths: Vec<usize>, vocab_size: usize) -> Self {
        let shape = NetworkShape::new(widths, vocab_size);
        let hyper = hyper_from_cfg(&cfg, &shape);
        let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT);
        let globals = GlobalParams::init_random(shape.clone(), hyper, &mut init_rng);
        let encoder = EncoderParams::init(&shape.widths, vocab_size, &mut init_rng);
        let enc_opt = EncoderOpt::new(&encoder, cfg.adam(), cfg.grad_clip);
        let sampler = SamplerState::new(&shape.widths, cfg.schedule(), cfg.m_floor);
        let wai = (cfg.variant == Variant::Wai).then(|| WaiState::from_phi(&globals.phi));
        Trainer {
            batch_rng: RngStream::new(cfg.seed, STREAM_BATCH),
            sampler_rng: RngStream::new(cfg.seed, STREAM_SAMPLER),
            cfg,
            globals,
            encoder,
            enc_opt,
            sampler,
            wai,
            iter: 0,
        }
    }

    /// Seed the layer-1 topic columns from smoothed random documents.
    /// Breaks the symmetry that keeps near-duplicate topics merged; deeper
    /// layers keep their Dirichlet initialization.
    pub fn seed_topics_from_docs(&mut self, corpus: &Corpus) {
        if corpus.num_docs() == 0 {
            return;
        }
        let mut rng = RngStream::derived(self.cfg.seed, &[TAG_TOPIC_SEED]);
        let v = self.globals.shape.vocab_size;
        let k1 = self.globals.shape.width(1);
        // distinct seed documents while the corpus allows it
        let picks = if corpus.num_docs() >= k1 {
            rng.sample_without_replacement(corpus.num_docs(), k1)
        } else {
            (0..k1).map(|_| rng.gen_range(corpus.num_docs())).collect()
        };
        for k in 0..k1 {
            let d = picks[k];
            let tokens = corpus.doc_tokens(d) as f64;
            let smooth = 0.05 * (1.0 + tokens / v as f64);
            let mut col = vec![smooth; v];
            for &(t, c) in corpus.doc(d) {
                col[t as usize] += c as f64;
            }
            let sum: f64 = col.iter().sum();
            for (vv, x) in col.iter().enumerate() {
                self.globals.phi[0][(vv, k)] = T::of_f64(x / sum);
            }
        }
        if let Some(wai) = self.wai.as_mut() {
            for k in 0..self.globals.shape.width(1) {
                for vv in 0..v {
                    wai.logits[0][(vv, k)] = self.globals.phi[0][(vv, k)].max(T::of_f64(1e-12)).ln();
                }
            }
        }
    }

    pub fn encode_cfg(&self) -> EncodeCfg {
        EncodeCfg {
            variant: self.cfg.variant,
            rsvi_b: self.cfg.rsvi_b,
        }
    }

    /// Per-(iteration, sample, document) noise, independent of thread count.
    pub fn doc_noise(
        &self,
        docs: &[&[(u32, u32)]],
        sample: u64,
    ) -> Vec<DocNoise> {
        let cfg = self.encode_cfg();
        docs.iter()
            .enumerate()
            .map(|(j, doc)| {
                let mut rng = RngStream::derived(
                    self.cfg.seed,
                    &[TAG_ENC_NOISE, self.iter, sample, j as u64],
                );
                match cfg.variant {
                    Variant::Ghai => {
                        encode(doc, &self.encoder, &self.globals, cfg, NoiseSpec::Draw(&mut rng))
                            .noise
                    }
                    _ => draw_uniform_noise(&self.globals.shape.widths, &mut rng),
                }
            })
            .collect()
    }

    pub fn draw_batch(&mut self, corpus: &Corpus) -> MiniBatch {
        next_batch(corpus, self.cfg.batch_size.min(corpus.num_docs()), &mut self.batch_rng)
    }

    /// Global-parameter update after the encoder step: TLASGR on allocated
    /// counts, or the softmax-logit ascent for the SGD-only variant.
    pub fn update_globals(
        &mut self,
        docs: &[&[(u32, u32)]],
        noises: &[DocNoise],
        phi_grad: Option<&PhiGrad<T>>,
        rho: T,
    ) {
        if self.cfg.variant == Variant::Wai {
            let grad = phi_grad.expect("the SGD-only variant needs dF/dΦ");
            let adam = AdamCfg {
                lr: self.cfg.enc_lr,
                ..Default::default()
            };
            let mut wai = self.wai.take().expect("WAI state present");
            wai.ascend(&mut self.globals, grad, &adam);
            self.wai = Some(wai);
            return;
        }
        let cfg = self.encode_cfg();
        let encoded: Vec<EncodedDoc<T>> = docs
            .iter()
            .zip(noises)
            .map(|(doc, noise)| encode(doc, &self.encoder, &self.globals, cfg, NoiseSpec::Replay(noise)))
            .collect();
        let thetas: Vec<Vec<Array1<T>>> = encoded.into_iter().map(|e| e.theta).collect();
        let counts = allocate_counts(
            docs,
            &thetas,
            &self.globals,
            self.cfg.seed,
            &[TAG_ALLOC, self.iter],
        );
        tlasgr_update(
            &mut self.globals,
            &mut self.sampler,
            &counts,
            rho,
            &mut self.sampler_rng,
        );
    }

    /// One full iteration: select a batch, draw noise, ascend the encoder on
    /// the ELBO gradient, then update the globals.
    pub fn step(&mut self, corpus: &Corpus) -> Result<ElboBreakdown<T>, TrainError> {
        let batch = self.draw_batch(corpus);
        let docs: Vec<&[(u32, u32)]> = batch.doc_indices.iter().map(|&i| corpus.doc(i)).collect();
        let rho = T::of_f64(batch.ratio);
        let cfg = self.encode_cfg();
        let want_phi = self.cfg.variant == Variant::Wai;

        let samples = self.cfg.mc_samples.max(1);
        let mut noise_sets: Vec<Vec<DocNoise>> = Vec::with_capacity(samples);
        for s in 0..samples {
            noise_sets.push(self.doc_noise(&docs, s as u64));
        }
        let mut grad_acc: Option<EncoderParams<T>> = None;
        let mut phi_acc: Option<PhiGrad<T>> = None;
        let mut breakdown_acc: Option<ElboBreakdown<T>> = None;
        for noises in &noise_sets {
            let (grad, breakdown, phi) =
                elbo_grad(&docs, &self.encoder, &self.globals, cfg, rho, noises, want_phi);
            match grad_acc.as_mut() {
                None => grad_acc = Some(grad),
                Some(acc) => acc.add_assign(&grad),
            }
            if let Some(p) = phi {
                match phi_acc.as_mut() {
                    None => phi_acc = Some(p),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&p) {
                            *a += b;
                        }
                    }
                }
            }
            match breakdown_acc.as_mut() {
                None => breakdown_acc = Some(breakdown),
                Some(acc) => {
                    acc.total += breakdown.total;
                    acc.recon += breakdown.recon;
                    for (a, b) in acc.kl.iter_mut().zip(&breakdown.kl) {
                        *a += *b;
                    }
                }
            }
        }
        let scale = T::of_usize(samples).recip();
        let mut grad = grad_acc.unwrap();
        grad.scale(scale);
        if let Some(acc) = phi_acc.as_mut() {
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }
        let mut breakdown = breakdown_acc.unwrap();
        breakdown.total *= scale;
        breakdown.recon *= scale;
        for k in breakdown.kl.iter_mut() {
            *k *= scale;
        }
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteElbo {
                iter: self.iter,
                recon: breakdown.recon.as_f64(),
                kl: breakdown.kl.iter().map(|k| k.as_f64()).collect(),
            });
        }

        self.enc_opt.step(&mut self.encoder, &grad);
        self.update_globals(&docs, &noise_sets[0], phi_acc.as_ref(), rho);
        self.iter += 1;
        Ok(breakdown)
    }

    /// Evenly spaced snapshot stride over the post-burn-in window.
    pub fn snapshot_stride(&self) -> u64 {
        let window = self.cfg.iterations.saturating_sub(self.cfg.burn_in).max(1);
        (window / self.cfg.collect as u64).max(1)
    }
}

fn hyper_from_cfg<T: Real>(cfg: &TrainConfig, shape: &NetworkShape) -> DecoderHyper<T> {
    let mut hyper = DecoderHyper::default_for(shape);
    if let Some(eta) = cfg.eta {
        hyper.eta = vec![T::of_f64(eta); shape.depth()];
    }
    hyper.gamma0 = T::of_f64(cfg.gamma0);
    hyper.c0 = T::of_f64(cfg.c0);
    hyper.c = T::of_f64(cfg.c);
    hyper
}

/// Run Algorithm-1 training, invoking `on_snapshot` for every post-burn-in
/// collection point and `on_elbo` once per iteration.
pub fn train_joint_with<T: Real>(
    corpus: &Corpus,
    cfg: TrainConfig,
    mut on_snapshot: impl FnMut(&GlobalParams<T>, &EncoderParams<T>),
    mut on_elbo: impl FnMut(u64, &ElboBreakdown<T>),
) -> Result<Trainer<T>, TrainError> {
    if corpus.num_docs() == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut trainer = Trainer::new(cfg, corpus.vocab_size);
    trainer.seed_topics_from_docs(corpus);
    let stride = trainer.snapshot_stride();
    let mut collected = 0usize;
    for it in 0..trainer.cfg.iterations {
        let breakdown = trainer.step(corpus)?;
        on_elbo(it, &breakdown);
        if it + 1 > trainer.cfg.burn_in
            && (it + 1 - trainer.cfg.burn_in).is_multiple_of(stride)
            && collected < trainer.cfg.collect
        {
            on_snapshot(&trainer.globals, &trainer.encoder);
            collected += 1;
        }
    }
    Ok(trainer)
}

/// Algorithm-1 training returning the in-memory posterior collection.
pub fn train_joint<T: Real>(
    corpus: &Corpus,
    cfg: TrainConfig,
) -> Result<(Trainer<T>, PosteriorCollection<T>, Vec<f64>), TrainError> {
    let mut snapshots = Vec::new();
    let mut trace = Vec::new();
    let trainer = train_joint_with(
        corpus,
        cfg,
        |g: &GlobalParams<T>, _| snapshots.push(g.clone()),
        |_, b: &ElboBreakdown<T>| trace.push(b.total.as_f64()),
    )?;
    let encoder = trainer.encoder.clone();
    Ok((trainer, PosteriorCollection { snapshots, encoder }, trace))
}

fn keep_indices<T: Real>(r: &Array1<T>, threshold: f64) -> Vec<usize> {
    (0..r.len())
        .filter(|&k| r[k].as_f64() >= threshold)
        .collect()
}

fn select_columns<T: Real>(m: &Array2<T>, keep: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((m.nrows(), keep.len()));
    for (j, &k) in keep.iter().enumerate() {
        out.column_mut(j).assign(&m.column(k));
    }
    out
}

fn select_rows<T: Real>(m: &Array2<T>, keep: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((keep.len(), m.ncols()));
    for (j, &k) in keep.iter().enumerate() {
        out.row_mut(j).assign(&m.row(k));
    }
    out
}

fn select_entries<T: Real>(v: &Array1<T>, keep: &[usize]) -> Array1<T> {
    Array1::from_iter(keep.iter().map(|&k| v[k]))
}

/// Greedy layer-wise structure learning: each stage adds one hidden layer at
/// its width budget (the previous stage's inferred width), jointly retrains
/// all layers, then prunes topics whose shrinkage weight r_k fell below the
/// threshold, dropping the matching encoder rows and columns. A zero
/// threshold disables pruning. Returns the trained model and the inferred
/// widths.
///
/// Under the SGD-only variant r stays at its initialization, so pruning only
/// acts when the threshold exceeds one.
pub fn train_layerwise<T: Real>(
    corpus: &Corpus,
    cfg: TrainConfig,
) -> Result<(Trainer<T>, Vec<usize>), TrainError> {
    if corpus.num_docs() == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut inferred: Vec<usize> = Vec::new();
    let mut prev: Option<Trainer<T>> = None;
    for stage in 1..=cfg.layers {
        let k_max = if stage == 1 {
            cfg.k1_max
        } else {
            inferred[stage - 2]
        };
        let mut widths = inferred.clone();
        widths.push(k_max);
        let mut stage_cfg = cfg.clone();
        stage_cfg.widths = widths.clone();
        stage_cfg.iterations = cfg.iters_per_stage;
        stage_cfg.burn_in = cfg.iters_per_stage;
        stage_cfg.seed = cfg.seed.wrapping_add(stage as u64);
        let mut trainer = Trainer::new(stage_cfg, corpus.vocab_size);
        if stage == 1 {
            trainer.seed_topics_from_docs(corpus);
        }
        // warm start: previously trained layers keep their parameters
        if let Some(prev) = &prev {
            for l in 0..prev.globals.depth() {
                trainer.globals.phi[l] = prev.globals.phi[l].clone();
                trainer.encoder.layers[l] = prev.encoder.layers[l].clone();
            }
            if let (Some(wai), Some(prev_wai)) = (trainer.wai.as_mut(), prev.wai.as_ref()) {
                for l in 0..prev.globals.depth() {
                    wai.logits[l] = prev_wai.logits[l].clone();
                }
            }
        }
        for _ in 0..trainer.cfg.iterations {
            trainer.step(corpus)?;
        }
        // prune by the shrinkage weights of the new top layer
        let keep = keep_indices(&trainer.globals.r, cfg.prune_threshold);
        if keep.is_empty() {
            return Err(TrainError::AllTopicsPruned {
                layer: stage,
                threshold: cfg.prune_threshold,
            });
        }
        if keep.len() < trainer.globals.r.len() {
            let l = stage - 1;
            trainer.globals.phi[l] = select_columns(&trainer.globals.phi[l], &keep);
            trainer.globals.r = select_entries(&trainer.globals.r, &keep);
            trainer.globals.shape.widths[l] = keep.len();
            let lp = &mut trainer.encoder.layers[l];
            lp.w1 = select_columns(&select_rows(&lp.w1, &keep), &keep);
            lp.b1 = select_entries(&lp.b1, &keep);
            lp.w2 = select_columns(&select_rows(&lp.w2, &keep), &keep);
            lp.b2 = select_entries(&lp.b2, &keep);
            lp.w3 = select_rows(&lp.w3, &keep);
            lp.b3 = select_entries(&lp.b3, &keep);
            trainer.globals.hyper = hyper_from_cfg(&cfg, &trainer.globals.shape);
            if let Some(wai) = trainer.wai.as_mut() {
                wai.logits[l] = select_columns(&wai.logits[l], &keep);
                wai.slots[l] = AdamSlot::zeros_like(&wai.logits[l]);
            }
        }
        inferred.push(keep.len());
        prev = Some(trainer);
    }
    let mut trainer = prev.expect("at least one stage");
    trainer.cfg = cfg;
    trainer.cfg.widths = inferred.clone();
    Ok((trainer, inferred))
}
