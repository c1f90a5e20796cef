//! Lossless binary checkpoints: magic bytes "DATM", a format version, the
//! config echo, then one segment per module (decoder, encoder, sampler,
//! optimizer, RNG positions, optional softmax-logit state, optional
//! classifier). All floats are stored as 64-bit little-endian regardless of
//! the in-memory scalar; writes go through a temp file and an atomic rename.

use crate::config::{HeadKind, TrainConfig};
use crate::decoder::{DecoderHyper, GlobalParams, NetworkShape};
use crate::encoder::{EncoderOpt, EncoderParams, LayerParams};
use crate::opt::AdamSlot;
use crate::real::Real;
use crate::rng::RngStream;
use crate::sampler::{SamplerState, StepSchedule};
use crate::supervised::{ClassifierOpt, ClassifierParams, GaussianKlForm, MlpParams};
use crate::trainer::{Trainer, WaiState, STREAM_BATCH, STREAM_SAMPLER};
use ndarray::{Array1, Array2};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DATM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config embedded in checkpoint is invalid: {0}")]
    Config(#[from] crate::config::ConfigError),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.u64((v >> 64) as u64);
        self.u64(v as u64);
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn arr1<T: Real>(&mut self, a: &Array1<T>) {
        for &x in a.iter() {
            self.f64(x.as_f64());
        }
    }
    fn arr2<T: Real>(&mut self, a: &Array2<T>) {
        for &x in a.iter() {
            self.f64(x.as_f64());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        let hi = self.u64()? as u128;
        let lo = self.u64()? as u128;
        Ok((hi << 64) | lo)
    }
    fn arr1<T: Real>(&mut self, n: usize) -> Result<Array1<T>, CheckpointError> {
        let mut a = Array1::zeros(n);
        for i in 0..n {
            a[i] = T::of_f64(self.f64()?);
        }
        Ok(a)
    }
    fn arr2<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>, CheckpointError> {
        let mut a = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                a[(i, j)] = T::of_f64(self.f64()?);
            }
        }
        Ok(a)
    }
    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

fn segment(out: &mut Writer, tag: &[u8; 4], body: Writer) {
    out.bytes(tag);
    out.u64(body.buf.len() as u64);
    out.bytes(&body.buf);
}

/// A reloaded checkpoint: the trainer state plus the classifier when the
/// model was trained with labels.
pub struct LoadedCheckpoint<T> {
    pub trainer: Trainer<T>,
    pub classifier: Option<(ClassifierParams<T>, ClassifierOpt<T>)>,
}

/// Serialize the full training state.
pub fn save_checkpoint<T: Real, P: AsRef<Path>>(
    path: P,
    trainer: &Trainer<T>,
    classifier: Option<(&ClassifierParams<T>, &ClassifierOpt<T>)>,
) -> Result<(), CheckpointError> {
    let mut out = Writer::new();
    out.bytes(MAGIC);
    out.u32(VERSION);
    let cfg_text = trainer.cfg.to_kv_string();
    out.u32(cfg_text.len() as u32);
    out.bytes(cfg_text.as_bytes());

    // decoder
    let g = &trainer.globals;
    let mut dec = Writer::new();
    dec.u64(g.shape.vocab_size as u64);
    dec.u32(g.depth() as u32);
    for &k in &g.shape.widths {
        dec.u64(k as u64);
    }
    for &e in &g.hyper.eta {
        dec.f64(e.as_f64());
    }
    dec.f64(g.hyper.gamma0.as_f64());
    dec.f64(g.hyper.c0.as_f64());
    dec.f64(g.hyper.c.as_f64());
    for phi in &g.phi {
        dec.arr2(phi);
    }
    dec.arr1(&g.r);
    segment(&mut out, b"DEC0", dec);

    // encoder
    let mut enc = Writer::new();
    for l in &trainer.encoder.layers {
        enc.arr2(&l.w1);
        enc.arr1(&l.b1);
        enc.arr2(&l.w2);
        enc.arr1(&l.b2);
        enc.arr2(&l.w3);
        enc.arr1(&l.b3);
    }
    segment(&mut out, b"ENC0", enc);

    // sampler
    let mut smp = Writer::new();
    for m in &trainer.sampler.m {
        smp.arr1(m);
    }
    smp.f64(trainer.sampler.m_top.as_f64());
    smp.u64(trainer.sampler.t);
    smp.f64(trainer.sampler.schedule.a);
    smp.f64(trainer.sampler.schedule.b);
    smp.f64(trainer.sampler.schedule.c);
    smp.f64(trainer.sampler.m_floor.as_f64());
    smp.u8(trainer.sampler.initialized as u8);
    segment(&mut out, b"SMP0", smp);

    // encoder optimizer
    let mut opt = Writer::new();
    opt.u64(trainer.enc_opt.t);
    opt.f64(trainer.enc_opt.cfg.lr);
    opt.f64(trainer.enc_opt.cfg.beta1);
    opt.f64(trainer.enc_opt.cfg.beta2);
    opt.f64(trainer.enc_opt.cfg.eps);
    opt.f64(trainer.enc_opt.grad_clip);
    let (m2, m1) = trainer.enc_opt.moments();
    for layer in &m2 {
        for arr in layer {
            opt.arr2(arr);
        }
    }
    for layer in &m1 {
        for arr in layer {
            opt.arr1(arr);
        }
    }
    segment(&mut out, b"OPT0", opt);

    // rng positions and iteration counter
    let mut rng = Writer::new();
    rng.u64(trainer.iter);
    rng.u64(trainer.batch_rng.seed());
    rng.u64(trainer.batch_rng.stream_id());
    rng.u128(trainer.batch_rng.word_pos());
    rng.u64(trainer.sampler_rng.seed());
    rng.u64(trainer.sampler_rng.stream_id());
    rng.u128(trainer.sampler_rng.word_pos());
    segment(&mut out, b"RNG0", rng);

    if let Some(wai) = &trainer.wai {
        let mut w = Writer::new();
        w.u64(wai.t);
        for z in &wai.logits {
            w.arr2(z);
        }
        for s in &wai.slots {
            w.arr2(&s.m);
            w.arr2(&s.v);
        }
        segment(&mut out, b"WAI0", w);
    }

    if let Some((cls, cls_opt)) = classifier {
        let mut c = Writer::new();
        c.u8(match cls.head {
            HeadKind::Linear => 0,
            HeadKind::Nonlinear => 1,
        });
        c.u8(match cls.kl_form {
            GaussianKlForm::Exact => 0,
            GaussianKlForm::NormLog => 1,
        });
        c.u64(cls.num_classes as u64);
        c.u64(cls.mu.ncols() as u64);
        c.arr2(&cls.mu);
        c.arr2(&cls.rho);
        match &cls.mlp {
            None => c.u8(0),
            Some(m) => {
                c.u8(1);
                c.u64(m.w_m2.nrows() as u64); // a1
                c.u64(m.w_m3.nrows() as u64); // a2
                for w in &m.w_m1 {
                    c.arr2(w);
                }
                for b in &m.b_m1 {
                    c.arr1(b);
                }
                c.arr2(&m.w_m2);
                c.arr1(&m.b_m2);
                c.arr2(&m.w_m3);
                c.arr1(&m.b_m3);
            }
        }
        c.u64(cls_opt.t);
        c.f64(cls_opt.cfg.lr);
        let (m2, m1) = cls_opt.moment_arrays();
        for arr in m2 {
            c.arr2(arr);
        }
        for arr in m1 {
            c.arr1(arr);
        }
        segment(&mut out, b"CLS0", c);
    }

    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out.buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Deserialize a checkpoint, rebuilding the exact training state.
pub fn load_checkpoint<T: Real, P: AsRef<Path>>(
    path: P,
) -> Result<LoadedCheckpoint<T>, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader::new(&buf);
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config not utf-8: {e}")))?;
    let cfg = TrainConfig::from_kv_str(cfg_text)?;

    let mut globals: Option<GlobalParams<T>> = None;
    let mut encoder: Option<EncoderParams<T>> = None;
    let mut sampler: Option<SamplerState<T>> = None;
    let mut opt_seg: Option<Vec<u8>> = None;
    let mut rng_seg: Option<Vec<u8>> = None;
    let mut wai_seg: Option<Vec<u8>> = None;
    let mut cls_seg: Option<Vec<u8>> = None;

    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let body = r.take(len)?.to_vec();
        match &tag {
            b"DEC0" => {
                let mut b = Reader::new(&body);
                let vocab = b.u64()? as usize;
                let depth = b.u32()? as usize;
                let mut widths = Vec::with_capacity(depth);
                for _ in 0..depth {
                    widths.push(b.u64()? as usize);
                }
                let shape = NetworkShape::new(widths, vocab);
                let mut eta = Vec::with_capacity(depth);
                for _ in 0..depth {
                    eta.push(T::of_f64(b.f64()?));
                }
                let gamma0 = T::of_f64(b.f64()?);
                let c0 = T::of_f64(b.f64()?);
                let c = T::of_f64(b.f64()?);
                let mut phi = Vec::with_capacity(depth);
                for l in 1..=depth {
                    phi.push(b.arr2(shape.width(l - 1), shape.width(l))?);
                }
                let rr = b.arr1(shape.width(depth))?;
                globals = Some(GlobalParams {
                    shape,
                    phi,
                    r: rr,
                    hyper: DecoderHyper { eta, gamma0, c0, c },
                });
            }
            b"ENC0" => {
                let g = globals
                    .as_ref()
                    .ok_or_else(|| CheckpointError::Malformed("ENC0 before DEC0".into()))?;
                let mut b = Reader::new(&body);
                let mut layers = Vec::with_capacity(g.depth());
                for l in 1..=g.depth() {
                    let k = g.shape.width(l);
                    let below = g.shape.width(l - 1);
                    layers.push(LayerParams {
                        w1: b.arr2(k, k)?,
                        b1: b.arr1(k)?,
                        w2: b.arr2(k, k)?,
                        b2: b.arr1(k)?,
                        w3: b.arr2(k, below)?,
                        b3: b.arr1(k)?,
                    });
                }
                encoder = Some(EncoderParams { layers });
            }
            b"SMP0" => {
                let g = globals
                    .as_ref()
                    .ok_or_else(|| CheckpointError::Malformed("SMP0 before DEC0".into()))?;
                let mut b = Reader::new(&body);
                let mut m = Vec::with_capacity(g.depth());
                for l in 1..=g.depth() {
                    m.push(b.arr1(g.shape.width(l))?);
                }
                let m_top = T::of_f64(b.f64()?);
                let t = b.u64()?;
                let schedule = StepSchedule {
                    a: b.f64()?,
                    b: b.f64()?,
                    c: b.f64()?,
                };
                let m_floor = T::of_f64(b.f64()?);
                let initialized = b.u8()? != 0;
                sampler = Some(SamplerState {
                    m,
                    m_top,
                    t,
                    schedule,
                    m_floor,
                    initialized,
                });
            }
            b"OPT0" => opt_seg = Some(body),
            b"RNG0" => rng_seg = Some(body),
            b"WAI0" => wai_seg = Some(body),
            b"CLS0" => cls_seg = Some(body),
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "unknown segment {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }

    let globals = globals.ok_or_else(|| CheckpointError::Malformed("missing DEC0".into()))?;
    let encoder = encoder.ok_or_else(|| CheckpointError::Malformed("missing ENC0".into()))?;
    let sampler = sampler.ok_or_else(|| CheckpointError::Malformed("missing SMP0".into()))?;
    let opt_body = opt_seg.ok_or_else(|| CheckpointError::Malformed("missing OPT0".into()))?;
    let rng_body = rng_seg.ok_or_else(|| CheckpointError::Malformed("missing RNG0".into()))?;

    let mut b = Reader::new(&opt_body);
    let opt_t = b.u64()?;
    let adam = crate::opt::AdamCfg {
        lr: b.f64()?,
        beta1: b.f64()?,
        beta2: b.f64()?,
        eps: b.f64()?,
    };
    let grad_clip = b.f64()?;
    let mut enc_opt = EncoderOpt::new(&encoder, adam, grad_clip);
    enc_opt.t = opt_t;
    {
        let (mut m2, mut m1) = enc_opt.moments_mut();
        for layer in m2.iter_mut() {
            for arr in layer.iter_mut() {
                let (rows, cols) = arr.dim();
                **arr = b.arr2(rows, cols)?;
            }
        }
        for layer in m1.iter_mut() {
            for arr in layer.iter_mut() {
                let n = arr.len();
                **arr = b.arr1(n)?;
            }
        }
    }

    let mut b = Reader::new(&rng_body);
    let iter = b.u64()?;
    let batch_rng = {
        let seed = b.u64()?;
        let stream = b.u64()?;
        let pos = b.u128()?;
        RngStream::restore(seed, stream, pos)
    };
    let sampler_rng = {
        let seed = b.u64()?;
        let stream = b.u64()?;
        let pos = b.u128()?;
        RngStream::restore(seed, stream, pos)
    };
    debug_assert_eq!(batch_rng.stream_id(), STREAM_BATCH);
    debug_assert_eq!(sampler_rng.stream_id(), STREAM_SAMPLER);

    let wai = match wai_seg {
        None => None,
        Some(body) => {
            let mut b = Reader::new(&body);
            let t = b.u64()?;
            let mut logits = Vec::with_capacity(globals.depth());
            for l in 1..=globals.depth() {
                logits.push(b.arr2(globals.shape.width(l - 1), globals.shape.width(l))?);
            }
            let mut slots = Vec::with_capacity(globals.depth());
            for z in &logits {
                let mut slot = AdamSlot::zeros_like(z);
                let (rows, cols) = z.dim();
                slot.m = b.arr2(rows, cols)?;
                slot.v = b.arr2(rows, cols)?;
                slots.push(slot);
            }
            Some(WaiState { logits, slots, t })
        }
    };

    let classifier = match cls_seg {
        None => None,
        Some(body) => {
            let mut b = Reader::new(&body);
            let head = match b.u8()? {
                0 => HeadKind::Linear,
                1 => HeadKind::Nonlinear,
                other => {
                    return Err(CheckpointError::Malformed(format!("bad head tag {other}")))
                }
            };
            let kl_form = match b.u8()? {
                0 => GaussianKlForm::Exact,
                1 => GaussianKlForm::NormLog,
                other => {
                    return Err(CheckpointError::Malformed(format!("bad kl form {other}")))
                }
            };
            let num_classes = b.u64()? as usize;
            let feat_dim = b.u64()? as usize;
            let mu = b.arr2(num_classes, feat_dim)?;
            let rho = b.arr2(num_classes, feat_dim)?;
            let mlp = if b.u8()? == 1 {
                let a1 = b.u64()? as usize;
                let a2 = b.u64()? as usize;
                let widths = &globals.shape.widths;
                let sum_k: usize = widths.iter().sum();
                let mut w_m1 = Vec::new();
                for &k in widths {
                    w_m1.push(b.arr2(k, k)?);
                }
                let mut b_m1 = Vec::new();
                for &k in widths {
                    b_m1.push(b.arr1(k)?);
                }
                Some(MlpParams {
                    w_m1,
                    b_m1,
                    w_m2: b.arr2(a1, sum_k)?,
                    b_m2: b.arr1(a1)?,
                    w_m3: b.arr2(a2, a1)?,
                    b_m3: b.arr1(a2)?,
                })
            } else {
                None
            };
            let cls = ClassifierParams {
                head,
                num_classes,
                mu,
                rho,
                mlp,
                kl_form,
            };
            let t = b.u64()?;
            let lr = b.f64()?;
            let mut opt = ClassifierOpt::new(
                &cls,
                crate::opt::AdamCfg {
                    lr,
                    ..Default::default()
                },
            );
            opt.t = t;
            {
                let (m2, m1) = opt.moment_arrays_mut();
                for arr in m2 {
                    let (rows, cols) = arr.dim();
                    *arr = b.arr2(rows, cols)?;
                }
                for arr in m1 {
                    let n = arr.len();
                    *arr = b.arr1(n)?;
                }
            }
            Some((cls, opt))
        }
    };

    let trainer = Trainer {
        cfg,
        globals,
        encoder,
        enc_opt,
        sampler,
        wai,
        iter,
        batch_rng,
        sampler_rng,
    };
    Ok(LoadedCheckpoint {
        trainer,
        classifier,
    })
}

impl<T: Real> ClassifierOpt<T> {
    pub(crate) fn moment_arrays(&self) -> (Vec<&Array2<T>>, Vec<&Array1<T>>) {
        let mut m2 = vec![&self.mu.m, &self.mu.v, &self.rho.m, &self.rho.v];
        for s in &self.mlp2 {
            m2.push(&s.m);
            m2.push(&s.v);
        }
        let mut m1 = Vec::new();
        for s in &self.mlp1 {
            m1.push(&s.m);
            m1.push(&s.v);
        }
        (m2, m1)
    }

    pub(crate) fn moment_arrays_mut(&mut self) -> (Vec<&mut Array2<T>>, Vec<&mut Array1<T>>) {
        let mut m2 = vec![&mut self.mu.m, &mut self.mu.v, &mut self.rho.m, &mut self.rho.v];
        for s in self.mlp2.iter_mut() {
            m2.push(&mut s.m);
            m2.push(&mut s.v);
        }
        let mut m1 = Vec::new();
        for s in self.mlp1.iter_mut() {
            m1.push(&mut s.m);
            m1.push(&mut s.v);
        }
        (m2, m1)
    }
}
