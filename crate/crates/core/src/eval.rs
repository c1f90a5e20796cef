//! Held-out evaluation: per-heldout-word perplexity under posterior-averaged
//! layer-1 rates, classification error, topic-hierarchy export, and timing.

use crate::config::ThetaMode;
use crate::corpus::{Corpus, HeldoutSplit};
use crate::decoder::GlobalParams;
use crate::encoder::{encode, encode_mean, EncodeCfg, EncoderParams, NoiseSpec};
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the test split holds no tokens")]
    EmptyTestSplit,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Streaming accumulator for the per-heldout-word perplexity
///
///   exp{ −(1/y_··) Σ_v Σ_n y_vn ln( Σ_s Σ_k φ_vk^(1)s θ_kn^(1)s
///                                   / Σ_s Σ_v Σ_k φ_vk^(1)s θ_kn^(1)s ) }
///
/// absorbing one posterior sample at a time so collections never need to be
/// held in memory.
pub struct PerplexityAccum {
    test_nonzeros: Vec<Vec<(u32, u32)>>,
    num: Vec<Vec<f64>>,
    den: Vec<f64>,
    y_total: f64,
    samples: usize,
}

impl PerplexityAccum {
    pub fn new(test: &Corpus) -> Result<Self, EvalError> {
        let y_total = test.total_tokens();
        if y_total == 0 {
            return Err(EvalError::EmptyTestSplit);
        }
        let test_nonzeros: Vec<Vec<(u32, u32)>> = test.docs.clone();
        let num = test_nonzeros.iter().map(|d| vec![0.0; d.len()]).collect();
        Ok(PerplexityAccum {
            den: vec![0.0; test.num_docs()],
            test_nonzeros,
            num,
            y_total: y_total as f64,
            samples: 0,
        })
    }

    /// Fold in one posterior sample: φ^(1) plus a per-document θ^(1)
    /// provider (documents are processed independently in parallel).
    pub fn absorb<T: Real>(
        &mut self,
        phi1: &Array2<T>,
        theta1: &(dyn Fn(usize) -> Array1<T> + Sync),
    ) {
        let col_sums: Vec<f64> = (0..phi1.ncols())
            .map(|k| phi1.column(k).sum().as_f64())
            .collect();
        self.num
            .par_iter_mut()
            .zip(self.den.par_iter_mut())
            .zip(self.test_nonzeros.par_iter())
            .enumerate()
            .for_each(|(n, ((num, den), nz))| {
                let theta = theta1(n);
                let mut d = 0.0;
                for (k, &cs) in col_sums.iter().enumerate() {
                    d += theta[k].as_f64() * cs;
                }
                *den += d;
                for (slot, &(v, _)) in num.iter_mut().zip(nz) {
                    let mut s = 0.0;
                    for k in 0..col_sums.len() {
                        s += phi1[(v as usize, k)].as_f64() * theta[k].as_f64();
                    }
                    *slot += s;
                }
            });
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn finish(&self) -> f64 {
        let mut acc = 0.0;
        for (n, nz) in self.test_nonzeros.iter().enumerate() {
            if self.den[n] <= 0.0 {
                continue;
            }
            for (i, &(_, y)) in nz.iter().enumerate() {
                let ratio = (self.num[n][i] / self.den[n]).max(f64::MIN_POSITIVE);
                acc += y as f64 * ratio.ln();
            }
        }
        (-acc / self.y_total).exp()
    }
}

/// θ^(1) provider for one posterior sample of the globals: the deterministic
/// variational-mean downward pass, or one reparameterized draw per document.
pub fn encoder_theta1_provider<'a, T: Real>(
    train: &'a Corpus,
    enc: &'a EncoderParams<T>,
    g: &'a GlobalParams<T>,
    cfg: EncodeCfg,
    mode: ThetaMode,
    seed: u64,
    sample_idx: u64,
) -> impl Fn(usize) -> Array1<T> + Sync + 'a {
    move |doc_idx: usize| -> Array1<T> {
        let doc = train.doc(doc_idx);
        match mode {
            ThetaMode::Mean => encode_mean(doc, enc, g, cfg).swap_remove(0),
            ThetaMode::Sampled => {
                let mut rng =
                    RngStream::derived(seed, &[0x7070_6c00, sample_idx, doc_idx as u64]);
                encode(doc, enc, g, cfg, NoiseSpec::Draw(&mut rng))
                    .theta
                    .swap_remove(0)
            }
        }
    }
}

/// Perplexity of a held-out split under a collection of posterior samples,
/// encoding the training half of every document per sample.
pub fn perplexity<T: Real>(
    split: &HeldoutSplit,
    snapshots: &[GlobalParams<T>],
    enc: &EncoderParams<T>,
    cfg: EncodeCfg,
    mode: ThetaMode,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut accum = PerplexityAccum::new(&split.test)?;
    for (s, g) in snapshots.iter().enumerate() {
        let provider = encoder_theta1_provider(&split.train, enc, g, cfg, mode, seed, s as u64);
        accum.absorb(&g.phi[0], &provider);
    }
    Ok(accum.finish())
}

/// Test error rate in percent.
pub fn classification_error(predictions: &[u32], labels: &[u32]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    assert!(!predictions.is_empty());
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    100.0 * wrong as f64 / predictions.len() as f64
}

/// One topic node: its layer, index, strongest words after projection to the
/// word simplex, and (at the top layer) its shrinkage weight.
#[derive(Debug, Clone)]
pub struct TopicNode {
    pub layer: usize,
    pub index: usize,
    pub top_words: Vec<(String, f64)>,
    pub r: Option<f64>,
}

/// A weighted connection φ_{k'k}^(l) from topic k of layer l to unit k' of
/// layer l−1.
#[derive(Debug, Clone)]
pub struct TopicEdge {
    pub layer: usize,
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct TopicTree {
    pub nodes: Vec<TopicNode>,
    pub edges: Vec<TopicEdge>,
}

/// Extract the topic hierarchy over `layers` (inclusive range), keeping the
/// `top_words` strongest words per projected topic and the edges whose
/// weight clears `edge_threshold`.
pub fn export_topic_tree<T: Real>(
    g: &GlobalParams<T>,
    vocab: &[String],
    layers: (usize, usize),
    top_words: usize,
    edge_threshold: f64,
) -> TopicTree {
    let (lo, hi) = layers;
    assert!(lo >= 1 && hi <= g.depth() && lo <= hi);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for l in lo..=hi {
        for k in 0..g.shape.width(l) {
            let proj = g.project_topic(l, k);
            let mut order: Vec<usize> = (0..proj.len()).collect();
            order.sort_by(|&a, &b| proj[b].partial_cmp(&proj[a]).unwrap());
            let words = order
                .into_iter()
                .take(top_words)
                .map(|v| (vocab[v].clone(), proj[v].as_f64()))
                .collect();
            nodes.push(TopicNode {
                layer: l,
                index: k,
                top_words: words,
                r: (l == g.depth()).then(|| g.r[k].as_f64()),
            });
            if l > lo {
                for child in 0..g.shape.width(l - 1) {
                    let w = g.phi[l - 1][(child, k)].as_f64();
                    if w > edge_threshold {
                        edges.push(TopicEdge {
                            layer: l,
                            parent: k,
                            child,
                            weight: w,
                        });
                    }
                }
            }
        }
    }
    TopicTree { nodes, edges }
}

/// Plain-text rendering: one block per node, indented word lists, then the
/// edge list.
pub fn write_topic_tree_text<P: AsRef<Path>>(tree: &TopicTree, path: P) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for node in &tree.nodes {
        match node.r {
            Some(r) => writeln!(f, "layer {} topic {} (r = {:.6})", node.layer, node.index, r)?,
            None => writeln!(f, "layer {} topic {}", node.layer, node.index)?,
        }
        for (word, weight) in &node.top_words {
            writeln!(f, "    {word}  {weight:.6}")?;
        }
    }
    writeln!(f)?;
    for e in &tree.edges {
        writeln!(
            f,
            "edge layer{}:{} -> layer{}:{}  {:.6}",
            e.layer,
            e.parent,
            e.layer - 1,
            e.child,
            e.weight
        )?;
    }
    Ok(())
}

/// DOT rendering for standard graph tools.
pub fn write_topic_tree_dot<P: AsRef<Path>>(tree: &TopicTree, path: P) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "digraph topics {{")?;
    writeln!(f, "  rankdir=TB;")?;
    for node in &tree.nodes {
        let label: Vec<&str> = node
            .top_words
            .iter()
            .take(5)
            .map(|(w, _)| w.as_str())
            .collect();
        writeln!(
            f,
            "  \"L{}T{}\" [label=\"{}:{}\\n{}\"];",
            node.layer,
            node.index,
            node.layer,
            node.index,
            label.join("\\n")
        )?;
    }
    for e in &tree.edges {
        writeln!(
            f,
            "  \"L{}T{}\" -> \"L{}T{}\" [penwidth={:.2}];",
            e.layer,
            e.parent,
            e.layer - 1,
            e.child,
            (10.0 * e.weight).max(0.3)
        )?;
    }
    writeln!(f, "}}")?;
    Ok(())
}

/// Wall-clock seconds per document: the first call (cold) and the median of
/// the remaining calls (warm).
pub struct TimingReport {
    pub cold_secs: f64,
    pub warm_median_secs: f64,
    pub docs: usize,
}

pub fn timing_report(mut per_doc: impl FnMut(usize), docs: usize) -> TimingReport {
    assert!(docs >= 2);
    let mut times = Vec::with_capacity(docs);
    for i in 0..docs {
        let start = std::time::Instant::now();
        per_doc(i);
        times.push(start.elapsed().as_secs_f64());
    }
    let cold = times[0];
    let mut warm = times[1..].to_vec();
    warm.sort_by(|a, b| a.partial_cmp(b).unwrap());
    TimingReport {
        cold_secs: cold,
        warm_median_secs: warm[warm.len() / 2],
        docs,
    }
}
