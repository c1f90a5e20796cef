//! Bag-of-words corpora: UCI-format loading, held-out token splits, and
//! mini-batch streaming.

use crate::rng::RngStream;
use flate2::read::GzDecoder;
use rand_distr::Distribution;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: index out of range ({what})")]
    IndexOutOfRange { line: usize, what: String },
    #[error("line {line}: count must be positive")]
    CountNotPositive { line: usize },
    #[error("header claims {expected} entries but body has {found}")]
    NnzMismatch { expected: usize, found: usize },
    #[error("vocabulary has {found} entries, corpus expects {expected}")]
    VocabSizeMismatch { expected: usize, found: usize },
    #[error("label file: {0}")]
    BadLabels(String),
}

/// A sparse document-term count matrix with its vocabulary and optional
/// 1-based class labels.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Per-document (term_id, count) pairs, term ids 0-based and sorted.
    pub docs: Vec<Vec<(u32, u32)>>,
    pub vocab_size: usize,
    pub vocab: Vec<String>,
    /// Labels in 1..=num_classes when present.
    pub labels: Option<Vec<u32>>,
    pub num_classes: Option<u32>,
}

impl Corpus {
    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc(&self, i: usize) -> &[(u32, u32)] {
        &self.docs[i]
    }

    pub fn doc_tokens(&self, i: usize) -> u64 {
        self.docs[i].iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        (0..self.num_docs()).map(|i| self.doc_tokens(i)).sum()
    }

    pub fn from_docs(docs: Vec<Vec<(u32, u32)>>, vocab_size: usize) -> Self {
        let vocab = (0..vocab_size).map(|i| format!("w{i}")).collect();
        Corpus {
            docs,
            vocab_size,
            vocab,
            labels: None,
            num_classes: None,
        }
    }

    /// Attach 1-based labels covering 1..=C.
    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self, CorpusError> {
        if labels.len() != self.num_docs() {
            return Err(CorpusError::BadLabels(format!(
                "{} labels for {} documents",
                labels.len(),
                self.num_docs()
            )));
        }
        let c = *labels.iter().max().unwrap_or(&0);
        if c < 2 || labels.contains(&0) {
            return Err(CorpusError::BadLabels(
                "labels must lie in 1..=C with C >= 2".into(),
            ));
        }
        self.labels = Some(labels);
        self.num_classes = Some(c);
        Ok(self)
    }
}

/// Per-token 70/30-style split of a corpus into train and test matrices
/// whose elementwise sum reproduces the original counts.
#[derive(Debug, Clone)]
pub struct HeldoutSplit {
    pub train: Corpus,
    pub test: Corpus,
}

/// A sampled set of document indices plus the dataset-to-batch ratio ρ.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub doc_indices: Vec<usize>,
    pub ratio: f64,
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, CorpusError> {
    let f = File::open(path)?;
    if path.extension().map(|e| e == "gz").unwrap_or(false) {
        Ok(Box::new(GzDecoder::new(f)))
    } else {
        Ok(Box::new(f))
    }
}

/// Load a UCI bag-of-words corpus: three header lines (N, V, NNZ) followed by
/// `doc term count` triples, all 1-indexed. Reads `.gz` transparently.
pub fn load_uci_bow<P: AsRef<Path>, Q: AsRef<Path>>(
    docword_path: P,
    vocab_path: Q,
) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(open_maybe_gz(docword_path.as_ref())?);
    let mut lines = reader.lines().enumerate();

    let mut header = |name: &str| -> Result<usize, CorpusError> {
        let (idx, line) = lines.next().ok_or_else(|| CorpusError::Malformed {
            line: 0,
            reason: format!("missing {name} header"),
        })?;
        let line = line?;
        line.trim().parse().map_err(|_| CorpusError::Malformed {
            line: idx + 1,
            reason: format!("bad {name} header: {line:?}"),
        })
    };
    let n = header("N")?;
    let v = header("V")?;
    let nnz = header("NNZ")?;

    let mut docs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    let mut found = 0usize;
    for (idx, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split_whitespace();
        let parse = |s: Option<&str>| -> Result<u64, CorpusError> {
            s.and_then(|x| x.parse().ok())
                .ok_or_else(|| CorpusError::Malformed {
                    line: idx + 1,
                    reason: format!("expected `doc term count`, got {t:?}"),
                })
        };
        let (d, w, c) = (parse(it.next())?, parse(it.next())?, parse(it.next())?);
        if it.next().is_some() {
            return Err(CorpusError::Malformed {
                line: idx + 1,
                reason: "trailing fields".into(),
            });
        }
        if d < 1 || d as usize > n {
            return Err(CorpusError::IndexOutOfRange {
                line: idx + 1,
                what: format!("doc {d} of {n}"),
            });
        }
        if w < 1 || w as usize > v {
            return Err(CorpusError::IndexOutOfRange {
                line: idx + 1,
                what: format!("term {w} of {v}"),
            });
        }
        if c == 0 {
            return Err(CorpusError::CountNotPositive { line: idx + 1 });
        }
        docs[(d - 1) as usize].push(((w - 1) as u32, c as u32));
        found += 1;
    }
    if found != nnz {
        return Err(CorpusError::NnzMismatch {
            expected: nnz,
            found,
        });
    }
    for doc in &mut docs {
        doc.sort_unstable_by_key(|&(t, _)| t);
    }

    let vocab_reader = BufReader::new(open_maybe_gz(vocab_path.as_ref())?);
    let vocab: Vec<String> = vocab_reader
        .lines()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if vocab.len() != v {
        return Err(CorpusError::VocabSizeMismatch {
            expected: v,
            found: vocab.len(),
        });
    }

    Ok(Corpus {
        docs,
        vocab_size: v,
        vocab,
        labels: None,
        num_classes: None,
    })
}

/// Write a corpus in UCI bag-of-words format.
pub fn write_uci_bow<P: AsRef<Path>, Q: AsRef<Path>>(
    corpus: &Corpus,
    docword_path: P,
    vocab_path: Q,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(docword_path)?);
    let nnz: usize = corpus.docs.iter().map(|d| d.len()).sum();
    writeln!(w, "{}", corpus.num_docs())?;
    writeln!(w, "{}", corpus.vocab_size)?;
    writeln!(w, "{nnz}")?;
    for (d, doc) in corpus.docs.iter().enumerate() {
        for &(t, c) in doc {
            writeln!(w, "{} {} {}", d + 1, t + 1, c)?;
        }
    }
    w.flush()?;
    let mut vw = BufWriter::new(File::create(vocab_path)?);
    for term in &corpus.vocab {
        writeln!(vw, "{term}")?;
    }
    vw.flush()?;
    Ok(())
}

/// Load one 1-based integer label per line.
pub fn load_labels<P: AsRef<Path>>(path: P, corpus: Corpus) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(open_maybe_gz(path.as_ref())?);
    let mut labels = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        labels.push(
            t.parse()
                .map_err(|_| CorpusError::BadLabels(format!("bad label {t:?}")))?,
        );
    }
    corpus.with_labels(labels)
}

/// Thin every count cell with Binomial(count, frac) into a train matrix,
/// leaving the complement as test; T + Y equals the original counts exactly.
pub fn split_heldout(corpus: &Corpus, frac: f64, rng: &mut RngStream) -> HeldoutSplit {
    assert!(frac > 0.0 && frac < 1.0, "split fraction must be in (0,1)");
    let mut train_docs = Vec::with_capacity(corpus.num_docs());
    let mut test_docs = Vec::with_capacity(corpus.num_docs());
    for doc in &corpus.docs {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for &(term, count) in doc {
            let kept = rand_distr::Binomial::new(count as u64, frac)
                .unwrap()
                .sample(rng) as u32;
            if kept > 0 {
                tr.push((term, kept));
            }
            if count - kept > 0 {
                te.push((term, count - kept));
            }
        }
        train_docs.push(tr);
        test_docs.push(te);
    }
    let mk = |docs| Corpus {
        docs,
        vocab_size: corpus.vocab_size,
        vocab: corpus.vocab.clone(),
        labels: corpus.labels.clone(),
        num_classes: corpus.num_classes,
    };
    HeldoutSplit {
        train: mk(train_docs),
        test: mk(test_docs),
    }
}

/// Sample a mini-batch of `batch_size` distinct documents; ρ = N / batch_size.
pub fn next_batch(corpus: &Corpus, batch_size: usize, rng: &mut RngStream) -> MiniBatch {
    let n = corpus.num_docs();
    assert!(
        batch_size >= 1 && batch_size <= n,
        "batch size {batch_size} out of range 1..={n}"
    );
    MiniBatch {
        doc_indices: rng.sample_without_replacement(n, batch_size),
        ratio: n as f64 / batch_size as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("datm-corpus-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_minimal_corpus() {
        let dw = write_tmp("mini.docword.txt", "2\n3\n2\n1 1 4\n2 3 1\n");
        let vp = write_tmp("mini.vocab.txt", "alpha\nbeta\ngamma\n");
        let c = load_uci_bow(&dw, &vp).unwrap();
        assert_eq!(c.num_docs(), 2);
        assert_eq!(c.vocab_size, 3);
        assert_eq!(c.docs[0], vec![(0, 4)]);
        assert_eq!(c.docs[1], vec![(2, 1)]);
        assert_eq!(c.vocab[1], "beta");
    }

    #[test]
    fn nnz_mismatch_is_an_error() {
        let dw = write_tmp("bad.docword.txt", "2\n3\n5\n1 1 4\n2 3 1\n");
        let vp = write_tmp("bad.vocab.txt", "a\nb\nc\n");
        assert!(matches!(
            load_uci_bow(&dw, &vp),
            Err(CorpusError::NnzMismatch { expected: 5, found: 2 })
        ));
    }

    #[test]
    fn out_of_range_and_zero_count_rejected() {
        let dw = write_tmp("oor.docword.txt", "2\n3\n1\n1 4 2\n");
        let vp = write_tmp("oor.vocab.txt", "a\nb\nc\n");
        assert!(matches!(
            load_uci_bow(&dw, &vp),
            Err(CorpusError::IndexOutOfRange { .. })
        ));
        let dw = write_tmp("zc.docword.txt", "2\n3\n1\n1 2 0\n");
        assert!(matches!(
            load_uci_bow(&dw, &vp),
            Err(CorpusError::CountNotPositive { line: 4 })
        ));
    }

    #[test]
    fn round_trip_preserves_counts() {
        let c = Corpus::from_docs(vec![vec![(0, 4), (2, 1)], vec![(1, 7)]], 3);
        let dw = std::env::temp_dir().join("datm-corpus-tests/rt.docword.txt");
        let vp = std::env::temp_dir().join("datm-corpus-tests/rt.vocab.txt");
        std::fs::create_dir_all(dw.parent().unwrap()).unwrap();
        write_uci_bow(&c, &dw, &vp).unwrap();
        let back = load_uci_bow(&dw, &vp).unwrap();
        assert_eq!(back.docs, c.docs);
        assert_eq!(back.vocab, c.vocab);
    }

    #[test]
    fn gzip_reading_is_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = std::env::temp_dir().join("datm-corpus-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let gz_path = dir.join("mini.docword.txt.gz");
        let mut enc = GzEncoder::new(File::create(&gz_path).unwrap(), Compression::default());
        enc.write_all(b"1\n2\n1\n1 2 3\n").unwrap();
        enc.finish().unwrap();
        let vp = write_tmp("gz.vocab.txt", "x\ny\n");
        let c = load_uci_bow(&gz_path, &vp).unwrap();
        assert_eq!(c.docs[0], vec![(1, 3)]);
    }

    #[test]
    fn split_conserves_every_cell() {
        let c = Corpus::from_docs(
            vec![vec![(0, 10)], vec![(1, 3), (2, 5)], vec![]],
            3,
        );
        let mut rng = RngStream::new(123, 0);
        let split = split_heldout(&c, 0.7, &mut rng);
        for d in 0..c.num_docs() {
            let mut total = vec![0u32; 3];
            for &(t, cnt) in &split.train.docs[d] {
                total[t as usize] += cnt;
            }
            for &(t, cnt) in &split.test.docs[d] {
                total[t as usize] += cnt;
            }
            let mut want = vec![0u32; 3];
            for &(t, cnt) in &c.docs[d] {
                want[t as usize] += cnt;
            }
            assert_eq!(total, want);
        }
    }

    #[test]
    fn split_extreme_fraction_leaves_test_nearly_empty() {
        let c = Corpus::from_docs(vec![vec![(0, 1000)]], 1);
        let mut rng = RngStream::new(5, 0);
        let split = split_heldout(&c, 1.0 - 1e-9, &mut rng);
        assert_eq!(split.test.total_tokens(), 0);
        assert_eq!(split.train.total_tokens(), 1000);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let c = Corpus::from_docs(vec![vec![(0, 50), (1, 20)], vec![(2, 9)]], 3);
        let a = split_heldout(&c, 0.7, &mut RngStream::new(9, 4));
        let b = split_heldout(&c, 0.7, &mut RngStream::new(9, 4));
        assert_eq!(a.train.docs, b.train.docs);
        assert_eq!(a.test.docs, b.test.docs);
    }

    #[test]
    fn batch_ratio_and_bounds() {
        let c = Corpus::from_docs(vec![vec![]; 18845], 2);
        let mut rng = RngStream::new(2, 0);
        let b = next_batch(&c, 200, &mut rng);
        assert!((b.ratio - 94.225).abs() < 1e-12);
        assert_eq!(b.doc_indices.len(), 200);

        let full = next_batch(&c, 18845, &mut rng);
        assert_eq!(full.ratio, 1.0);
        assert_eq!(full.doc_indices.len(), 18845);
    }

    #[test]
    #[should_panic]
    fn batch_larger_than_corpus_panics() {
        let c = Corpus::from_docs(vec![vec![]; 4], 2);
        next_batch(&c, 5, &mut RngStream::new(0, 0));
    }
}
