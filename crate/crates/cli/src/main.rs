//! Command-line surface: training (joint, layer-wise, supervised),
//! held-out perplexity, classification, latent encoding, topic-hierarchy
//! export, the Gibbs oracle, synthetic-corpus generation, and timing.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use datm_core::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use datm_core::config::{ThetaMode, TrainConfig};
use datm_core::corpus::{load_labels, load_uci_bow, split_heldout, write_uci_bow, Corpus};
use datm_core::decoder::{DecoderHyper, NetworkShape};
use datm_core::encoder::{encode, encode_mean, NoiseSpec, Variant};
use datm_core::eval::{
    classification_error, encoder_theta1_provider, export_topic_tree, timing_report,
    write_topic_tree_dot, write_topic_tree_text, PerplexityAccum,
};
use datm_core::gibbs::{gibbs_infer_doc, gibbs_perplexity};
use datm_core::rng::RngStream;
use datm_core::supervised::{predict, train_supervised};
use datm_core::trainer::{train_joint_with, train_layerwise};
use datm_core::{GlobalParams, Trainer};
use ndarray::{Array1, Array2};
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "datm",
    about = "Deep gamma-hierarchy topic modeling with hybrid MCMC/variational inference",
    version
)]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for document-parallel work (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Inference variant: whai, wai, ghai, or iwhai.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Joint training on a fixed network shape.
    Train(TrainArgs),
    /// Greedy layer-wise training that infers each hidden layer's width.
    TrainLayerwise(TrainLayerwiseArgs),
    /// Held-out perplexity from a checkpoint, continuing the sampler to
    /// collect posterior samples.
    EvalPpl(EvalPplArgs),
    /// Label prediction (and error rate when labels are given).
    Classify(ClassifyArgs),
    /// Emit per-document latent weights as CSV.
    Encode(EncodeArgs),
    /// Export the topic hierarchy as text plus a DOT graph.
    Topics(TopicsArgs),
    /// Batch Gibbs oracle on a tiny corpus.
    OracleGibbs(OracleGibbsArgs),
    /// Generate a synthetic corpus (optionally labeled).
    Generate(GenerateArgs),
    /// Per-document timing of the encoder path against the Gibbs path.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// UCI bag-of-words count file (header N, V, NNZ; .gz transparent).
    #[arg(long)]
    docword: PathBuf,
    /// Vocabulary file, one term per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Optional label file, one 1-based class per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct CommonTrainArgs {
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    /// Posterior samples to collect after burn-in.
    #[arg(long)]
    collect: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    step_a: Option<f64>,
    #[arg(long)]
    step_b: Option<f64>,
    #[arg(long)]
    step_c: Option<f64>,
    #[arg(long)]
    m_floor: Option<f64>,
    #[arg(long)]
    rsvi_b: Option<u32>,
    #[arg(long)]
    enc_lr: Option<f64>,
    /// Extra key = value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl CommonTrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(w) = &self.widths {
            cfg.widths = w.clone();
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.collect {
            cfg.collect = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = Some(v);
        }
        if let Some(v) = self.step_a {
            cfg.step_a = v;
        }
        if let Some(v) = self.step_b {
            cfg.step_b = v;
        }
        if let Some(v) = self.step_c {
            cfg.step_c = v;
        }
        if let Some(v) = self.m_floor {
            cfg.m_floor = v;
        }
        if let Some(v) = self.rsvi_b {
            cfg.rsvi_b = v;
        }
        if let Some(v) = self.enc_lr {
            cfg.enc_lr = v;
        }
        for pair in &self.sets {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {pair:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Checkpoint output path.
    #[arg(long)]
    save: PathBuf,
    /// Hold out this token fraction for testing and report perplexity at
    /// the end (training then uses only the retained tokens).
    #[arg(long)]
    heldout: Option<f64>,
    /// Train the supervised head after the label-free phase (needs --labels).
    #[arg(long)]
    supervised: bool,
}

#[derive(Args)]
struct TrainLayerwiseArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long)]
    save: PathBuf,
    /// Width budget of the first layer.
    #[arg(long)]
    k1_max: Option<usize>,
    /// Number of hidden layers to grow.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    iters_per_stage: Option<u64>,
    /// Prune topics whose shrinkage weight falls below this (0 disables).
    #[arg(long)]
    prune_u: Option<f64>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Posterior samples to collect (default: the checkpoint's collect).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    heldout_frac: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// mean or sampled θ for evaluation.
    #[arg(long)]
    theta_mode: Option<ThetaMode>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Monte-Carlo draws per document.
    #[arg(long, default_value_t = 50)]
    n_collect: usize,
    /// CSV output: doc id, predicted class, per-class probabilities.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    theta_mode: Option<ThetaMode>,
}

#[derive(Args)]
struct TopicsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file matching the training corpus.
    #[arg(long)]
    vocab: PathBuf,
    /// Words shown per topic.
    #[arg(long, default_value_t = 15)]
    top_words: usize,
    /// Keep edges with weight above this.
    #[arg(long, default_value_t = 0.05)]
    edge_threshold: f64,
    /// Layer range, e.g. 1,3 (default: all layers).
    #[arg(long, value_delimiter = ',')]
    layer_range: Option<Vec<usize>>,
    /// Output prefix; writes <prefix>.txt and <prefix>.dot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleGibbsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 600)]
    sweeps: usize,
    #[arg(long, default_value_t = 300)]
    burn_in: usize,
    #[arg(long, default_value_t = 0.7)]
    heldout_frac: f64,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Save the Gibbs-trained globals (with a fresh, untrained encoder) as
    /// a regular checkpoint.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for docword.txt, vocab.txt (and labels.txt).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    /// Emit class-dependent top-layer shapes and a labels file.
    #[arg(long)]
    classes: Option<usize>,
    /// Top-layer gamma shape of the generator.
    #[arg(long, default_value_t = 0.4)]
    r_shape: f64,
    /// Gamma rate policy of the generator (smaller = longer documents).
    #[arg(long, default_value_t = 0.04)]
    c_rate: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Documents to time (at least 100 for the report).
    #[arg(long, default_value_t = 100)]
    docs: usize,
    /// Gibbs sweeps per document on the iterative path.
    #[arg(long, default_value_t = 100)]
    gibbs_sweeps: usize,
}

fn base_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(variant) = cli.variant {
        cfg.variant = variant;
    }
    Ok(cfg)
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let corpus = load_uci_bow(&args.docword, &args.vocab)
        .with_context(|| format!("loading corpus {}", args.docword.display()))?;
    match &args.labels {
        Some(path) => Ok(load_labels(path, corpus)?),
        None => Ok(corpus),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .context("configuring the thread pool")?;
        }
    }
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(&cli, args),
        Cmd::TrainLayerwise(args) => cmd_train_layerwise(&cli, args),
        Cmd::EvalPpl(args) => cmd_eval_ppl(&cli, args),
        Cmd::Classify(args) => cmd_classify(args),
        Cmd::Encode(args) => cmd_encode(args),
        Cmd::Topics(args) => cmd_topics(args),
        Cmd::OracleGibbs(args) => cmd_oracle_gibbs(&cli, args),
        Cmd::Generate(args) => cmd_generate(&cli, args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    args.common.apply(&mut cfg)?;
    if let Some(frac) = args.heldout {
        cfg.heldout_frac = 1.0 - frac;
    }
    cfg.validate()?;
    let corpus = load_corpus(&args.corpus)?;

    if args.supervised {
        if corpus.labels.is_none() {
            bail!("--supervised needs --labels");
        }
        eprintln!(
            "supervised training: {} label-free epochs then {} supervised epochs",
            cfg.unsup_epochs, cfg.sup_epochs
        );
        let model = train_supervised::<f64>(&corpus, cfg)?;
        save_checkpoint(
            &args.save,
            &model.trainer,
            Some((&model.classifier, &model.cls_opt)),
        )?;
        println!("saved {}", args.save.display());
        return Ok(());
    }

    let (train_part, accum_split) = match args.heldout {
        None => (corpus.clone(), None),
        Some(frac) => {
            let mut split_rng = RngStream::new(cfg.split_seed, 900);
            let split = split_heldout(&corpus, 1.0 - frac, &mut split_rng);
            eprintln!(
                "held out {:.0}% of tokens: {} train / {} test",
                frac * 100.0,
                split.train.total_tokens(),
                split.test.total_tokens()
            );
            (split.train.clone(), Some(split))
        }
    };

    let mut accum = match &accum_split {
        Some(split) => Some(PerplexityAccum::new(&split.test)?),
        None => None,
    };
    let theta_mode = cfg.theta_mode;
    let seed = cfg.seed;
    let variant = cfg.variant;
    let rsvi_b = cfg.rsvi_b;
    let mut last_report = std::time::Instant::now();
    let mut sample_idx = 0u64;
    let trainer = train_joint_with::<f64>(
        &train_part,
        cfg,
        |g, enc| {
            if let (Some(accum), Some(split)) = (accum.as_mut(), accum_split.as_ref()) {
                let cfg = datm_core::encoder::EncodeCfg {
                    variant,
                    rsvi_b,
                };
                let provider = encoder_theta1_provider(
                    &split.train,
                    enc,
                    g,
                    cfg,
                    theta_mode,
                    seed,
                    sample_idx,
                );
                accum.absorb(&g.phi[0], &provider);
                sample_idx += 1;
            }
        },
        |it, b| {
            if last_report.elapsed().as_secs() >= 5 {
                eprintln!(
                    "iter {it}: ELBO {:.1} (recon {:.1})",
                    b.total, b.recon
                );
                last_report = std::time::Instant::now();
            }
        },
    )?;
    save_checkpoint(&args.save, &trainer, None)?;
    println!("saved {}", args.save.display());
    if let Some(accum) = accum {
        println!(
            "heldout perplexity over {} posterior samples: {:.2}",
            accum.samples(),
            accum.finish()
        );
    }
    Ok(())
}

fn cmd_train_layerwise(cli: &Cli, args: &TrainLayerwiseArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    args.common.apply(&mut cfg)?;
    if let Some(v) = args.k1_max {
        cfg.k1_max = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.iters_per_stage {
        cfg.iters_per_stage = v;
    }
    if let Some(v) = args.prune_u {
        cfg.prune_threshold = v;
    }
    cfg.validate()?;
    let corpus = load_corpus(&args.corpus)?;
    let (trainer, widths) = train_layerwise::<f64>(&corpus, cfg)?;
    println!(
        "inferred structure: {}",
        widths
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join("-")
    );
    save_checkpoint(&args.save, &trainer, None)?;
    println!("saved {}", args.save.display());
    Ok(())
}

fn cmd_eval_ppl(_cli: &Cli, args: &EvalPplArgs) -> Result<()> {
    let loaded: LoadedCheckpoint<f64> = load_checkpoint(&args.model)?;
    let mut trainer = loaded.trainer;
    if let Some(seed) = args.split_seed {
        trainer.cfg.split_seed = seed;
    }
    if let Some(mode) = args.theta_mode {
        trainer.cfg.theta_mode = mode;
    }
    let frac = args.heldout_frac.map(|f| 1.0 - f).unwrap_or(trainer.cfg.heldout_frac);
    let samples = args.samples.unwrap_or(trainer.cfg.collect);
    let corpus = load_corpus(&args.corpus)?;
    let mut split_rng = RngStream::new(trainer.cfg.split_seed, 900);
    let split = split_heldout(&corpus, frac, &mut split_rng);
    let mut accum = PerplexityAccum::new(&split.test)?;
    let enc_cfg = trainer.encode_cfg();
    let theta_mode = trainer.cfg.theta_mode;
    let seed = trainer.cfg.seed;
    for s in 0..samples {
        trainer.step(&split.train)?;
        let provider = encoder_theta1_provider(
            &split.train,
            &trainer.encoder,
            &trainer.globals,
            enc_cfg,
            theta_mode,
            seed,
            s as u64,
        );
        accum.absorb(&trainer.globals.phi[0], &provider);
        if (s + 1) % 50 == 0 {
            eprintln!("collected {}/{samples} samples", s + 1);
        }
    }
    println!(
        "heldout perplexity over {samples} posterior samples: {:.2}",
        accum.finish()
    );
    Ok(())
}

fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let loaded: LoadedCheckpoint<f64> = load_checkpoint(&args.model)?;
    let Some((classifier, _)) = loaded.classifier else {
        bail!("checkpoint holds no classifier; train with --supervised first");
    };
    let trainer = loaded.trainer;
    let corpus = load_corpus(&args.corpus)?;
    let enc_cfg = trainer.encode_cfg();
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write!(out, "doc,predicted")?;
    for c in 1..=classifier.num_classes {
        write!(out, ",p{c}")?;
    }
    writeln!(out)?;
    let mut predictions = Vec::with_capacity(corpus.num_docs());
    for i in 0..corpus.num_docs() {
        let mut rng = RngStream::derived(trainer.cfg.seed, &[0x636c73, i as u64]);
        let (label, probs) = predict(
            corpus.doc(i),
            &trainer.encoder,
            &trainer.globals,
            &classifier,
            enc_cfg,
            args.n_collect,
            &mut rng,
        );
        write!(out, "{i},{label}")?;
        for p in probs.iter() {
            write!(out, ",{p:.6}")?;
        }
        writeln!(out)?;
        predictions.push(label);
    }
    out.flush()?;
    println!("wrote {}", args.out.display());
    if let Some(labels) = &corpus.labels {
        println!(
            "test error: {:.2}%",
            classification_error(&predictions, labels)
        );
    }
    Ok(())
}

fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let loaded: LoadedCheckpoint<f64> = load_checkpoint(&args.model)?;
    let trainer = loaded.trainer;
    let corpus = load_corpus(&args.corpus)?;
    let enc_cfg = trainer.encode_cfg();
    let mode = args.theta_mode.unwrap_or(trainer.cfg.theta_mode);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write!(out, "doc")?;
    for (l, &k) in trainer.globals.shape.widths.iter().enumerate() {
        for t in 0..k {
            write!(out, ",l{}t{}", l + 1, t)?;
        }
    }
    writeln!(out)?;
    for i in 0..corpus.num_docs() {
        let thetas: Vec<Array1<f64>> = match mode {
            ThetaMode::Mean => {
                encode_mean(corpus.doc(i), &trainer.encoder, &trainer.globals, enc_cfg)
            }
            ThetaMode::Sampled => {
                let mut rng = RngStream::derived(trainer.cfg.seed, &[0x656e63f, i as u64]);
                encode(
                    corpus.doc(i),
                    &trainer.encoder,
                    &trainer.globals,
                    enc_cfg,
                    NoiseSpec::Draw(&mut rng),
                )
                .theta
            }
        };
        write!(out, "{i}")?;
        for theta in &thetas {
            for v in theta.iter() {
                write!(out, ",{v:.6}")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_topics(args: &TopicsArgs) -> Result<()> {
    let loaded: LoadedCheckpoint<f64> = load_checkpoint(&args.model)?;
    let g = loaded.trainer.globals;
    let vocab: Vec<String> = std::fs::read_to_string(&args.vocab)?
        .lines()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if vocab.len() != g.shape.vocab_size {
        bail!(
            "vocabulary has {} terms, model expects {}",
            vocab.len(),
            g.shape.vocab_size
        );
    }
    let range = match &args.layer_range {
        Some(r) if r.len() == 2 => (r[0], r[1]),
        Some(r) if r.len() == 1 => (r[0], r[0]),
        Some(_) => bail!("--layer-range expects one or two layers"),
        None => (1, g.depth()),
    };
    let tree = export_topic_tree(&g, &vocab, range, args.top_words, args.edge_threshold);
    let txt = args.out.with_extension("txt");
    let dot = args.out.with_extension("dot");
    write_topic_tree_text(&tree, &txt)?;
    write_topic_tree_dot(&tree, &dot)?;
    println!(
        "wrote {} ({} topics) and {} ({} edges)",
        txt.display(),
        tree.nodes.len(),
        dot.display(),
        tree.edges.len()
    );
    Ok(())
}

fn cmd_oracle_gibbs(cli: &Cli, args: &OracleGibbsArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if !args.widths.is_empty() {
        cfg.widths = args.widths.clone();
    }
    if let Some(seed) = args.split_seed {
        cfg.split_seed = seed;
    }
    let corpus = load_corpus(&args.corpus)?;
    if corpus.num_docs() > 500 || corpus.vocab_size > 200 {
        eprintln!(
            "note: the oracle is meant for tiny corpora (N <= 500, V <= 200); this one is {}x{}",
            corpus.num_docs(),
            corpus.vocab_size
        );
    }
    let mut split_rng = RngStream::new(cfg.split_seed, 900);
    let split = split_heldout(&corpus, 1.0 - args.heldout_frac, &mut split_rng);
    let shape = NetworkShape::new(cfg.widths.clone(), corpus.vocab_size);
    let mut hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
    if let Some(eta) = cfg.eta {
        hyper.eta = vec![eta; shape.depth()];
    }
    let mut rng = RngStream::new(cfg.seed, 7100);
    let g0 = datm_core::decoder::GlobalParams::init_random(shape, hyper, &mut rng);
    let ppl = gibbs_perplexity(&split, &g0, args.sweeps, args.burn_in, &mut rng)?;
    println!(
        "gibbs heldout perplexity over {} post-burn-in sweeps: {ppl:.2}",
        args.sweeps - args.burn_in
    );
    if let Some(path) = &args.save {
        // rerun the chain to a final state and package it with a fresh
        // (untrained) encoder in the standard checkpoint container
        let mut g = g0.clone();
        let mut state = datm_core::gibbs::GibbsState::init(&g, split.train.num_docs(), &mut rng);
        for _ in 0..args.sweeps {
            datm_core::gibbs::gibbs_sweep(&mut state, &split.train, &mut g, &mut rng);
        }
        let mut trainer = Trainer::new(cfg.clone(), corpus.vocab_size);
        trainer.globals = g;
        save_checkpoint(path, &trainer, None)?;
        println!("saved {}", path.display());
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let shape = NetworkShape::new(args.widths.clone(), args.vocab_size);
    let hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
    let mut rng = RngStream::new(cfg.seed, 9000);
    let mut truth = datm_core::decoder::GlobalParams::init_random(shape, hyper, &mut rng);
    // sparse, well-separated word topics
    let v = args.vocab_size;
    let k1 = args.widths[0];
    let block = (v / k1).max(1);
    let mut phi = Array2::zeros((v, k1));
    for t in 0..k1 {
        for j in 0..block {
            phi[((t * block + j) % v, t)] += 1.0 / block as f64;
        }
    }
    truth.phi[0] = phi;
    truth.hyper.c = args.c_rate;
    let top = *args.widths.last().unwrap();

    let (corpus, labels) = match args.classes {
        None => {
            truth.r = Array1::from_elem(top, args.r_shape);
            (truth.generate_synthetic(args.docs, &mut rng).0, None)
        }
        Some(classes) => {
            if classes < 2 || classes > top {
                bail!("--classes must lie in 2..={top}");
            }
            let per_class = args.docs / classes;
            let mut docs = Vec::new();
            let mut labels = Vec::new();
            for class in 0..classes {
                let mut r = Array1::from_elem(top, 0.05 * args.r_shape);
                for t in 0..top {
                    if t % classes == class {
                        r[t] = args.r_shape * 2.0;
                    }
                }
                truth.r = r;
                let (part, _) = truth.generate_synthetic(per_class, &mut rng);
                docs.extend(part.docs);
                labels.extend(std::iter::repeat(class as u32 + 1).take(per_class));
            }
            let mut order: Vec<usize> = (0..docs.len()).collect();
            for i in 0..order.len() {
                let j = i + rng.gen_range(order.len() - i);
                order.swap(i, j);
            }
            let docs: Vec<_> = order.iter().map(|&i| docs[i].clone()).collect();
            let labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
            (Corpus::from_docs(docs, v), Some(labels))
        }
    };
    let docword = args.out_dir.join("docword.txt");
    let vocab = args.out_dir.join("vocab.txt");
    write_uci_bow(&corpus, &docword, &vocab)?;
    println!(
        "wrote {} ({} docs, {} tokens) and {}",
        docword.display(),
        corpus.num_docs(),
        corpus.total_tokens(),
        vocab.display()
    );
    if let Some(labels) = labels {
        let path = args.out_dir.join("labels.txt");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for y in labels {
            writeln!(f, "{y}")?;
        }
        f.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let loaded: LoadedCheckpoint<f64> = load_checkpoint(&args.model)?;
    let trainer = loaded.trainer;
    let corpus = load_corpus(&args.corpus)?;
    let docs = args.docs.min(corpus.num_docs()).max(2);
    let enc_cfg = trainer.encode_cfg();

    let g: &GlobalParams = &trainer.globals;
    let enc_report = timing_report(
        |i| {
            std::hint::black_box(encode_mean(corpus.doc(i), &trainer.encoder, g, enc_cfg));
        },
        docs,
    );
    let mut rng = RngStream::new(trainer.cfg.seed, 7300);
    let gibbs_report = timing_report(
        |i| {
            std::hint::black_box(gibbs_infer_doc(corpus.doc(i), g, args.gibbs_sweeps, &mut rng));
        },
        docs,
    );
    println!("per-document inference time over {docs} documents:");
    println!(
        "  encoder path: {:.6} s/doc warm median ({:.6} s first call)",
        enc_report.warm_median_secs, enc_report.cold_secs
    );
    println!(
        "  gibbs path ({} sweeps): {:.6} s/doc warm median ({:.6} s first call)",
        args.gibbs_sweeps, gibbs_report.warm_median_secs, gibbs_report.cold_secs
    );
    println!(
        "  speedup (warm): {:.1}x",
        gibbs_report.warm_median_secs / enc_report.warm_median_secs.max(1e-12)
    );
    Ok(())
}
