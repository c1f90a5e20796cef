//! The hierarchical synthetic corpus really rewards depth under exact
//! inference: the Gibbs oracle's 2-layer perplexity beats its 1-layer one
//! on every split. This backs the encoder-path depth comparison in the
//! acceptance suite.

mod common;
use common::hierarchical_corpus;
use datm_core::corpus::split_heldout;
use datm_core::decoder::{DecoderHyper, GlobalParams, NetworkShape};
use datm_core::gibbs::gibbs_perplexity;
use datm_core::rng::RngStream;

#[test]
fn exact_inference_prefers_the_deep_model() {
    let corpus = hierarchical_corpus(90, 18, 3, 800, 99);
    for seed in 0..3u64 {
        let mut split_rng = RngStream::new(200 + seed, 900);
        let split = split_heldout(&corpus, 0.7, &mut split_rng);
        let mut run = |widths: Vec<usize>| -> f64 {
            let shape = NetworkShape::new(widths, 90);
            let hyper: DecoderHyper<f64> = DecoderHyper::default_for(&shape);
            let mut rng = RngStream::new(7000 + seed, 7100);
            let g0 = GlobalParams::init_random(shape, hyper, &mut rng);
            gibbs_perplexity(&split, &g0, 400, 200, &mut rng).unwrap()
        };
        let p1 = run(vec![18]);
        let p2 = run(vec![18, 3]);
        assert!(
            p2 <= p1,
            "seed {seed}: 2-layer {p2:.2} should not exceed 1-layer {p1:.2}"
        );
    }
}
