//! Cross-domain transfer demo on the builtin synthetic domains.
//!
//! Trains the full model and the word-stream-only baseline on device
//! reviews, evaluates both on restaurant reviews, and prints the span-F1
//! gap. The two domains share POS patterns but no content vocabulary, so
//! the gap shows how much the syntax and prompt streams transfer.
//!
//! Run: cargo run --example cross_domain_transfer

use std::collections::BTreeSet;

use xprompt::corpus::{
    device_reviews_spec, generate_synthetic_corpus, restaurant_reviews_spec, spans_from_bio,
    AspectSpan, DomainCorpus,
};
use xprompt::evaluation::span_prf;
use xprompt::training::{predict_labels, train, Ablation, TrainConfig};

fn target_f1(config: &TrainConfig, source: &DomainCorpus, target: &DomainCorpus) -> f64 {
    let outcome = train(config, &[source], Some(target), None, None).expect("training runs");
    let mut predicted: Vec<BTreeSet<AspectSpan>> = Vec::new();
    let mut gold: Vec<BTreeSet<AspectSpan>> = Vec::new();
    for sentence in &target.test {
        let labels = predict_labels(&outcome.model, sentence, config).expect("inference runs");
        predicted.push(spans_from_bio(&labels).expect("repaired output is valid"));
        gold.push(spans_from_bio(sentence.bio_labels.as_ref().unwrap()).unwrap());
    }
    span_prf(&predicted, &gold).expect("aligned sentences").2
}

fn main() {
    let source = generate_synthetic_corpus(101, &device_reviews_spec("device", 60)).unwrap();
    let target =
        generate_synthetic_corpus(202, &restaurant_reviews_spec("restaurant", 60)).unwrap();
    println!(
        "device -> restaurant: {} train sentences, {} test sentences",
        source.train.len(),
        target.test.len()
    );

    let base = TrainConfig {
        epochs: 30,
        freeze_backbone: false,
        min_count: 2,
        ..TrainConfig::default()
    };
    for ablation in [Ablation::Full, Ablation::BackboneOnly] {
        let config = TrainConfig {
            ablation,
            ..base.clone()
        };
        let f1 = target_f1(&config, &source, &target);
        println!("{:>13}: target span F1 {f1:.3}", ablation.label());
    }
}
