//! Wall time of distillation steps and classifier epochs at MNIST shape.

use bacon_core::data::blobs::{make_blobs, BlobSpec};
use bacon_core::distill::{DistillConfig, Distiller};
use bacon_core::eval::{coreset_random, train_classifier, EvalConfig};

fn main() -> bacon_core::Result<()> {
    let (train, _) = make_blobs(&BlobSpec {
        train_per_class: 100,
        test_per_class: 10,
        shape: [1, 28, 28],
        ..BlobSpec::default()
    })?;
    let cfg = DistillConfig::desk(10);
    let mut d = Distiller::new(&train, cfg)?;
    let t = std::time::Instant::now();
    for _ in 0..3 {
        d.step()?;
    }
    println!("desk distill step: {:.2}s", t.elapsed().as_secs_f64() / 3.0);
    let set = coreset_random(&train, 10, 0)?;
    let eval = EvalConfig { epochs: 5, ..EvalConfig::desk() };
    let t = std::time::Instant::now();
    train_classifier(set.images(), set.labels(), eval.classifier.clone(), &eval, 0)?;
    println!("desk eval epoch (100 images): {:.3}s", t.elapsed().as_secs_f64() / 5.0);
    Ok(())
}
