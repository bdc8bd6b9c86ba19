//! BACON vs random coreset on Gaussian blobs.

use bacon_core::data::blobs::{make_blobs, BlobSpec};
use bacon_core::distill::{run_distillation, DistillConfig};
use bacon_core::eval::{coreset_random, evaluate, EvalConfig};
use bacon_core::featurenet::FeatureNetConfig;

fn main() -> bacon_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(200, |s| s.parse().unwrap());
    let (train, test) = make_blobs(&BlobSpec::default())?;
    let eval = EvalConfig {
        epochs: 300,
        batch_size: 32,
        classifier: FeatureNetConfig::mlp(16, vec![64], 10),
        ..EvalConfig::paper()
    };
    for ipc in [1, 10] {
        let t = std::time::Instant::now();
        let cfg = DistillConfig {
            outer_steps: steps,
            anchors_per_class: 64,
            net: FeatureNetConfig::mlp(16, vec![64], 10),
            ..DistillConfig::paper(ipc)
        };
        let (set, hist) = run_distillation(&train, &cfg)?;
        let bacon = evaluate(&set, &test, &eval)?;
        let random = evaluate(&coreset_random(&train, ipc, 0)?, &test, &eval)?;
        println!(
            "ipc {ipc}: bacon {:.3} ± {:.3}  random {:.3} ± {:.3}  J {:.3} -> {:.3}  ({:.1}s)",
            bacon.mean,
            bacon.std,
            random.mean,
            random.std,
            hist[0].loss,
            hist.last().unwrap().loss,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
