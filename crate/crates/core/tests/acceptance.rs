//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit
//! if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use bacon_core::data::blobs::{make_blobs, BlobSpec};
use bacon_core::data::bsyn::{self, PixelDtype};
use bacon_core::data::{idx, load_mnist_dir, sha256_hex, Normalization};
use bacon_core::distill::{run_distillation, DistillConfig, Distiller, Snapshot};
use bacon_core::eval::{coreset_random, evaluate, EvalConfig};
use bacon_core::featurenet::{FeatureNet, FeatureNetConfig, Head};
use bacon_core::gradcheck::check_gradient;
use bacon_core::losses::{self, LossConfig, Pairing, SigmaPolicy};
use bacon_core::tensor::{Tape, Tensor};
use bacon_core::theory::{
    estimate_risk_direct, estimate_risk_theorem1, jensen_gap, DistributionSpec, PointPair, RiskConfig,
};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

// ---- 1: gradients -------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn loss_value(which: usize, z: &[f64], shape: (usize, usize), anchors: &Tensor, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![shape.0, shape.1], z.to_vec()).unwrap());
    loss_var(&mut tape, which, v, anchors, cfg).map(|o| tape.value(o).item().unwrap()).unwrap()
}

fn loss_var(
    tape: &mut Tape,
    which: usize,
    z: bacon_core::Var,
    anchors: &Tensor,
    cfg: &LossConfig,
) -> bacon_core::Result<bacon_core::Var> {
    let stats = losses::estimate_class_stats(0, anchors, cfg)?;
    let pick = match cfg.pairing {
        Pairing::AnchorMean => None,
        Pairing::Pairwise => Some(anchors),
    };
    match which {
        0 => losses::loss_lh(tape, z, &stats, pick),
        1 => losses::loss_tv(tape, z, anchors),
        2 => losses::loss_clip(tape, z, &stats, pick),
        _ => Ok(losses::loss_total(tape, z, &stats, anchors, cfg)?.total),
    }
}

fn grad_case(which: usize, z: &Tensor, anchors: &Tensor, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let out = loss_var(&mut tape, which, v, anchors, cfg).unwrap();
    tape.backward(out).unwrap();
    let analytic = tape.grad(v).unwrap().data().to_vec();
    let shape = (z.shape()[0], z.shape()[1]);
    check_gradient(|x| loss_value(which, x, shape, anchors, cfg), z.data(), &analytic, FD_STEP).max_relative_error
}

/// Synthetic rows sitting 1e-3 (in embedding units, far beyond the
/// difference step) to either side of the clip kinks at 0 and 1.
fn kink_instance(r: &mut rand_chacha::ChaCha8Rng) -> (Tensor, Tensor, LossConfig) {
    let (k, n, m) = (r.random_range(2..5), r.random_range(2..5), r.random_range(1..3));
    let anchors = random_matrix(r, k, n, 2.0);
    let cfg = LossConfig {
        sigma_policy: SigmaPolicy::PerDimension,
        pairing: Pairing::AnchorMean,
        lambda: r.random_range(0.0..1.0),
        ..LossConfig::default()
    };
    let sigma = oracle_sigma(&anchors, &cfg);
    let mean = oracle_mean(&anchors);
    let z: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            (0..n)
                .map(|d| {
                    let kink = if r.random_bool(0.5) { 0.0 } else { 1.0 };
                    let side = if r.random_bool(0.5) { 1e-3 } else { -1e-3 };
                    mean[d] + sigma[d] * kink + side
                })
                .collect()
        })
        .collect();
    (tensor(&z), tensor(&anchors), cfg)
}

fn pixel_objective(net: &FeatureNet, pixels: &Tensor, anchors: &Tensor, cfg: &LossConfig, leaf: bool) -> (f64, Option<Vec<f64>>) {
    let mut tape = Tape::new();
    let x = if leaf { tape.leaf(pixels.clone()) } else { tape.constant(pixels.clone()) };
    let z = net.forward(&mut tape, x, Head::Embedding, false).unwrap().output;
    let stats = losses::estimate_class_stats(0, anchors, cfg).unwrap();
    let j = losses::loss_total(&mut tape, z, &stats, anchors, cfg).unwrap().total;
    let value = tape.value(j).item().unwrap();
    if !leaf {
        return (value, None);
    }
    tape.backward(j).unwrap();
    (value, Some(tape.grad(x).unwrap().data().to_vec()))
}

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut kinks = 0;
    for i in 0..120 {
        let which = i % 4;
        let (z, anchors, cfg) = if i % 3 == 0 {
            kinks += 1;
            kink_instance(&mut r)
        } else {
            let (k, n, m) = (r.random_range(1..5), r.random_range(2..6), r.random_range(1..4));
            let cfg = random_loss_config(&mut r);
            (tensor(&random_matrix(&mut r, m, n, 2.0)), tensor(&random_matrix(&mut r, k, n, 2.0)), cfg)
        };
        let e = grad_case(which, &z, &anchors, &cfg);
        worst = worst.max(e);
        count += 1;
    }
    // Full per-step pixel gradient through a small convnet.
    for i in 0..12 {
        let net = FeatureNet::new(FeatureNetConfig {
            conv_blocks: 2,
            channels: 3,
            seed: 40 + i,
            ..FeatureNetConfig::convnet(1, 8, 8, 3)
        })
        .unwrap();
        let pixels = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
        let real = Tensor::new(vec![4, 1, 8, 8], (0..256).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
        let anchors = net.infer(&real, Head::Embedding).unwrap();
        let cfg = random_loss_config(&mut r);
        let (_, grad) = pixel_objective(&net, &pixels, &anchors, &cfg, true);
        let e = check_gradient(
            |x| pixel_objective(&net, &Tensor::new(vec![2, 1, 8, 8], x.to_vec()).unwrap(), &anchors, &cfg, false).0,
            pixels.data(),
            &grad.unwrap(),
            FD_STEP,
        )
        .max_relative_error;
        worst = worst.max(e);
        count += 1;
    }
    check(worst < GRAD_TOL, format!("max relative error {worst:.2e} over {count} instances"))?;
    Ok(format!("{count} instances ({kinks} clip-kink straddles), max relative error {worst:.2e}"))
}

// ---- 2: direct vs decomposition ------------------------------------------

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut cases = 0;
    let mut worst_z = 0.0f64;
    for i in 0..24u64 {
        let spec = DistributionSpec::IndependentGaussians {
            mu_real: r.random_range(-1.0..1.0),
            sigma_real: r.random_range(0.3..2.0),
            mu_syn: r.random_range(-1.0..1.0),
            sigma_syn: r.random_range(0.3..2.0),
            dim: r.random_range(1..6),
        };
        let eps = r.random_range(0.5..4.0);
        let cfg = RiskConfig::new(spec, eps, 20_000, 1000 + i);
        let d = estimate_risk_direct(&cfg).map_err(|e| e.to_string())?;
        let t = estimate_risk_theorem1(&cfg).map_err(|e| e.to_string())?;
        let se = (d.stderr.powi(2) + t.stderr.powi(2)).sqrt();
        let z = if se > 0.0 { (d.value - t.value).abs() / se } else { 0.0 };
        worst_z = worst_z.max(z);
        check(d.agrees_with(&t, 3.0), format!("spec {i}: direct {} vs theorem1 {} (z = {z:.2})", d.value, t.value))?;
        cases += 1;
    }
    let mut exact = 0;
    for i in 0..8u64 {
        let pairs: Vec<PointPair> = (0..r.random_range(1..6))
            .map(|_| PointPair {
                real: (0..3).map(|_| r.random_range(-3.0..3.0)).collect(),
                synthetic: (0..3).map(|_| r.random_range(-3.0..3.0)).collect(),
            })
            .collect();
        let cfg = RiskConfig::new(DistributionSpec::PointMasses { pairs }, r.random_range(0.5..5.0), 100, i);
        let d = estimate_risk_direct(&cfg).map_err(|e| e.to_string())?;
        let t = estimate_risk_theorem1(&cfg).map_err(|e| e.to_string())?;
        check(d.value == t.value, format!("point masses {i}: {} vs {}", d.value, t.value))?;
        exact += 1;
    }
    Ok(format!(
        "{cases} Gaussian specs within 3 SE (max z {worst_z:.2}), {exact} point-mass specs exact"
    ))
}

// ---- 3: Jensen ------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = r.random_range(1..50);
        let v: Vec<f64> = (0..k).map(|_| (r.random_range(-20.0..5.0f64)).exp()).collect();
        let (lhs, rhs) = jensen_gap(&v).map_err(|e| e.to_string())?;
        if lhs < rhs - 1e-12 {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} violations"))?;
    Ok("10000 vectors, 0 violations".into())
}

// ---- 4: monotonicity in epsilon ------------------------------------------

fn criterion_4() -> Outcome {
    let grid = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut values = Vec::new();
    for (name, f) in [
        ("direct", estimate_risk_direct as fn(&RiskConfig) -> bacon_core::Result<_>),
        ("theorem1", estimate_risk_theorem1),
    ] {
        let est: Vec<_> = grid
            .iter()
            .map(|&e| f(&RiskConfig::new(DistributionSpec::unit_gaussians(2), e, 20_000, 4)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for w in est.windows(2) {
            let tol = 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            check(
                w[1].value <= w[0].value + tol,
                format!("{name}: R({}) = {} > R({}) = {}", w[1].epsilon, w[1].value, w[0].epsilon, w[0].value),
            )?;
        }
        values.push(format!(
            "{name} [{}]",
            est.iter().map(|e| format!("{:.3}", e.value)).collect::<Vec<_>>().join(", ")
        ));
    }
    Ok(values.join("; "))
}

// ---- 5: oracle equivalence -------------------------------------------------

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for term in 0..3 {
        for i in 0..50 {
            let (k, n, m) = (r.random_range(1..6), r.random_range(1..8), r.random_range(1..5));
            let cfg = random_loss_config(&mut r);
            let z = random_matrix(&mut r, m, n, 3.0);
            let a = random_matrix(&mut r, k, n, 3.0);
            let got = loss_value(term, &tensor(&z).into_data(), (m, n), &tensor(&a), &cfg);
            let want = match term {
                0 => oracle_lh(&z, &a, &cfg),
                1 => oracle_tv(&z, &a),
                _ => oracle_clip(&z, &a, &cfg),
            };
            let err = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
            check(err <= 1e-12, format!("term {term} instance {i}: {got} vs oracle {want}"))?;
        }
    }
    Ok(format!("150 instances (LH, TV, CLIP × 50), max deviation {worst:.1e}"))
}

// ---- 6: lambda endpoints and affinity -------------------------------------

fn criterion_6() -> Outcome {
    let mut r = rng(606);
    for i in 0..50 {
        let (k, n, m) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..4));
        let z = tensor(&random_matrix(&mut r, m, n, 2.0));
        let a = tensor(&random_matrix(&mut r, k, n, 2.0));
        let base = random_loss_config(&mut r);
        let at = |l: f64| losses::evaluate_terms(&z, &a, 0, &base.clone().with_lambda(l)).unwrap();
        let one = at(1.0);
        check(one.total == -one.lh.unwrap() + one.tv.unwrap(), format!("instance {i}: J(1) endpoint"))?;
        let zero = at(0.0);
        check(zero.total == -zero.lh.unwrap() + zero.clip.unwrap(), format!("instance {i}: J(0) endpoint"))?;
        let (l, d) = (r.random_range(0.0..0.5), r.random_range(0.0..0.5));
        let (j0, j1) = (at(l), at(l + d));
        let slope = d * (j0.tv.unwrap() - j0.clip.unwrap());
        let scale = j0.total.abs().max(j1.total.abs()).max(1.0);
        check(
            ((j1.total - j0.total) - slope).abs() <= 1e-13 * scale * 8.0,
            format!("instance {i}: J({}) - J({l}) = {} vs {slope}", l + d, j1.total - j0.total),
        )?;
    }
    Ok("50 instances: endpoints exact, affine in lambda to rounding".into())
}

// ---- 7: blobs trend ---------------------------------------------------------

fn blob_eval() -> EvalConfig {
    EvalConfig {
        seeds: 5,
        epochs: 300,
        batch_size: 32,
        classifier: FeatureNetConfig::mlp(16, vec![64], 10),
        ..EvalConfig::paper()
    }
}

fn blob_distill(ipc: usize) -> DistillConfig {
    DistillConfig {
        outer_steps: 200,
        anchors_per_class: 64,
        net: FeatureNetConfig::mlp(16, vec![64], 10),
        ..DistillConfig::paper(ipc)
    }
}

fn criterion_7() -> Outcome {
    let (train, test) = make_blobs(&BlobSpec::default()).map_err(|e| e.to_string())?;
    let eval = blob_eval();
    let mut means = Vec::new();
    for ipc in [1, 10] {
        let (set, _) = run_distillation(&train, &blob_distill(ipc)).map_err(|e| e.to_string())?;
        let bacon = evaluate(&set, &test, &eval).map_err(|e| e.to_string())?;
        let random = evaluate(&coreset_random(&train, ipc, 0).map_err(|e| e.to_string())?, &test, &eval)
            .map_err(|e| e.to_string())?;
        means.push((bacon.mean, random.mean));
    }
    let [(b1, r1), (b10, r10)] = [means[0], means[1]];
    let summary = format!(
        "IPC-1 bacon {:.1}% vs random {:.1}%; IPC-10 bacon {:.1}% vs random {:.1}%",
        100.0 * b1,
        100.0 * r1,
        100.0 * b10,
        100.0 * r10
    );
    check(b1 - r1 >= 0.05, format!("IPC-1 gap below 5 points: {summary}"))?;
    check(b10 >= b1 && r10 >= r1, format!("IPC-10 below IPC-1: {summary}"))?;
    Ok(summary)
}

// ---- 8: MNIST trend (opt-in) -------------------------------------------------

/// `None` means skipped.
fn criterion_8() -> Option<Outcome> {
    let root = std::env::var_os("BACON_DATA_ROOT")?;
    let (train, test) = load_mnist_dir(Path::new(&root)).ok()?;
    let run = || -> Result<String, String> {
        let eval = EvalConfig { seeds: 3, ..EvalConfig::desk() };
        let all = DistillConfig::desk(10);
        let clip_only = DistillConfig {
            loss: LossConfig::default().with_terms(false, false, true),
            ..all.clone()
        };
        let score = |cfg: &DistillConfig| -> Result<f64, String> {
            let (set, _) = run_distillation(&train, cfg).map_err(|e| e.to_string())?;
            Ok(evaluate(&set, &test, &eval).map_err(|e| e.to_string())?.mean)
        };
        let bacon = score(&all)?;
        let clip = score(&clip_only)?;
        let random = evaluate(&coreset_random(&train, 10, 0).map_err(|e| e.to_string())?, &test, &eval)
            .map_err(|e| e.to_string())?
            .mean;
        let summary = format!(
            "IPC-10 bacon {:.1}%, random {:.1}%, clip-only {:.1}%",
            100.0 * bacon,
            100.0 * random,
            100.0 * clip
        );
        check(bacon - random >= 0.02, format!("bacon vs random below 2 points: {summary}"))?;
        check(bacon - clip >= 0.02, format!("all terms vs clip-only below 2 points: {summary}"))?;
        Ok(summary)
    };
    Some(run())
}

// ---- 9: determinism ------------------------------------------------------------

fn criterion_9() -> Outcome {
    let (train, _) = make_blobs(&BlobSpec::default()).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let cfg = DistillConfig {
        outer_steps: 40,
        seed: 9,
        ..blob_distill(2)
    };
    let digest = || -> Result<String, String> {
        let (set, _) = pool.install(|| run_distillation(&train, &cfg)).map_err(|e| e.to_string())?;
        Ok(sha256_hex(&bsyn::encode(&set, PixelDtype::F64)))
    };
    let (a, b) = (digest()?, digest()?);
    check(a == b, format!("digests differ: {a} vs {b}"))?;
    Ok(format!("BSYN digest {}… reproduced", &a[..16]))
}

// ---- 10: format round trips ------------------------------------------------------

fn criterion_10() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let golden: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixtures.join("tiny-golden.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let as_u8 = |k: &str| -> Vec<u8> { golden[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u8).collect() };
    for name in ["tiny-images.idx3-ubyte", "tiny-images.idx3-ubyte.gz"] {
        let ds = idx::load_idx_with(
            fixtures.join(name),
            fixtures.join("tiny-labels.idx1-ubyte"),
            Some(&Normalization::identity(1)),
        )
        .map_err(|e| e.to_string())?;
        let scaled: Vec<f64> = golden["scaled"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        check(ds.images().data() == &scaled[..], format!("{name}: pixels differ from golden"))?;
        check(ds.images().shape() == [3, 1, 4, 5], format!("{name}: shape {:?}", ds.images().shape()))?;
        let labels: Vec<usize> = as_u8("labels").iter().map(|&l| l as usize).collect();
        check(ds.labels() == &labels[..], format!("{name}: labels differ"))?;
    }
    let raw = idx::parse_images(&std::fs::read(fixtures.join("tiny-images.idx3-ubyte")).unwrap()).map_err(|e| e.to_string())?;
    check(raw.pixels == as_u8("pixels"), "raw pixel bytes differ".into())?;

    let (train, _) = make_blobs(&BlobSpec::default()).map_err(|e| e.to_string())?;
    let cfg = DistillConfig { outer_steps: 12, ..blob_distill(2) };
    let (full, _) = run_distillation(&train, &cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("set.bsyn");
    bsyn::save_synthetic(&full, &path).map_err(|e| e.to_string())?;
    let back = bsyn::load_synthetic(&path).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(back.images()) == bits(full.images()) && back.labels() == full.labels(), "BSYN round trip".into())?;

    let mut d = Distiller::new(&train, cfg.clone()).map_err(|e| e.to_string())?;
    for _ in 0..5 {
        d.step().map_err(|e| e.to_string())?;
    }
    let snap_path = dir.path().join("snap.json");
    d.snapshot().save(&snap_path).map_err(|e| e.to_string())?;
    drop(d);
    let snap = Snapshot::load(&snap_path).map_err(|e| e.to_string())?;
    let mut resumed = Distiller::from_snapshot(&train, cfg, snap).map_err(|e| e.to_string())?;
    resumed.run_with(|_| Ok(()), |_| Ok(())).map_err(|e| e.to_string())?;
    check(bits(resumed.synthetic().images()) == bits(full.images()), "snapshot resume diverged".into())?;
    Ok("IDX golden (raw and gzip), BSYN bit-exact, snapshot resume bit-exact".into())
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Option<Outcome>>)> = vec![
        ("gradient suite", Box::new(|| Some(criterion_1()))),
        ("theorem 1 equivalence", Box::new(|| Some(criterion_2()))),
        ("jensen property", Box::new(|| Some(criterion_3()))),
        ("risk monotone in epsilon", Box::new(|| Some(criterion_4()))),
        ("loss oracle equivalence", Box::new(|| Some(criterion_5()))),
        ("lambda endpoints and affinity", Box::new(|| Some(criterion_6()))),
        ("blobs trend", Box::new(|| Some(criterion_7()))),
        ("mnist trend (opt-in)", Box::new(criterion_8)),
        ("determinism", Box::new(|| Some(criterion_9()))),
        ("format round trips", Box::new(|| Some(criterion_10()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Some(Ok(msg)) => println!("criterion {:>2} {name}: PASS ({msg}) [{secs:.1}s]", i + 1),
            Some(Err(msg)) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({msg}) [{secs:.1}s]", i + 1);
            }
            None => println!(
                "criterion {:>2} {name}: SKIP (set BACON_DATA_ROOT to a directory holding the MNIST IDX files)",
                i + 1
            ),
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
