use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bacon_core::data::bsyn::{self, PixelDtype};
use bacon_core::data::{load_cifar10_dir, load_mnist_dir, make_blobs, sha256_hex, write_atomic, Dataset, SyntheticSet};
use bacon_core::distill::{Distiller, Snapshot, StepReport};
use bacon_core::eval::{self, AblationRow, EvalReport};
use bacon_core::featurenet::FeatureNet;
use bacon_core::theory::{self, DistributionSpec, RiskConfig, RiskEstimate};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DatasetKind, GridKind, RunConfig, DATA_ROOT_ENV};
use crate::manifest::RunManifest;
use crate::{Failure, Invocation};

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    let root = || {
        cfg.data_root().ok_or_else(|| {
            Failure::Usage(format!("no data root: pass --data-root or set {DATA_ROOT_ENV}"))
        })
    };
    let loaded = match cfg.data.dataset {
        DatasetKind::Blobs => make_blobs(&cfg.data.blobs),
        DatasetKind::Mnist => load_mnist_dir(root()?),
        DatasetKind::Cifar10 => load_cifar10_dir(root()?),
    };
    loaded.map_err(|e| Failure::Usage(format!("loading {:?}: {e}", cfg.data.dataset)))
}

fn digests(train: &Dataset, test: &Dataset) -> BTreeMap<String, String> {
    BTreeMap::from([("train".into(), train.digest()), ("test".into(), test.digest())])
}

fn create_dir(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))
}

/// Loads data, then writes the manifest before any compute starts.
fn start(
    command: &str,
    inv: &Invocation,
    inputs: Value,
) -> Result<(Dataset, Dataset, RunManifest), Failure> {
    create_dir(&inv.out)?;
    let (train, test) = load_data(&inv.config)?;
    let current = digests(&train, &test);
    if let Some(old) = &inv.manifest {
        old.check_datasets(&current)?;
    }
    let mut m = RunManifest::new(command, inv.config.clone(), inputs, &inv.out);
    m.datasets = current;
    m.write()?;
    Ok((train, test, m))
}

/// Runs `body`, then records success or failure in the manifest.
fn finish<T>(m: &mut RunManifest, result: Result<T, Failure>) -> Result<T, Failure> {
    m.finish(result.is_ok())?;
    result
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_csv(history: &[StepReport]) -> Result<Vec<u8>, Failure> {
    csv_bytes(
        &["step", "loss", "lh", "tv", "clip", "grad_norm"],
        history.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.loss.to_string(),
                opt(r.lh),
                opt(r.tv),
                opt(r.clip),
                r.grad_norm.to_string(),
            ]
        }),
    )
}

// ---- distill --------------------------------------------------------------

pub fn distill(inv: Invocation, resume: bool) -> Result<(), Failure> {
    let (train, _test, mut m) = start("distill", &inv, json!({}))?;
    let result = distill_body(&inv, &train, resume, &mut m);
    finish(&mut m, result)
}

fn distill_body(inv: &Invocation, train: &Dataset, resume: bool, m: &mut RunManifest) -> Result<(), Failure> {
    let cfg = inv.config.distill.clone();
    let snap_path = inv.out.join("snapshot.json");
    let mut d = if resume && snap_path.exists() {
        let snap = Snapshot::load(&snap_path)?;
        eprintln!("resuming at step {}", snap.next_step);
        Distiller::from_snapshot(train, cfg.clone(), snap)?
    } else {
        Distiller::new(train, cfg.clone())?
    };
    let total = cfg.outer_steps;
    let every = (total / 20).max(1);
    d.run_with(
        |r| {
            if (r.step + 1) % every == 0 || r.step + 1 == total {
                eprintln!("step {}/{total}  J {:.6}  |grad| {:.3e}", r.step + 1, r.loss, r.grad_norm);
            }
            Ok(())
        },
        |s| s.save(&snap_path),
    )?;
    let history = d.history().to_vec();
    let (set, _) = d.into_parts();
    let bsyn_path = inv.out.join("synthetic.bsyn");
    let meta = json!({ "lambda": cfg.loss.lambda, "outer_steps": cfg.outer_steps, "ipc": cfg.ipc });
    bsyn::save_synthetic_with_sidecar(&set, &bsyn_path, PixelDtype::F64, meta)?;
    let hist_path = inv.out.join("history.csv");
    write_atomic(&hist_path, &history_csv(&history)?)?;
    let digest = sha256_hex(&std::fs::read(&bsyn_path).map_err(bacon_core::Error::from)?);
    m.outputs.insert("synthetic".into(), bsyn_path.display().to_string());
    m.outputs.insert("synthetic_sha256".into(), digest.clone());
    m.outputs.insert("history".into(), hist_path.display().to_string());
    println!("wrote {} ({} images, sha256 {digest})", bsyn_path.display(), set.len());
    Ok(())
}

// ---- eval -------------------------------------------------------------------

#[derive(Deserialize)]
struct EvalInputs {
    #[serde(default)]
    synthetic: Vec<PathBuf>,
    #[serde(default)]
    coreset: Vec<String>,
}

#[derive(Serialize)]
struct EvaluatedSet {
    label: String,
    method: String,
    images: usize,
    report: EvalReport,
}

#[derive(Serialize)]
struct PairedDelta {
    baseline: String,
    candidate: String,
    /// Candidate minus baseline accuracy, per seed.
    deltas: Vec<f64>,
    mean: f64,
    std: f64,
}

fn paired(a: &EvaluatedSet, b: &EvaluatedSet) -> PairedDelta {
    let deltas: Vec<f64> = b
        .report
        .accuracies
        .iter()
        .zip(&a.report.accuracies)
        .map(|(y, x)| y - x)
        .collect();
    let r = EvalReport::from_accuracies(deltas, String::new(), 0.0);
    PairedDelta {
        baseline: a.label.clone(),
        candidate: b.label.clone(),
        deltas: r.accuracies,
        mean: r.mean,
        std: r.std,
    }
}

pub fn eval(inv: Invocation, inputs: Value) -> Result<(), Failure> {
    let parsed: EvalInputs =
        serde_json::from_value(inputs.clone()).map_err(|e| Failure::Usage(format!("eval inputs: {e}")))?;
    if parsed.synthetic.is_empty() && parsed.coreset.is_empty() {
        return Err(Failure::Usage("nothing to evaluate: pass --synthetic and/or --coreset".into()));
    }
    if let Some(bad) = parsed.coreset.iter().find(|c| !["random", "herding"].contains(&c.as_str())) {
        return Err(Failure::Usage(format!("unknown coreset `{bad}`")));
    }
    let (train, test, mut m) = start("eval", &inv, inputs)?;
    let result = eval_body(&inv, &parsed, &train, &test);
    finish(&mut m, result)
}

fn eval_body(inv: &Invocation, inputs: &EvalInputs, train: &Dataset, test: &Dataset) -> Result<(), Failure> {
    let cfg = &inv.config;
    let mut sets: Vec<(String, SyntheticSet)> = Vec::new();
    for c in &inputs.coreset {
        let set = match c.as_str() {
            "random" => eval::coreset_random(train, cfg.distill.ipc, cfg.eval.seed)?,
            _ => {
                let [ch, h, w] = train.image_shape();
                let mut net_cfg = cfg.distill.net.clone().with_input(ch, h, w);
                net_cfg.classes = train.classes();
                net_cfg.seed = cfg.eval.seed;
                eval::coreset_herding(train, cfg.distill.ipc, &FeatureNet::new(net_cfg)?)?
            }
        };
        sets.push((c.clone(), set));
    }
    for p in &inputs.synthetic {
        let set = bsyn::load_synthetic(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        sets.push((p.display().to_string(), set));
    }
    let mut results = Vec::new();
    for (label, set) in sets {
        let report = eval::evaluate(&set, test, &cfg.eval)?;
        println!(
            "{label}: {:.2} ± {:.2} % over {} seeds",
            100.0 * report.mean,
            100.0 * report.std,
            report.accuracies.len()
        );
        results.push(EvaluatedSet {
            label,
            method: set.provenance.method.clone(),
            images: set.len(),
            report,
        });
    }
    let deltas: Vec<PairedDelta> = results[1..].iter().map(|b| paired(&results[0], b)).collect();
    for d in &deltas {
        println!(
            "delta {} - {}: {:+.2} ± {:.2} points",
            d.candidate,
            d.baseline,
            100.0 * d.mean,
            100.0 * d.std
        );
    }
    write_json(&inv.out.join("eval_report.json"), &json!({ "sets": results, "paired": deltas }))
}

// ---- verify -------------------------------------------------------------------

fn load_spec(cfg: &RunConfig) -> Result<DistributionSpec, Failure> {
    let bad = |m: String| Failure::Usage(format!("BadDistributionSpec: {m}"));
    let spec = match &cfg.verify.spec {
        None => DistributionSpec::unit_gaussians(cfg.verify.dim),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{path}: {e}")))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| bad(format!("{path}: {e}")))?;
            if value.get("kind").is_some() {
                serde_json::from_value(value).map_err(|e| bad(format!("{path}: {e}")))?
            } else {
                DistributionSpec::empirical_from_json(path).map_err(|e| bad(format!("{path}: {e}")))?
            }
        }
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    Ok(spec)
}

#[derive(Serialize)]
struct RiskRow {
    epsilon: f64,
    direct: RiskEstimate,
    theorem1: Option<RiskEstimate>,
    agree: Option<bool>,
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub fn verify(inv: Invocation) -> Result<(), Failure> {
    create_dir(&inv.out)?;
    let spec = load_spec(&inv.config)?;
    let mut m = RunManifest::new("verify", inv.config.clone(), json!({}), &inv.out);
    m.write()?;
    let result = verify_body(&inv, spec);
    finish(&mut m, result)
}

fn verify_body(inv: &Invocation, spec: DistributionSpec) -> Result<(), Failure> {
    let v = &inv.config.verify;
    let rows = v
        .epsilons
        .par_iter()
        .map(|&eps| -> Result<RiskRow, Failure> {
            let rc = RiskConfig::new(spec.clone(), eps, v.samples, v.seed);
            rc.validate().map_err(|e| Failure::Usage(format!("{}: {e}", e.kind())))?;
            let direct = theory::estimate_risk_direct(&rc)?;
            let theorem1 = match theory::estimate_risk_theorem1(&rc) {
                Ok(t) => Some(t),
                Err(bacon_core::Error::ConditionalUnavailable(_)) => None,
                Err(e) => return Err(e.into()),
            };
            let agree = theorem1.as_ref().map(|t| direct.agrees_with(t, v.agreement_k));
            Ok(RiskRow {
                epsilon: eps,
                direct,
                theorem1,
                agree,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut checks = Vec::new();
    let disagreements: Vec<String> = rows
        .iter()
        .filter(|r| r.agree == Some(false))
        .map(|r| format!("eps {}", r.epsilon))
        .collect();
    let compared = rows.iter().filter(|r| r.agree.is_some()).count();
    checks.push(Check {
        name: "risk_agreement",
        pass: disagreements.is_empty(),
        detail: if disagreements.is_empty() {
            format!("{compared} of {} epsilons compared, all within {} SE", rows.len(), v.agreement_k)
        } else {
            format!("disagree at {}", disagreements.join(", "))
        },
    });

    let mut order: Vec<&RiskRow> = rows.iter().collect();
    order.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let mut violations = Vec::new();
    for w in order.windows(2) {
        let pairs = [
            ("direct", Some(&w[0].direct), Some(&w[1].direct)),
            ("theorem1", w[0].theorem1.as_ref(), w[1].theorem1.as_ref()),
        ];
        for (name, a, b) in pairs {
            if let (Some(a), Some(b)) = (a, b) {
                let tol = v.agreement_k * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
                if b.value > a.value + tol {
                    violations.push(format!("{name} R({}) > R({})", b.epsilon, a.epsilon));
                }
            }
        }
    }
    checks.push(Check {
        name: "risk_monotone_in_epsilon",
        pass: violations.is_empty(),
        detail: if violations.is_empty() {
            format!("{} epsilons, non-increasing", rows.len())
        } else {
            violations.join("; ")
        },
    });

    let mut r = bacon_core::rng::stream(v.seed, &[7]);
    let mut jensen_bad = 0;
    for _ in 0..v.jensen_trials {
        let k = r.random_range(1..50);
        let p: Vec<f64> = (0..k).map(|_| r.random_range(-20.0..5.0f64).exp()).collect();
        let (lhs, rhs) = theory::jensen_gap(&p)?;
        if lhs < rhs - 1e-12 {
            jensen_bad += 1;
        }
    }
    checks.push(Check {
        name: "jensen",
        pass: jensen_bad == 0,
        detail: format!("{} vectors, {jensen_bad} violations", v.jensen_trials),
    });

    println!("{:>10}  {:>10}  {:>9}  {:>10}  {:>9}  agree", "epsilon", "direct", "se", "theorem1", "se");
    for row in &rows {
        let (t, tse) = match &row.theorem1 {
            Some(t) => (format!("{:.5}", t.value), format!("{:.2e}", t.stderr)),
            None => ("n/a".into(), "n/a".into()),
        };
        let agree = row.agree.map(|a| a.to_string()).unwrap_or_else(|| "n/a".into());
        println!(
            "{:>10}  {:>10.5}  {:>9.2e}  {t:>10}  {tse:>9}  {agree}",
            row.epsilon, row.direct.value, row.direct.stderr
        );
    }
    for c in &checks {
        println!("{}: {} ({})", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    let pass = checks.iter().all(|c| c.pass);
    write_json(
        &inv.out.join("verify.json"),
        &json!({ "spec": spec, "rows": rows, "checks": checks, "pass": pass }),
    )?;
    if pass {
        Ok(())
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        Err(Failure::Assertion(failed.join(", ")))
    }
}

// ---- ablate ---------------------------------------------------------------------

pub fn ablate(inv: Invocation) -> Result<(), Failure> {
    let cfg = &inv.config;
    let cells = match cfg.ablate.grid {
        GridKind::LossTerms => eval::loss_term_cells(&cfg.distill.loss),
        GridKind::Lambda => {
            let values = eval::parse_grid_values(&cfg.ablate.values).map_err(|e| Failure::Usage(e.to_string()))?;
            eval::lambda_cells(&cfg.distill.loss, &values)
        }
    };
    if cells.is_empty() {
        return Err(Failure::Usage("empty grid".into()));
    }
    let (train, test, mut m) = start("ablate", &inv, json!({}))?;
    let result = ablate_body(&inv, &cells, &train, &test, &m);
    if let Ok(files) = &result {
        m.outputs.extend(files.clone());
    }
    finish(&mut m, result.map(|_| ()))
}

fn ablate_body(
    inv: &Invocation,
    cells: &[eval::AblationCell],
    train: &Dataset,
    test: &Dataset,
    m: &RunManifest,
) -> Result<BTreeMap<String, String>, Failure> {
    let cfg = &inv.config;
    let cache = inv.out.join("cache");
    create_dir(&cache)?;
    let key = |cell: &eval::AblationCell| {
        let v = json!({ "cell": cell, "distill": cfg.distill, "eval": cfg.eval, "datasets": m.datasets });
        sha256_hex(&serde_json::to_vec(&v).expect("serializes"))
    };
    let rows = cells
        .par_iter()
        .map(|cell| -> Result<AblationRow, Failure> {
            let path = cache.join(format!("{}.json", key(cell)));
            if let Ok(bytes) = std::fs::read(&path) {
                if let Ok(row) = serde_json::from_slice::<AblationRow>(&bytes) {
                    eprintln!("{}: cached", cell.id);
                    return Ok(row);
                }
            }
            let row = eval::run_cell(train, test, cell, &cfg.distill, &cfg.eval);
            if row.error.is_none() {
                write_json(&path, &row)?;
            }
            eprintln!("{}: done", cell.id);
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut files = BTreeMap::new();
    let csv_path = inv.out.join("ablation.csv");
    eval::write_csv(&rows, &csv_path)?;
    files.insert("csv".into(), csv_path.display().to_string());
    if cfg.ablate.grid == GridKind::Lambda {
        let mut dat = String::from("# lambda mean std\n");
        for r in &rows {
            if let Some(rep) = &r.report {
                dat.push_str(&format!("{} {} {}\n", r.lambda, rep.mean, rep.std));
            }
        }
        let dat_path = inv.out.join("lambda.dat");
        write_atomic(&dat_path, dat.as_bytes())?;
        files.insert("gnuplot".into(), dat_path.display().to_string());
    }
    for r in &rows {
        match (&r.report, &r.error) {
            (Some(rep), _) => println!("{:<14} {:.2} ± {:.2} %", r.cell_id, 100.0 * rep.mean, 100.0 * rep.std),
            (None, Some(e)) => println!("{:<14} failed: {e}", r.cell_id),
            _ => {}
        }
    }
    Ok(files)
}
