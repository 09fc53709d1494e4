use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{s, Array2, Axis};
use ndarray_linalg::SVD;
use pesca::expfam::{DataBlock, Distribution};
use pesca::io::{read_json, read_matrix, read_model_bundle, write_model_bundle, BundleMeta};
use pesca::penalty::PenaltyFamily;
use pesca::simulate::{SimulationSpec, TypeMix};
use pesca::solver::{objective, variation_explained};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde_json::Value;
use tempfile::TempDir;

fn pesca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pesca")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pesca(args);
    assert!(
        out.status.success(),
        "pesca {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a small three-block data set through the CLI and caps the
/// model rank in the generated project file.
fn small_simulation(dir: &Path, mix: TypeMix, case: usize, seed: u64) -> PathBuf {
    simulation_with_sizes(dir, mix, case, 60, vec![60, 40, 30], seed)
}

fn simulation_with_sizes(dir: &Path, mix: TypeMix, case: usize, rows: usize, sizes: Vec<usize>, seed: u64) -> PathBuf {
    let mut spec = SimulationSpec::case_with_sizes(mix, case, rows, sizes, seed).unwrap();
    spec.rejection = 0.0;
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let sim = dir.join("sim");
    ok(&["simulate", "--config", s(&spec_path), "--out", s(&sim)]);
    let project = sim.join("project.json");
    let mut cfg: Value = read_json(&project).unwrap();
    cfg["fit"] = serde_json::json!({ "n_components": 30 });
    fs::write(&project, cfg.to_string()).unwrap();
    sim
}

fn read_csv_table(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

#[test]
fn simulate_preset_writes_benchmark_sizes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&["simulate", "--preset", "ggg-case3", "--seed", "4", "--out", s(&out)]);
    for (l, j) in [1000, 500, 100].into_iter().enumerate() {
        let x = read_matrix(&out.join(format!("X_{}.csv", l + 1))).unwrap();
        assert_eq!(x.dim(), (100, j));
    }
    let manifest: Value = read_json(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert!(out.join("truth/truth.json").is_file());
    assert!(out.join("project.json").is_file());
}

#[test]
fn simulate_binary_preset_has_200_binary_rows() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&["simulate", "--preset", "bbb-case3", "--out", s(&out)]);
    for l in 1..=3 {
        let x = read_matrix(&out.join(format!("X_{l}.csv"))).unwrap();
        assert_eq!(x.nrows(), 200);
        assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", "--preset", "gbb-case2", "--seed", "9", "--out", s(&a)]);
    ok(&["simulate", "--preset", "gbb-case2", "--seed", "9", "--out", s(&b)]);
    for f in ["X_1.csv", "X_2.csv", "X_3.csv", "truth/U.csv", "truth/V.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_or_invalid_input_exits_2() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(pesca(&["simulate", "--config", s(&missing)]).status.code(), Some(2));
    assert_eq!(pesca(&["simulate", "--preset", "xyz-case3"]).status.code(), Some(2));
    assert_eq!(pesca(&["simulate", "--preset", "ggg-case9"]).status.code(), Some(2));
    assert_eq!(pesca(&["fit", "--config", s(&missing), "--lambda", "1"]).status.code(), Some(2));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"blocks":[{"path":"absent.csv","type":"gaussian"}]}"#).unwrap();
    let out = pesca(&["fit", "--config", s(&cfg), "--lambda", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn dispersion_requires_a_gaussian_block() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("b.csv"), "0,1\n1,0\n1,1\n").unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"blocks":[{"path":"b.csv","type":"bernoulli"}]}"#).unwrap();
    assert_eq!(pesca(&["estimate-dispersion", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn noiseless_block_is_flagged_degenerate() {
    let tmp = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_matrix(30, 2, &mut rng).dot(&gaussian_matrix(2, 20, &mut rng));
    pesca::io::write_matrix(&tmp.path().join("x.csv"), &x).unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"blocks":[{"path":"x.csv","type":"gaussian"}]}"#).unwrap();
    let out = tmp.path().join("disp");
    ok(&["estimate-dispersion", "--config", s(&cfg), "--out", s(&out)]);
    let report: Value = read_json(&out.join("dispersion.json")).unwrap();
    let block = &report["blocks"][0];
    assert!(block["alpha"].as_f64().unwrap() < 1e-8);
    assert_eq!(block["degenerate"], true);
    assert_eq!(block["per_repeat"].as_array().unwrap().len(), 3);
}

#[test]
fn estimate_dispersion_recovers_unit_noise() {
    let tmp = TempDir::new().unwrap();
    let sim = simulation_with_sizes(tmp.path(), TypeMix::Ggg, 3, 100, vec![300, 200, 100], 2);
    let out = tmp.path().join("disp");
    ok(&["estimate-dispersion", "--config", s(&sim.join("project.json")), "--out", s(&out)]);
    let report: Value = read_json(&out.join("dispersion.json")).unwrap();
    for b in report["blocks"].as_array().unwrap() {
        let a = b["alpha"].as_f64().unwrap();
        assert!((a - 1.0).abs() < 0.1, "alpha {a}");
        assert_eq!(b["degenerate"], false);
    }
}

/// With λ = 0 and complete Gaussian data the model is plain SCA: column
/// means plus the rank-R truncated SVD of the centered concatenation.
#[test]
fn unpenalized_fit_matches_svd_varexp() {
    let tmp = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let widths = [20, 15, 10];
    let (rows, rank) = (30, 3);
    let scores = gaussian_matrix(rows, rank, &mut rng);
    let mut blocks = Vec::new();
    for (l, &j) in widths.iter().enumerate() {
        let signal = scores.dot(&gaussian_matrix(rank, j, &mut rng)) * 3.0;
        let x = signal + gaussian_matrix(rows, j, &mut rng) * 0.5;
        pesca::io::write_matrix(&tmp.path().join(format!("x{l}.csv")), &x).unwrap();
        blocks.push(x);
    }
    let cfg = tmp.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"blocks":[{"path":"x0.csv","type":"gaussian","dispersion":1.0},
                      {"path":"x1.csv","type":"gaussian","dispersion":1.0},
                      {"path":"x2.csv","type":"gaussian","dispersion":1.0}],
            "fit":{"n_components":3,"epsilon_f":1e-14,"max_iter":20000}}"#,
    )
    .unwrap();
    let out = tmp.path().join("fit");
    ok(&["fit", "--config", s(&cfg), "--lambda", "0", "--out", s(&out)]);

    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let x = ndarray::concatenate(Axis(1), &views).unwrap();
    let xc = &x - &x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    let (u, sv, vt) = xc.svd(true, true).unwrap();
    let (u, vt) = (u.unwrap(), vt.unwrap());
    let approx = u.slice(s![.., ..rank]).dot(&Array2::from_diag(&sv.slice(s![..rank]))).dot(&vt.slice(s![..rank, ..]));
    let summary: Value = read_json(&out.join("varexp_summary.json")).unwrap();
    let mut start = 0;
    for (l, &j) in widths.iter().enumerate() {
        let c = xc.slice(s![.., start..start + j]);
        let resid = &c - &approx.slice(s![.., start..start + j]);
        let oracle = 1.0 - resid.mapv(|v| v * v).sum() / c.mapv(|v| v * v).sum();
        let got = summary["per_block"][l].as_f64().unwrap();
        assert!((got - oracle).abs() < 1e-4, "block {l}: {got} vs {oracle}");
        start += j;
    }
    let total = sv.slice(s![..rank]).mapv(|v| v * v).sum() / xc.mapv(|v| v * v).sum();
    assert!((summary["combined"].as_f64().unwrap() - total).abs() < 1e-4);
}

#[test]
fn fit_bundle_round_trips_varexp_and_objective() {
    let tmp = TempDir::new().unwrap();
    let sim = small_simulation(tmp.path(), TypeMix::Gbb, 2, 3);
    let out = tmp.path().join("fit");
    ok(&[
        "fit",
        "--config",
        s(&sim.join("project.json")),
        "--lambdas",
        "3,2,2",
        "--penalty",
        "lq",
        "--q",
        "0.5",
        "--out",
        s(&out),
    ]);
    let (model, meta) = read_model_bundle(&out.join("model")).unwrap();
    assert_eq!(meta.family, PenaltyFamily::Lq { q: 0.5 });
    let blocks: Vec<DataBlock> = meta
        .block_types
        .iter()
        .enumerate()
        .map(|(l, &d)| pesca::io::read_block(&sim.join(format!("X_{}.csv", l + 1)), d).unwrap())
        .collect();
    let fit: Value = read_json(&out.join("fit.json")).unwrap();
    let f = objective(&model, &blocks, &meta.penalty().unwrap()).unwrap();
    let f_file = fit["objective"].as_f64().unwrap();
    assert!((f - f_file).abs() <= 1e-12 * f_file.abs(), "{f} vs {f_file}");

    let ve = variation_explained(&model, &blocks).unwrap();
    for row in read_csv_table(&out.join("varexp.csv")) {
        let r: usize = row[0].parse().unwrap();
        let l: usize = row[1].parse().unwrap();
        let v: f64 = row[2].parse().unwrap();
        assert!((v - ve.per_component[[l - 1, r - 1]]).abs() <= 1e-12);
    }
    let trace: Vec<f64> = read_csv_table(&out.join("objective_trace.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs()));
}

#[test]
fn divergence_exits_3_with_failure_dump() {
    let tmp = TempDir::new().unwrap();
    // exp(1000) overflows at the first objective evaluation.
    let rows: Vec<String> = (0..20).map(|i| (0..10).map(|j| if (i + j) % 2 == 0 { "1000" } else { "0" }).collect::<Vec<_>>().join(",")).collect();
    fs::write(tmp.path().join("p.csv"), rows.join("\n")).unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"blocks":[{"path":"p.csv","type":"poisson"}],"fit":{"n_components":3}}"#).unwrap();
    let out = tmp.path().join("fit");
    let res = pesca(&["fit", "--config", s(&cfg), "--lambda", "1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    let dump: Value = read_json(&out.join("failure.json")).unwrap();
    assert!(dump["error"].as_str().unwrap().contains("non-finite"));
    assert!(dump["objective_trace"].is_array());
}

#[test]
fn select_gbb_runs_two_stage_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let sim = small_simulation(tmp.path(), TypeMix::Gbb, 2, 5);
    let out = tmp.path().join("sel");
    ok(&[
        "select",
        "--config",
        s(&sim.join("project.json")),
        "--grid",
        "1:100:6",
        "--grid-binary",
        "1:50:6",
        "--out",
        s(&out),
    ]);
    let sel: Value = read_json(&out.join("selection.json")).unwrap();
    let chains = sel["trace"]["chains"].as_array().unwrap();
    assert_eq!(chains.len(), 2);
    assert_eq!(chains[0]["varied"], "binary");
    assert_eq!(chains[1]["varied"], "quantitative");
    let lambdas = sel["trace"]["selected_lambdas"].as_array().unwrap();
    assert_eq!(lambdas[1], lambdas[2]);
    assert_eq!(read_csv_table(&out.join("cv_curve.csv")).len(), 12);
    let trace: Vec<f64> = read_csv_table(&out.join("objective_trace.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs()));

    let ev = tmp.path().join("eval");
    ok(&["evaluate", "--model", s(&out.join("model")), "--truth", s(&sim.join("truth")), "--out", s(&ev)]);
    let report: Value = read_json(&ev.join("report.json")).unwrap();
    assert_eq!(report["structures"].as_array().unwrap().len(), 7);
    let rows = read_csv_table(&ev.join("report.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn evaluate_truth_against_itself_scores_one() {
    let tmp = TempDir::new().unwrap();
    let sim = small_simulation(tmp.path(), TypeMix::Ggg, 1, 8);
    let (_, truth) = pesca::io::read_truth_bundle(&sim.join("truth")).unwrap();
    let model = truth.as_model().unwrap();
    let meta = BundleMeta {
        block_types: truth.block_types.clone(),
        family: PenaltyFamily::default(),
        lambdas: vec![0.0; 3],
        n_rows: model.n_rows(),
        n_components: model.n_components(),
        seed: 8,
    };
    write_model_bundle(&tmp.path().join("model"), &model, &meta).unwrap();
    let ev = tmp.path().join("eval");
    ok(&["evaluate", "--model", s(&tmp.path().join("model")), "--truth", s(&sim.join("truth")), "--out", s(&ev)]);
    let report: Value = read_json(&ev.join("report.json")).unwrap();
    for st in report["structures"].as_array().unwrap() {
        let present = st["true_rank"].as_u64().unwrap() > 0;
        let rv = st["rv"].as_f64().unwrap();
        if present {
            assert!((rv - 1.0).abs() < 1e-10, "{st}");
            assert_eq!(st["rank"], st["true_rank"]);
        } else {
            // Case 1 holds only local common structures; the rest score "0(0)".
            assert_eq!(rv, 0.0);
            assert_eq!(st["rank"], 0);
        }
    }
    assert!(report["rmse_theta"].as_f64().unwrap() < 1e-20);
}

#[test]
fn evaluate_misaligned_bundles_exits_2() {
    let tmp = TempDir::new().unwrap();
    let sim = small_simulation(tmp.path(), TypeMix::Ggg, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = 17;
    let q = gaussian_matrix(rows, 2, &mut rng);
    let q = &q - &q.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    let (u, _, _) = q.svd(true, false).unwrap();
    let a = u.unwrap().slice(s![.., ..2]).to_owned();
    let model = pesca::solver::EscaModel::new(
        vec![ndarray::Array1::zeros(40), ndarray::Array1::zeros(30), ndarray::Array1::zeros(20)],
        a,
        vec![Array2::ones((40, 2)), Array2::ones((30, 2)), Array2::ones((20, 2))],
    )
    .unwrap();
    let meta = BundleMeta {
        block_types: vec![Distribution::gaussian(1.0).unwrap(); 3],
        family: PenaltyFamily::default(),
        lambdas: vec![1.0; 3],
        n_rows: rows,
        n_components: 2,
        seed: 0,
    };
    write_model_bundle(&tmp.path().join("model"), &model, &meta).unwrap();
    let res = pesca(&["evaluate", "--model", s(&tmp.path().join("model")), "--truth", s(&sim.join("truth"))]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn selection_on_benchmark_recovers_structure_pattern() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--preset", "ggg-case3", "--seed", "1", "--out", s(&sim)]);
    let out = tmp.path().join("sel");
    ok(&["select", "--config", s(&sim.join("project.json")), "--out", s(&out)]);
    let (model, _) = read_model_bundle(&out.join("model")).unwrap();
    // Three components for each of the seven active-block patterns.
    let mut counts = std::collections::BTreeMap::new();
    for r in model.active_components() {
        *counts.entry(model.active_blocks(r)).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 7, "{counts:?}");
    assert!(counts.values().all(|&c| c == 3), "{counts:?}");

    // The CV curve is minimized at the chosen grid point.
    let sel: Value = read_json(&out.join("selection.json")).unwrap();
    let chain = &sel["trace"]["chains"][0];
    let scores: Vec<f64> = chain["points"].as_array().unwrap().iter().map(|p| p["score"].as_f64().unwrap()).collect();
    let best = scores.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(chain["chosen"].as_u64().unwrap() as usize, best);
}

#[test]
fn reproduce_single_smoke_seed() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("rep");
    ok(&["reproduce", "--preset", "ggg", "--cases", "3", "--scale", "smoke", "--seeds", "1", "--out", s(&out)]);
    let table = read_csv_table(&out.join("table_rv.csv"));
    assert_eq!(table.len(), 1);
    assert_eq!(table[0].len(), 8);
    // Cells read "mean RV(mean rank)"; smoke data should still be recovered well.
    for cell in &table[0][1..] {
        let (rv, rank) = cell.trim_end_matches(')').split_once('(').unwrap();
        assert!(rv.parse::<f64>().unwrap() >= 0.90, "{:?}", table[0]);
        assert!(rank.parse::<f64>().unwrap() >= 1.0, "{:?}", table[0]);
    }
    assert_eq!(read_csv_table(&out.join("table_rmse.csv"))[0].len(), 6);
    assert_eq!(read_csv_table(&out.join("case3/runs.csv")).len(), 1);
    assert!(out.join("case3/reproduction.json").is_file());
}

#[test]
fn reproduce_rejects_unknown_inputs() {
    assert_eq!(pesca(&["reproduce", "--preset", "xyz"]).status.code(), Some(2));
    assert_eq!(pesca(&["reproduce", "--preset", "ggg", "--scale", "huge"]).status.code(), Some(2));
    assert_eq!(pesca(&["reproduce", "--preset", "ggg", "--cases", "8"]).status.code(), Some(2));
}
