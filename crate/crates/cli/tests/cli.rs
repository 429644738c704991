use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use nalgebra::DMatrix;
use slacc::simulation::{generate_dataset, make_truth, replicate_rng, site_f_statistics, ScenarioSpec};
use slacc::{DiagonalMode, FitConfig};
use slacc_cli::io::{read_matrix, read_vectorized, ModelFile};
use slacc_cli::{run, Cli};

fn cli(args: &[&str]) -> slacc_cli::CliResult<()> {
    let mut full = vec!["slacc"];
    full.extend_from_slice(args);
    run(Cli::parse_from(full))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, n: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let n = n.to_string();
    let mut args = vec!["generate", "--n", &n, "--seed", "5", "--out-dir", p(&out)];
    args.extend_from_slice(extra);
    cli(&args).unwrap();
    out
}

fn binary(args: &[&str]) -> (i32, serde_json::Value) {
    let out = Process::new(env!("CARGO_BIN_EXE_slacc"))
        .args(args)
        .env("SLACC_LOG", "quiet")
        .output()
        .unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap_or("{}");
    (out.status.code().unwrap(), serde_json::from_str(last).unwrap())
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn disk_round_trip_matches_in_memory_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), 60, &[]);
    let out = tmp.path().join("fit");
    cli(&[
        "fit", "--manifest", p(&data.join("manifest.csv")), "--covariates", p(&data.join("covariates.csv")),
        "--diagonal", "include", "--L", "5", "--out", p(&out),
    ])
    .unwrap();
    let spec = ScenarioSpec::standard(1, 60, 5);
    let sim = generate_dataset(&make_truth(&spec).unwrap(), &spec, &mut replicate_rng(5, 60, 0)).unwrap();
    let res = slacc::fit(&sim.data, 5, &FitConfig::default()).unwrap();
    let model = ModelFile::load(&out.join("model.json")).unwrap();
    assert_eq!(model.theta, res.theta);
    assert_eq!(model.diagonal_mode, DiagonalMode::Include);
    assert_eq!(model.site_labels, vec!["site1", "site2"]);
    let trace = read_csv(&out.join("trace.csv"));
    assert_eq!(trace.len(), res.trace.len() + 1);
    let u = read_csv(&out.join("loadings.csv"));
    assert_eq!(u.len(), 50);
    assert_eq!(u[0][0].parse::<f64>().unwrap(), res.theta.u[(0, 0)]);
    // save, load and save again
    let again = tmp.path().join("again.json");
    model.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(out.join("model.json")).unwrap());
}

#[test]
fn validation_failures_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), 20, &[]);
    let manifest = data.join("manifest.csv");
    let covariates = data.join("covariates.csv");
    let out = tmp.path().join("o");
    let (code, json) = binary(&["fit", "--manifest", p(&manifest), "--covariates", p(&covariates), "--L", "50", "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(json["conditions"].as_array().unwrap().iter().any(|c| c == "A.1"));

    // drop one covariate row
    let text = fs::read_to_string(&covariates).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("sub007,")).collect();
    let partial = tmp.path().join("partial.csv");
    fs::write(&partial, kept.join("\n")).unwrap();
    let (code, json) = binary(&["fit", "--manifest", p(&manifest), "--covariates", p(&partial), "--L", "3", "--out", p(&out)]);
    assert_eq!(code, 2);
    assert_eq!(json["subject_id"], "sub007");

    let (code, _) = binary(&[
        "select", "--manifest", p(&manifest), "--covariates", p(&covariates), "--Lmin", "2", "--Lmax", "3",
        "--gamma", "1.5", "--out", p(&out),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn single_point_selection_is_a_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), 40, &[]);
    let m = data.join("manifest.csv");
    let c = data.join("covariates.csv");
    let (fit_dir, sel_dir) = (tmp.path().join("fit"), tmp.path().join("sel"));
    cli(&["fit", "--manifest", p(&m), "--covariates", p(&c), "--L", "3", "--out", p(&fit_dir)]).unwrap();
    cli(&["select", "--manifest", p(&m), "--covariates", p(&c), "--Lmin", "3", "--Lmax", "3", "--out", p(&sel_dir)]).unwrap();
    let a = ModelFile::load(&fit_dir.join("model.json")).unwrap();
    let b = ModelFile::load(&sel_dir.join("model.json")).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(read_csv(&sel_dir.join("curve.csv")).len(), 2);

    cli(&["select", "--manifest", p(&m), "--covariates", p(&c), "--Lmin", "1", "--Lmax", "3", "--out", p(&sel_dir)]).unwrap();
    assert_eq!(read_csv(&sel_dir.join("curve.csv")).len(), 4);
}

#[test]
fn harmonize_formats_agree_and_reject_unknown_sites() {
    let tmp = tempfile::tempdir().unwrap();
    let files = generate(tmp.path(), 60, &["--diagonal", "exclude"]);
    let vec_dir = tmp.path().join("vec");
    cli(&["generate", "--n", "60", "--seed", "5", "--diagonal", "exclude", "--vectorized", "--out-dir", p(&vec_dir)]).unwrap();
    let model_dir = tmp.path().join("fit");
    cli(&[
        "fit", "--manifest", p(&files.join("manifest.csv")), "--covariates", p(&files.join("covariates.csv")),
        "--L", "4", "--out", p(&model_dir),
    ])
    .unwrap();
    let model = model_dir.join("model.json");
    let (h1, h2) = (tmp.path().join("h1"), tmp.path().join("h2"));
    cli(&[
        "harmonize", "--model", p(&model), "--manifest", p(&files.join("manifest.csv")),
        "--covariates", p(&files.join("covariates.csv")), "--out-dir", p(&h1),
    ])
    .unwrap();
    cli(&[
        "harmonize", "--model", p(&model), "--manifest", p(&vec_dir.join("manifest.csv")),
        "--covariates", p(&vec_dir.join("covariates.csv")), "--vectorized", p(&vec_dir.join("matrices.csv")),
        "--out-dir", p(&h2),
    ])
    .unwrap();
    assert_eq!(fs::read(h1.join("scores.csv")).unwrap(), fs::read(h2.join("scores.csv")).unwrap());
    let (vec_out, sidecar) = read_vectorized(&h2.join("harmonized.csv")).unwrap();
    assert_eq!(sidecar.diagonal_mode, DiagonalMode::Exclude);
    let first = read_matrix(&h1.join("matrices/sub001.csv")).unwrap();
    assert_eq!(first, vec_out[0]);
    // harmonized output can be read back as input
    let h3 = tmp.path().join("h3");
    cli(&[
        "harmonize", "--model", p(&model), "--manifest", p(&h1.join("manifest.csv")),
        "--covariates", p(&files.join("covariates.csv")), "--out-dir", p(&h3),
    ])
    .unwrap();

    let text = fs::read_to_string(files.join("manifest.csv")).unwrap().replace(",site2", ",site9");
    let renamed = files.join("renamed.csv");
    fs::write(&renamed, text).unwrap();
    let (code, json) = binary(&[
        "harmonize", "--model", p(&model), "--manifest", p(&renamed), "--covariates", p(&files.join("covariates.csv")),
        "--out-dir", p(&tmp.path().join("h4")),
    ]);
    assert_eq!(code, 2);
    assert_eq!(json["site"], "site9");
}

#[test]
fn single_site_harmonization_reproduces_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), 40, &[]);
    let text = fs::read_to_string(data.join("manifest.csv")).unwrap().replace(",site2", ",site1");
    let manifest = data.join("one_site.csv");
    fs::write(&manifest, text).unwrap();
    let c = data.join("covariates.csv");
    let fit_dir = tmp.path().join("fit");
    cli(&["fit", "--manifest", p(&manifest), "--covariates", p(&c), "--diagonal", "include", "--L", "3", "--out", p(&fit_dir)]).unwrap();
    let out = tmp.path().join("h");
    cli(&["harmonize", "--model", p(&fit_dir.join("model.json")), "--manifest", p(&manifest), "--covariates", p(&c), "--out-dir", p(&out)]).unwrap();
    for j in [1, 17, 40] {
        let name = format!("matrices/sub{j:03}.csv");
        let input = read_matrix(&data.join(&name)).unwrap();
        let output = read_matrix(&out.join(&name)).unwrap();
        assert!((input - output).amax() < 1e-10);
    }
}

#[test]
fn simulate_writes_one_replicate_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli(&["simulate", "--n-grid", "100", "--reps", "1", "--seed", "9", "--out", p(&a)]).unwrap();
    cli(&["--threads", "2", "simulate", "--n-grid", "100", "--reps", "1", "--seed", "9", "--out", p(&b)]).unwrap();
    let tidy = read_csv(&a.join("tidy.csv"));
    assert_eq!(tidy[0], ["method", "scenario", "n", "replicate", "metric", "value"]);
    assert_eq!(tidy.len(), 1 + 3 * 6);
    assert!(tidy[1..].iter().all(|r| r[2] == "100" && r[3] == "0"));
    assert_eq!(read_csv(&a.join("summary.csv")).len(), 4);
    for f in ["tidy.csv", "summary.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let scores_path = tmp.path().join("scores.csv");
    let mut text = String::from("subject_id,site,a,b\n");
    let mut vals = Vec::new();
    let mut sites = Vec::new();
    for j in 0..30 {
        let s = j % 3;
        let (x, y) = ((j as f64 * 0.7).sin() + s as f64, (j as f64 * 1.3).cos() * (1.0 + s as f64));
        text.push_str(&format!("s{j},{},{x:.17e},{y:.17e}\n", ["x", "y", "z"][s]));
        vals.extend([x, y]);
        sites.push(s);
    }
    fs::write(&scores_path, text).unwrap();
    let out = tmp.path().join("f.csv");
    cli(&["evaluate", "--scores", p(&scores_path), "--out", p(&out)]).unwrap();
    let rows = read_csv(&out);
    assert_eq!(rows[0], ["column", "f_mean", "f_variance", "flagged"]);
    let expected = site_f_statistics(&DMatrix::from_row_slice(30, 2, &vals), &sites).unwrap();
    for k in 0..2 {
        assert_eq!(rows[k + 1][1].parse::<f64>().unwrap(), expected[k].f_mean);
        assert_eq!(rows[k + 1][2].parse::<f64>().unwrap(), expected[k].f_variance);
    }
}

#[test]
fn evaluate_compares_raw_and_harmonized_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), 100, &[]);
    let m = data.join("manifest.csv");
    let c = data.join("covariates.csv");
    let fit_dir = tmp.path().join("fit");
    cli(&["fit", "--manifest", p(&m), "--covariates", p(&c), "--diagonal", "include", "--L", "5", "--out", p(&fit_dir)]).unwrap();
    let out = tmp.path().join("f.csv");
    cli(&["evaluate", "--manifest", p(&m), "--covariates", p(&c), "--model", p(&fit_dir.join("model.json")), "--out", p(&out)]).unwrap();
    let rows = read_csv(&out);
    assert_eq!(rows[0], ["factor", "f_mean_raw", "f_variance_raw", "f_mean_harmonized", "f_variance_harmonized", "flagged"]);
    assert_eq!(rows.len(), 6);

    // labels assigned without regard to the data carry no site effect
    let shuffled = data.join("shuffled.csv");
    let text: String = fs::read_to_string(&m)
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let (head, _) = l.rsplit_once(',').unwrap();
                format!("{head},site{}\n", 1 + (i * 7919) % 11 % 2)
            }
        })
        .collect();
    fs::write(&shuffled, text).unwrap();
    let scores = tmp.path().join("h");
    cli(&["harmonize", "--model", p(&fit_dir.join("model.json")), "--manifest", p(&m), "--covariates", p(&c), "--out-dir", p(&scores)]).unwrap();
    let f = tmp.path().join("null.csv");
    cli(&["evaluate", "--scores", p(&scores.join("scores.csv")), "--sites", p(&shuffled), "--out", p(&f)]).unwrap();
    let mut raw: Vec<f64> = read_csv(&f)[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    raw.sort_by(f64::total_cmp);
    assert!(raw[2] < 4.0, "{raw:?}");
}
