//! End-to-end runs on small grids: artifacts, determinism, dataset files and
//! alternative descent settings.

use std::fs;
use std::path::Path;

use mfg_convex::experiments::{
    build_dataset, generate_to, run_experiment, slice_file_name, sweep_on_dataset,
    ExperimentSpec, TestCase, SLICE_COORDS,
};
use mfg_convex::functional::{bregman_survey, make_lifting, shift, FunctionalParams, Objective};
use mfg_convex::grid::GridSpec;
use mfg_convex::io::{read_dataset, read_field};
use mfg_convex::optimizer::{descend, descend_from, DescentMethod, RunStatus};

fn small_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        fine_grid: GridSpec::unit_square(21, 41).unwrap(),
        coarse_grid: GridSpec::unit_square(11, 6).unwrap(),
        ..Default::default()
    };
    spec.optimizer.max_iters = 300;
    spec
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec();
    spec.output = Some(dir.path().to_path_buf());
    let outcome = run_experiment(&spec).unwrap();
    let errors = outcome.errors.as_ref().unwrap();
    assert!(errors.p_e <= errors.u_e, "{errors:?}");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["input_hash"], spec.input_hash().unwrap());

    let iterations = read_csv(&dir.path().join("iterations.csv"));
    assert_eq!(iterations.len(), outcome.summary.iterations + 1);

    let g = spec.coarse_grid;
    let u = read_field(&dir.path().join("fields"), "u_comp", &g).unwrap();
    let p = read_field(&dir.path().join("fields"), "p_comp", &g).unwrap();
    for &x2 in &SLICE_COORDS {
        for &t in &SLICE_COORDS {
            let rows = read_csv(&dir.path().join("slices").join(slice_file_name(x2, t)));
            assert_eq!(rows.len(), g.nx);
            let (j, k) = (g.nearest_y(x2), g.nearest_level(t));
            for (i, row) in rows.iter().enumerate() {
                let uc: f64 = row[2].parse().unwrap();
                let pc: f64 = row[4].parse().unwrap();
                assert_eq!(uc, u.at(k, j, i));
                assert_eq!(pc, p.at(k, j, i));
            }
        }
    }
    let errs = read_csv(&dir.path().join("errors.csv"));
    assert_eq!(errs.len(), 1 + SLICE_COORDS.len() * SLICE_COORDS.len());
    assert_eq!(errs[0][3].parse::<f64>().unwrap(), errors.u_e);
}

#[test]
fn runs_are_deterministic() {
    let spec = small_spec();
    let data = build_dataset(&spec).unwrap();
    let a = descend(&spec.optimizer, &spec.functional, &data).unwrap();
    let b = descend(&spec.optimizer, &spec.functional, &data).unwrap();
    assert_eq!(a.final_u, b.final_u);
    assert_eq!(a.final_p, b.final_p);
    assert_eq!(a.records.len(), b.records.len());
}

#[test]
fn generated_dataset_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let written = generate_to(&spec, dir.path()).unwrap();
    let read = read_dataset(dir.path()).unwrap();
    assert_eq!(written, read);

    // inverting the files gives the same run as inverting in memory
    let mut from_files = spec.clone();
    from_files.test_case = TestCase::CustomFile {
        path: dir.path().to_path_buf(),
    };
    from_files.optimizer.max_iters = 20;
    let mut in_memory = spec;
    in_memory.optimizer.max_iters = 20;
    let a = run_experiment(&from_files).unwrap();
    let b = run_experiment(&in_memory).unwrap();
    assert_eq!(a.summary.final_j, b.summary.final_j);
}

#[test]
fn descent_from_the_truth_stays_close() {
    // standard-start errors on this configuration, from the lambda sweep
    const STANDARD_U_E: f64 = 0.034;
    const STANDARD_P_E: f64 = 0.005;
    let spec = ExperimentSpec::default();
    let data = build_dataset(&spec).unwrap();
    let lift = make_lifting(&data).unwrap();
    let truth = data.truth.as_ref().unwrap();
    let start = shift(&truth.u, &truth.p, &lift).unwrap();
    let report = descend_from(&spec.optimizer, &spec.functional, &data, start).unwrap();
    assert_eq!(report.status, RunStatus::Converged);
    let last = report.last();
    assert!(last.u_err.unwrap() < STANDARD_U_E, "{:?}", last.u_err);
    assert!(last.p_err.unwrap() < STANDARD_P_E, "{:?}", last.p_err);
    assert!((last.j / 1.3662386710e-3 - 1.0).abs() < 1e-6, "J {:.10e}", last.j);
}

#[test]
fn lbfgs_decreases_the_objective() {
    let mut spec = small_spec();
    spec.optimizer.method = DescentMethod::Lbfgs;
    spec.optimizer.max_iters = 100;
    let data = build_dataset(&spec).unwrap();
    let report = descend(&spec.optimizer, &spec.functional, &data).unwrap();
    assert_ne!(report.status, RunStatus::LineSearchFailure);
    for w in report.records.windows(2) {
        assert!(w[1].j <= w[0].j);
    }
    assert!(report.last().j < 0.5 * report.records[0].j);
}

#[test]
fn sweep_writes_one_directory_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec();
    spec.optimizer.max_iters = 10;
    spec.lambdas = vec![1.0, 2.0];
    spec.output = Some(dir.path().to_path_buf());
    let data = build_dataset(&spec).unwrap();
    let table = sweep_on_dataset(&spec, &data).unwrap();
    assert_eq!(table.rows.len(), 2);
    for l in [1.0, 2.0] {
        assert!(dir.path().join(format!("lambda_{l}")).join("manifest.json").exists());
        assert!(table.row(l).is_some());
    }
    assert_eq!(read_csv(&dir.path().join("sweep.csv")).len(), 2);
}

#[test]
fn bregman_gaps_near_the_truth() {
    let spec = small_spec();
    let data = build_dataset(&spec).unwrap();
    let lift = make_lifting(&data).unwrap();
    let truth = data.truth.as_ref().unwrap();
    let center = shift(&truth.u, &truth.p, &lift).unwrap();
    let params = FunctionalParams::default();
    let objective = Objective::new(&params, &data.coeffs, &lift).unwrap();
    let survey = bregman_survey(&objective, &center, 1e-3, 40, 7).unwrap();
    assert_eq!(survey.samples, 40);
    assert!(survey.min_gap.is_finite());
    assert!(survey.fraction_nonnegative > 0.9, "{survey:?}");
}
