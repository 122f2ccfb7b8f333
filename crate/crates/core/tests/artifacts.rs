use ftopinn::harness::{
    execute, read_numeric_csv, read_report_csv, read_sweep_csv, read_sweep_runs_csv, read_timings_csv, run_experiment,
    run_sweep, write_artifacts, ExperimentConfig, ReportRow, SweepAxis, CONFIG_ECHO_FILE, POINTWISE_FILE, REPORT_FILE,
    SOLUTION_FILE, SWEEP_FILE, SWEEP_RUNS_FILE, TIMINGS_FILE,
};

const SMALL_BURGERS: &str = r#"
name = "small-burgers"
seed = 2

[problem]
family = "burgers"
initial = { kind = "periodic_grf", seed = 4 }

[basis]
source = "random_feature"
depth = 2
width_hidden = 40
dof = 80
seed = 9

[solver]
newton_steps = 3

[collocation]
pde = 500
boundary = 60
initial = 60

[test_grid]
n = 21
"#;

fn config() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL_BURGERS).unwrap()
}

#[test]
fn experiment_artifacts_round_trip() {
    let cfg = config();
    let outcome = execute(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&outcome, dir.path()).unwrap();

    let rows = read_report_csv(&dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(rows, vec![ReportRow::from_outcome(&outcome)]);
    assert_eq!(rows[0].rel_l2, outcome.report.rel_l2);
    assert_eq!(rows[0].n_test, 21 * 21);

    let (header, table) = read_numeric_csv(&dir.path().join(SOLUTION_FILE)).unwrap();
    assert_eq!(header, ["x", "t", "u"]);
    assert_eq!(table.len(), outcome.values.len());
    for ((row, p), u) in table.iter().zip(&outcome.points).zip(&outcome.values) {
        assert_eq!(&row[..2], &p[..]);
        assert_eq!(row[2], *u);
    }

    let (header, table) = read_numeric_csv(&dir.path().join(POINTWISE_FILE)).unwrap();
    assert_eq!(header, ["x", "t", "u_ref", "u", "abs_error"]);
    let l_inf = table.iter().map(|r| r[4]).fold(0.0f64, f64::max);
    assert_eq!(l_inf, outcome.report.l_inf);

    let timings = read_timings_csv(&dir.path().join(TIMINGS_FILE)).unwrap();
    assert_eq!(timings, outcome.timings);

    let again = tempfile::tempdir().unwrap();
    run_experiment(&cfg, again.path()).unwrap();
    let echo = ExperimentConfig::load(&again.path().join(CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(echo.to_json(), cfg.to_json());
    assert_eq!(read_report_csv(&again.path().join(REPORT_FILE)).unwrap(), rows);
}

#[test]
fn sweep_artifacts_round_trip() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let result = run_sweep(&cfg, SweepAxis::Dof, &[40.0, 80.0], 3, dir.path()).unwrap();
    assert_eq!(result.rows.len(), 2);
    assert_eq!(result.runs.len(), 6);
    assert_eq!(read_sweep_csv(&dir.path().join(SWEEP_FILE)).unwrap(), result.rows);
    assert_eq!(
        read_sweep_runs_csv(&dir.path().join(SWEEP_RUNS_FILE)).unwrap(),
        result.runs
    );
    let seeds: Vec<u64> = result.runs.iter().filter(|r| r.value == 40.0).map(|r| r.seed).collect();
    assert_eq!(seeds, [2, 3, 4]);
    assert!(result
        .rows
        .iter()
        .all(|r| r.failures == 0 && r.rel_l2_std.unwrap() > 0.0));
}
