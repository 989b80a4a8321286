use std::path::{Path, PathBuf};

use vsl::scenario::{compare, run_scenario, PolicySelection, Scenario};
use vsl::{Error, PolicyKind};

fn small(cells: usize) -> Scenario {
    let text = format!("name = small\ncells = {cells}\nt_end = 2\nsamples = 16\n");
    Scenario::parse(&text, Path::new(".")).unwrap()
}

fn run_into(s: &Scenario, dir: &Path) -> Vec<PathBuf> {
    let report = run_scenario(s, Some(dir)).unwrap();
    report.summaries.iter().map(|r| dir.join(r.policy.slug())).collect()
}

#[test]
fn compare_is_reflexive() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = run_into(&small(20), tmp.path());
    let report = compare(&[dirs[2].clone(), dirs[2].clone()]).unwrap();
    assert_eq!(report.l1[0][1], 0.0);
    let all = compare(&dirs).unwrap();
    for i in 0..dirs.len() {
        assert_eq!(all.l1[i][i], 0.0);
        for j in 0..dirs.len() {
            assert_eq!(all.l1[i][j], all.l1[j][i]);
        }
    }
    // fixed speeds differ by (v_max - v_min) over the whole horizon
    let gap = all.l1[0][1];
    assert!((gap - 0.5 * all.runs[0].summary.horizon).abs() < 1e-12, "{gap}");
}

#[test]
fn compare_rejects_grid_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_into(&small(20), &tmp.path().join("a"));
    let b = run_into(&small(40), &tmp.path().join("b"));
    assert!(matches!(compare(&[a[0].clone(), b[0].clone()]), Err(Error::Domain(_))));
    assert!(matches!(compare(&[a[0].clone()]), Err(Error::Config(_))));
    assert!(matches!(
        compare(&[a[0].clone(), tmp.path().join("missing")]),
        Err(Error::Config(_))
    ));
}

#[test]
fn report_costs_are_policy_costs() {
    let mut s = small(20);
    s.policy = PolicySelection::Only(PolicyKind::Instantaneous);
    let report = run_scenario(&s, None).unwrap();
    assert_eq!(report.summaries.len(), 1);
    assert_eq!(report.summaries[0].cost, report.results[0].cost);
    let problem = s.problem().unwrap();
    assert_eq!(problem.cost_of(&report.results[0].control).unwrap(), report.results[0].cost);
}
