use std::path::Path;

use relaxlab::lab::cli::run;
use relaxlab::lab::report::{build_report, read_outputs};

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn lab(args: &[&str]) -> i32 {
    run(std::iter::once("relaxlab").chain(args.iter().copied()))
}

const QUADRATIC: &str = "seed = 3\n[problem]\nname = \"quadratic\"\n[model]\ngamma = 0.5\n";

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(lab(&["entropy", "--out", out, "--quiet"]), 2);
    assert_eq!(lab(&["frobnicate"]), 2);

    let unknown = write_config(dir.path(), &format!("{QUADRATIC}colour = 1\n"));
    assert_eq!(lab(&["entropy", "--config", &unknown, "--out", out, "--quiet"]), 2);

    let budget = write_config(dir.path(), &format!("op_budget = 10.0\n{QUADRATIC}"));
    assert_eq!(lab(&["converge", "--config", &budget, "--out", out, "--quiet"]), 2);

    let noisy = write_config(dir.path(), &format!("{QUADRATIC}[converge]\nsigma = {{ kind = \"constant\", c = 0.1 }}\n"));
    assert_eq!(lab(&["converge", "--config", &noisy, "--out", out, "--quiet"]), 2);

    let bad_gamma = write_config(dir.path(), "[problem]\nname = \"quadratic\"\n[model]\ngamma = 1.5\n");
    assert_eq!(lab(&["entropy", "--config", &bad_gamma, "--out", out, "--quiet"]), 2);
}

#[test]
fn zero_problem_entropy_has_vanishing_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\nname = \"zero\"\n[model]\ngamma = 1.0\n");
    let out = dir.path().join("out");
    assert_eq!(lab(&["entropy", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]), 0);
    let text = std::fs::read_to_string(out.join("entropy/entropy.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "grad").unwrap();
    let mut rows = 0;
    for line in lines {
        let g: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert!(g.abs() <= 1e-12, "{line}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn report_is_a_pure_function_of_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    for study in ["entropy", "hjb"] {
        assert_eq!(lab(&[study, "--config", &cfg, "--out", out_s, "--quiet"]), 0, "{study}");
    }
    assert_eq!(lab(&["report", "--out", out_s, "--quiet"]), 0);
    let first = std::fs::read(out.join("report.json")).unwrap();
    assert_eq!(lab(&["report", "--out", out_s, "--quiet"]), 0);
    assert_eq!(first, std::fs::read(out.join("report.json")).unwrap());

    let files = read_outputs(&out).unwrap();
    let mut reversed = files.clone();
    reversed.reverse();
    assert_eq!(build_report(&files).unwrap(), build_report(&reversed).unwrap());

    let check = std::fs::read_to_string(out.join("hjb/hjb_check.csv")).unwrap();
    let mut lines = check.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "max_err").unwrap();
    let base: f64 = lines.next().unwrap().split(',').nth(col).unwrap().parse().unwrap();
    assert!(base <= 1e-2, "{base}");
}

#[test]
fn seed_override_changes_only_the_seed_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(lab(&["entropy", "--config", &cfg, "--out", a.to_str().unwrap(), "--quiet"]), 0);
    assert_eq!(lab(&["entropy", "--config", &cfg, "--seed", "99", "--out", b.to_str().unwrap(), "--quiet"]), 0);
    let ta = std::fs::read_to_string(a.join("entropy/entropy.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("entropy/entropy.csv")).unwrap();
    let strip = |t: &str| t.lines().filter(|l| !l.starts_with("# seed=")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&ta), strip(&tb));
    assert!(tb.contains("# seed=99"));
}
