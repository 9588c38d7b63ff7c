//! Column layouts of the CSV artifacts written by the command line tool.

use std::fs;
use std::path::Path;
use std::process::Command;

fn rareflow(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_rareflow"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run(dir: &Path, scenario: &str) -> (String, Vec<String>) {
    let cfg = dir.join(format!("{scenario}.cfg"));
    fs::write(
        &cfg,
        format!("scenario = {scenario}\nprofile = desk\n[train]\niterations = 3\nbatch = 8\n[estimation]\nn = 300\n"),
    )
    .unwrap();
    let out = dir.join(scenario);
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    rareflow(&["train", "--config", c, "--out", o]);
    rareflow(&["estimate", "--config", c, "--out", o]);
    rareflow(&["sample", "--config", c, "--out", o, "--n", "2"]);
    let samples = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 3);
    let estimate = fs::read_to_string(out.join("estimate.csv")).unwrap();
    let mut lines = estimate.lines();
    assert_eq!(
        lines.next(),
        Some("estimator,estimate,sample_std,rel_std_error,n,seed")
    );
    let rows = lines
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    (samples.lines().next().unwrap().to_string(), rows)
}

fn xs(d: usize) -> String {
    (1..=d)
        .map(|i| format!("x_{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn seq(prefix: &str, range: std::ops::RangeInclusive<usize>) -> String {
    range
        .map(|i| format!("{prefix}_{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, String, &[&str]); 7] = [
        (
            "trunc-normal",
            "x_1,ln_q,ln_p,S,in_region".into(),
            &["c_is", "c_crude", "variance_reduction", "kl"],
        ),
        (
            "sum-exp",
            "x_1,x_2,ln_q,ln_p,S,in_region".into(),
            &["c_is", "c_crude", "variance_reduction", "kl"],
        ),
        (
            "bridge",
            "x_1,x_2,x_3,x_4,x_5,ln_q,ln_p,H".into(),
            &["ell_is", "ell_crude", "variance_reduction", "kl"],
        ),
        (
            "bridge-conditional",
            "x_1,x_2,x_3,x_4,x_5,ln_q,ln_p,S,in_region,H".into(),
            &["c_is", "ell_cond_is", "c_crude", "variance_reduction", "kl"],
        ),
        (
            "asian-payoff",
            format!("{},ln_q,ln_p,S,H,{}", xs(88), seq("price", 0..=88)),
            &["ell_is", "ell_crude", "variance_reduction", "kl"],
        ),
        (
            "asian-rare",
            format!("{},ln_q,ln_p,S,in_region,{}", xs(88), seq("price", 0..=88)),
            &["c_is", "c_crude", "variance_reduction", "kl"],
        ),
        (
            "double-slit",
            format!(
                "{},ln_q,ln_p,S,in_region,{},{},screen_y",
                xs(20),
                seq("path_x", 1..=10),
                seq("path_y", 1..=10)
            ),
            &[
                "c_is",
                "c_crude",
                "variance_reduction",
                "success_rate",
                "kl",
            ],
        ),
    ];
    for (scenario, header, rows) in cases {
        let (got_header, got_rows) = run(dir.path(), scenario);
        assert_eq!(got_header, header, "{scenario} samples header");
        assert_eq!(got_rows, rows, "{scenario} estimate rows");
    }
}
