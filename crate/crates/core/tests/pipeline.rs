use std::process::Command;

use varadhan_lab::density::{kde, simulate_endpoints, Bandwidth, SimulationSettings};
use varadhan_lab::driver::GridSpec;
use varadhan_lab::fields::VectorFieldSystem;
use varadhan_lab::hilbert::StepCoeffs;

fn identity_shift(m: usize) -> StepCoeffs {
    // ψ = 1 on the first component steers the identity flow to (1, 0)
    let spec = GridSpec::new(m, 0.5, 2).unwrap();
    let mut psi = vec![0.0; 2 * m];
    psi[..m].iter_mut().for_each(|v| *v = 1.0);
    StepCoeffs::new(spec, psi).unwrap()
}

// v̂(ε) against −|v|²/2 − ε² n log(ε√(2π)) on identity fields
#[test]
fn gaussian_v_hat_matches_closed_form() {
    let sys = VectorFieldSystem::builtin("elliptic-identity").unwrap();
    let shift = identity_shift(8);
    for (k, eps) in [0.5f64, 0.35, 0.25].into_iter().enumerate() {
        let s = SimulationSettings { hurst: 0.5, m: 8, substeps: 1, n_samples: 200_000, seed: 30 + k as u64 };
        let sample = simulate_endpoints(&sys, &[0.0, 0.0], eps, &s, Some(&shift)).unwrap();
        let e = kde(&sample, &[1.0, 0.0], Bandwidth::SilvermanEps { factor: 1.0, eps }).unwrap();
        let v_hat = eps * eps * e.p_hat.ln();
        let se = eps * eps * e.stderr / e.p_hat;
        // the kernel widens the Gaussian to variance ε² + h²
        let h2: f64 = e.bandwidth[0] * e.bandwidth[0];
        let var = eps * eps + h2;
        let smoothed = eps * eps * (-0.5 / var - (2.0 * std::f64::consts::PI * var).ln());
        let exact = -0.5 - eps * eps * 2.0 * (eps * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((v_hat - smoothed).abs() < 3.0 * 1.96 * se, "eps {eps}: {v_hat} vs {smoothed} ± {se}");
        assert!((smoothed - exact).abs() < 5e-3, "bias at eps {eps}");
    }
}

#[test]
fn stderr_shrinks_like_inverse_root_n() {
    let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
    let se = |n: usize| {
        let s = SimulationSettings { hurst: 0.7, m: 16, substeps: 1, n_samples: n, seed: 3 };
        let sample = simulate_endpoints(&sys, &[1.0], 0.5, &s, None).unwrap();
        kde(&sample, &[1.2], Bandwidth::Fixed { h: 0.05 }).unwrap().stderr
    };
    let ratio = se(20_000) / se(320_000);
    // √16 = 4, with batch-means noise on both sides
    assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
}

fn varadhan(args: &[&str]) -> (Option<i32>, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_varadhan")).args(args).output().expect("binary runs");
    (o.status.code(), String::from_utf8_lossy(&o.stdout).into_owned())
}

#[test]
fn exit_codes() {
    assert_eq!(varadhan(&["fbm-check", "--N", "20000"]).0, Some(0));
    assert_eq!(varadhan(&["fbm-check", "--N", "0"]).0, Some(2));
    assert_eq!(varadhan(&["hypo-check", "--system", "nonesuch"]).0, Some(2));
    assert_eq!(varadhan(&["frobnicate"]).0, Some(2));
    let (code, out) = varadhan(&["hypo-check", "--system", "heisenberg-sin", "--level", "2"]);
    assert_eq!(code, Some(1));
    assert!(out.contains("\"verdict\": \"fail\""));
}

#[test]
fn corrupted_hurst_fixture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "hurst = 0.5\n[fbm]\nn_paths = 100000\nsample_hurst = 0.7\n").unwrap();
    let (code, out) = varadhan(&["fbm-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, Some(1));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["result"]["max_abs_z"].as_f64().unwrap() > 10.0);
}

#[test]
fn config_file_flags_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "system = \"elliptic-identity:1\"\nhurst = 0.7\n[rate]\ny = [1.0]\ngrids = [8]\nrestarts = 1\nrestricted = false\n")
        .unwrap();
    let out = dir.path().join("out");
    let (code, stdout) =
        varadhan(&["rate", "--config", cfg.to_str().unwrap(), "--y", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["config"]["hurst"], 0.7);
    assert_eq!(v["config"]["rate"]["y"][0], 2.0);
    assert!((v["result"]["d2"].as_f64().unwrap() - 2.0).abs() < 1e-4);
    assert!(out.join("rate.csv").exists());
    assert_eq!(std::fs::read_to_string(out.join("rate.json")).unwrap(), stdout);
}

#[test]
fn results_do_not_depend_on_workers() {
    let args = ["scaling", "--system", "elliptic-perturbed", "--N", "100", "--eps-grid", "1,0.5"];
    let (_, a) = varadhan(&[&args[..], &["--workers", "1"]].concat());
    let (_, b) = varadhan(&[&args[..], &["--workers", "3"]].concat());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}
