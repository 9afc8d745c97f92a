use std::fs;

use crowdsense::ldp::PrivacyParams;
use crowdsense::ledger::{verify_event_chain, ContractPhase};
use crowdsense::sim::{
    export_results, export_summary, run_experiment, run_full_protocol_experiment, run_full_protocol_trial,
    run_ldp_experiment, run_ldp_trial, sample_true_choices, trial_file_name, ExperimentConfig, Mode,
    REFERENCE_POPULATIONS,
};

fn config(population: usize, f: f64, seed: u64, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        privacy: PrivacyParams::new(f).unwrap(),
        mode,
        ..ExperimentConfig::new(population, seed)
    }
}

#[test]
fn noiseless_runs_are_exact_in_both_modes() {
    for mode in [Mode::LdpOnly, Mode::FullProtocol] {
        let run = run_experiment(&config(50, 0.0, 3, mode)).unwrap();
        let r = &run.results[0];
        let actual: Vec<f64> = r.actual_counts.iter().map(|&c| c as f64).collect();
        assert_eq!(r.estimated_raw, actual, "{mode:?}");
        assert_eq!(r.metrics.l1, 0.0);
        assert_eq!(r.metrics.l2, 0.0);
        assert_eq!(r.metrics.max_bin_abs, 0.0);
    }
}

#[test]
fn full_protocol_matches_ldp_only_bit_for_bit() {
    let ldp = run_ldp_trial(&config(500, 0.5, 77, Mode::LdpOnly), 0).unwrap();
    let (full, run) = run_full_protocol_trial(&config(500, 0.5, 77, Mode::FullProtocol), 0).unwrap();
    assert_eq!(ldp.actual_counts, full.actual_counts);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ldp.estimated_raw), bits(&full.estimated_raw));
    assert_eq!(ldp.metrics, full.metrics);

    assert_eq!(run.contract.phase(), ContractPhase::Settled);
    assert!(verify_event_chain(run.contract.log()).is_valid());
    // 800 split 500 ways is 1 each, 300 kept back.
    assert!(run.payouts.values().all(|&v| v == 1));
    assert_eq!(run.payouts.len(), 500);
}

#[test]
fn full_protocol_experiment_keeps_one_ledger_per_trial() {
    let mut c = config(40, 0.5, 5, Mode::FullProtocol);
    c.trials = 3;
    let out = run_full_protocol_experiment(&c).unwrap();
    assert_eq!(out.logs.len(), 3);
    assert_eq!(out.traces.len(), 3);
    assert!(out.logs.iter().all(|l| verify_event_chain(l).is_valid()));
    assert_ne!(out.logs[0].head(), out.logs[1].head());
    let ldp = run_ldp_experiment(&ExperimentConfig { mode: Mode::LdpOnly, ..c }).unwrap();
    assert_eq!(ldp.results, out.run.results);
}

#[test]
fn histograms_conserve_population() {
    let mut c = config(1234, 0.5, 9, Mode::LdpOnly);
    c.trials = 4;
    for r in run_ldp_experiment(&c).unwrap().results {
        assert_eq!(r.actual_counts.iter().sum::<u64>(), 1234);
    }
}

#[test]
fn sampled_choices_center_on_the_mean() {
    let seeds = crowdsense::seed::SeedTree::new(11);
    let choices = sample_true_choices(10_000, 10.0, 2.0, 20, &seeds);
    assert!(choices.iter().all(|&c| c < 20));
    let mean = choices.iter().map(|&c| (c + 1) as f64).sum::<f64>() / 10_000.0;
    assert!((mean - 10.0).abs() < 0.1, "mean {mean}");

    let degenerate = sample_true_choices(100, 10.0, 1e-9, 20, &seeds);
    assert!(degenerate.iter().all(|&c| c == 9));
}

#[test]
fn error_shrinks_with_population() {
    let means: Vec<f64> = REFERENCE_POPULATIONS
        .iter()
        .map(|&n| {
            let mut c = config(n, 0.5, 42, Mode::LdpOnly);
            c.trials = 30;
            run_ldp_experiment(&c).unwrap().summary().mean_l1_normalized
        })
        .collect();
    let violations = means.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(violations <= 1, "{means:?}");
    assert!(means[3] < means[0]);
}

#[test]
fn most_bins_within_four_standard_errors() {
    let c = config(500, 0.5, 42, Mode::LdpOnly);
    let r = run_ldp_trial(&c, 0).unwrap();
    assert!(r.bins_within_std_errors(4.0, &c.privacy) >= 18);
}

#[test]
fn exports_are_byte_identical_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for dir in [&dir_a, &dir_b] {
        rows.clear();
        for &n in &REFERENCE_POPULATIONS {
            let mut c = config(n, 0.5, 42, Mode::LdpOnly);
            c.trials = 2;
            let run = run_ldp_experiment(&c).unwrap();
            let written = export_results(&run, dir.path()).unwrap();
            assert_eq!(written.len(), 2);
            rows.push(run.summary());
        }
        export_summary(&rows, &dir.path().join("summary.csv")).unwrap();
    }
    let summary = fs::read_to_string(dir_a.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert_eq!(summary, fs::read_to_string(dir_b.path().join("summary.csv")).unwrap());
    for &n in &REFERENCE_POPULATIONS {
        for t in 0..2 {
            let name = trial_file_name(n, t);
            let a = fs::read(dir_a.path().join(&name)).unwrap();
            assert_eq!(a, fs::read(dir_b.path().join(&name)).unwrap());
            assert_eq!(String::from_utf8(a).unwrap().lines().count(), 21);
        }
    }
}

#[test]
fn export_reports_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    let run = run_ldp_experiment(&config(10, 0.5, 1, Mode::LdpOnly)).unwrap();
    assert!(export_results(&run, &file).is_err());
}
