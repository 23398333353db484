//! Regenerates the golden fixtures under `tests/data/`. Ignored by
//! default; run explicitly after an intentional format or sampler change:
//! `cargo test -p rhm-core --test regenerate_goldens -- --ignored`
//! (from `crates/core/`), then review the diff.

use rhm_core::experiments::*;
use rhm_core::grammar::*;
use rhm_core::learner::ScheduleMultipliers;
use rhm_core::RngStream;

#[test]
#[ignore]
fn regenerate_goldens() {
    // Golden grammar: recorded from the first validated run, then frozen.
    let params = RhmParams::new(2, 2, 4, 3, 7);
    let mut rng = RngStream::from_seed(7);
    let instance = RhmInstance::sample(params, &mut rng).unwrap();
    assert!(instance.validate().passed());
    std::fs::write(
        "tests/data/golden_grammar_L2s2V4m3_seed7.json",
        save_instance(&instance),
    )
    .unwrap();

    // Golden sweep CSV: small deterministic run.
    let config = SweepConfig {
        levels: vec![1, 2],
        branching: vec![2],
        vocab: vec![3],
        rules: vec![1],
        n_grid: vec![60, 120],
        trials: 2,
        seed: 13,
        multipliers: ScheduleMultipliers {
            sample_mult: 100.0,
            feature_count: 64,
            ..Default::default()
        },
        test_size: 50,
        require_signal: true,
    };
    std::fs::write(
        "tests/data/golden_sweep_config.json",
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .unwrap();
    let result = run_sweep(&config).unwrap();
    let mut buf = Vec::new();
    export_csv(&result, &mut buf).unwrap();
    std::fs::write("tests/data/golden_sweep.csv", &buf).unwrap();
    println!("goldens written");
}
