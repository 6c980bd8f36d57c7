//! Every primitive and every loss variant against central differences.

use cot_core::harness::gradsuite::{cases, CaseKind};

#[test]
fn all_cases_pass_on_ten_seeds() {
    let mut failures = Vec::new();
    for case in cases() {
        for seed in 0..10 {
            let rep = (case.run)(seed, 1e-6, 1e-4).unwrap();
            if !rep.passed() {
                failures.push(format!(
                    "{} seed {seed}: {:e}",
                    case.name, rep.max_rel_error
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn suite_covers_every_loss_variant() {
    let objectives: Vec<&str> = cases()
        .iter()
        .filter(|c| c.kind == CaseKind::Objective)
        .map(|c| c.name)
        .collect();
    for v in [
        "implicit",
        "explicit",
        "classification",
        "cell",
        "prompt",
        "joint_alt",
    ] {
        assert!(objectives.contains(&v), "missing {v}");
    }
}
