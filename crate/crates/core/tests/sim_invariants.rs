mod common;

use common::scenarios::random_scenario;
use pkguard::sim::Scenario;
use proptest::prelude::*;

fn check(seed: u64) -> Result<(), String> {
    let (text, _) = random_scenario(seed);
    let sc = Scenario::parse(&text).map_err(|e| format!("{e}\n{text}"))?;
    let out = sc.run().map_err(|e| format!("{e}\n{text}"))?;
    if out.failures.is_empty() {
        Ok(())
    } else {
        Err(format!("{:?}\n{text}", out.failures))
    }
}

#[test]
fn generated_scenarios_parse_and_start() {
    let mut jit = 0;
    for seed in 0..50 {
        let (text, shape) = random_scenario(seed);
        jit += shape.jit as usize;
        let sc = Scenario::parse(&text).unwrap();
        sc.run().unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
    }
    assert!(jit > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scenarios_uphold_the_invariants(seed in any::<u64>()) {
        if let Err(e) = check(seed) {
            prop_assert!(false, "seed {}: {}", seed, e);
        }
    }
}
