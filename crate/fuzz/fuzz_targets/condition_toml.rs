#![no_main]

use libfuzzer_sys::fuzz_target;
use tvcgmm::simulation::SimulationCondition;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = SimulationCondition::from_toml(text) {
        let _ = c.true_parameters();
        if let Ok(again) = c.to_toml() {
            assert_eq!(SimulationCondition::from_toml(&again).unwrap(), c);
        }
    }
});
