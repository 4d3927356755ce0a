#![no_main]

use libfuzzer_sys::fuzz_target;
use ricci_lab_cli::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    match Scenario::from_toml_str(text, "fuzz") {
        Ok(scenario) => {
            // Accepted scenarios survive their canonical form unchanged.
            let again = Scenario::from_toml_str(&scenario.to_toml(), "canonical").expect("canonical form parses");
            assert_eq!(again, scenario);
        }
        Err(e) => assert!(e.line >= 1 && e.column >= 1),
    }
});
