#![no_main]

use arfdx::labels::PhenotypeRuleset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rules) = PhenotypeRuleset::from_json(text) {
        assert_eq!(PhenotypeRuleset::from_json(&rules.to_json()).expect("round trip"), rules);
    }
});
