#![no_main]

use arfdx::featurize::{FeaturizerConfig, FittedFeaturizer, WindowValues};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = FeaturizerConfig::from_json(text);
    if let Ok(f) = FittedFeaturizer::from_json(text) {
        let v = f.encode(&WindowValues::new()).expect("empty window encodes");
        assert_eq!(v.len(), f.d);
        assert!(v.bits.iter().all(|b| !b));
    }
});
