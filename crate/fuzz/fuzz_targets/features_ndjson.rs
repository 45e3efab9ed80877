#![no_main]

use arfdx::featurize::features_from_ndjson;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&d, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(rows) = features_from_ndjson(text, usize::from(d)) {
        assert!(rows.iter().all(|(_, v)| v.len() == usize::from(d)));
    }
});
