#![no_main]

use arfdx::cohort::{parse_cohort, to_ndjson, SupportAliases};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let ingested = parse_cohort(text, &SupportAliases::default());
    // accepted stays survive a write/read cycle
    let again = parse_cohort(&to_ndjson(&ingested.stays), &SupportAliases::default());
    assert!(again.rejects.is_empty());
    assert_eq!(again.stays.len(), ingested.stays.len());
});
