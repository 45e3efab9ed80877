#![no_main]

use arfdx::imaging::EmbeddingSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = EmbeddingSet::decode(data) {
        let bytes = set.encode().expect("decoded set re-encodes");
        assert_eq!(EmbeddingSet::decode(&bytes).expect("round trip"), set);
    }
});
