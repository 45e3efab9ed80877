#![no_main]

use std::path::Path;

use arfdx::cli::{Overrides, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Err(e) = RunConfig::from_ini(text, Path::new("/fuzz"), &Overrides::default()) {
        assert_eq!(e.exit_code(), 2);
    }
});
