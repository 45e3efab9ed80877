#![no_main]

use arfdx::imaging::{decode_pgm, encode_pgm, histogram_equalize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        let eq = histogram_equalize(&img);
        assert_eq!(eq.pixels().len(), img.pixels().len());
        assert_eq!(decode_pgm(&encode_pgm(&img)).expect("round trip"), img);
    }
});
