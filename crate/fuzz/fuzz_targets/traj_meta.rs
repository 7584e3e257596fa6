#![no_main]

use libfuzzer_sys::fuzz_target;
use quadbench::trajgen::read_meta;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = read_meta(text);
    }
});
