#![no_main]

use libfuzzer_sys::fuzz_target;
use quadbench::policy::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(policy) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&policy);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), bytes);
    }
});
