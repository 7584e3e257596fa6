#![no_main]

use libfuzzer_sys::fuzz_target;
use quadbench::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml(text) {
            let text = cfg.to_toml().expect("valid config serializes");
            let again = RunConfig::from_toml(&text).expect("serialized config parses");
            assert_eq!(again.to_toml().unwrap(), text);
        }
    }
});
