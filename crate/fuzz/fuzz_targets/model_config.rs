#![no_main]

use dkf::config::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = ModelConfig::from_toml(data) {
        let text = cfg.to_toml();
        let again = ModelConfig::from_toml(&text).expect("serialized config parses");
        assert_eq!(again.to_toml(), text);
    }
});
