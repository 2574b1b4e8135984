#![no_main]

use dkf::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = ExperimentConfig::from_toml(data) {
        let _ = cfg.validate();
        let text = cfg.to_toml();
        let again = ExperimentConfig::from_toml(&text).expect("serialized config parses");
        assert_eq!(again.to_toml(), text);
        assert_eq!(again.hash(), cfg.hash());
    }
});
