#![no_main]

use fusionlab::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let rendered = cfg.to_toml();
        let again = ExperimentConfig::from_toml(&rendered).expect("rendered config parses");
        assert_eq!(again.to_toml(), rendered);
        assert_eq!(again.digest(), cfg.digest());
    }
});
