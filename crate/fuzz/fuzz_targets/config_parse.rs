#![no_main]

use libfuzzer_sys::fuzz_target;
use unlearnlab_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml(text) {
            cfg.unlearn_config().expect("validated config converts");
            let _ = cfg.hash();
        }
    }
});
