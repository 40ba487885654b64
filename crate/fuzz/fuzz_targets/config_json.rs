#![no_main]

use dd_iss::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) else { return };
    let _ = cfg.validate();
    let _ = cfg.hash();
});
