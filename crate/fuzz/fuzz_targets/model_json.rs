#![no_main]

use dd_iss::experiment::ModelFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = serde_json::from_slice::<ModelFile>(data) else { return };
    let _ = file.model.validate();
});
