#![no_main]

use dd_iss::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = Dataset::read_csv(data, 1.0) else { return };
    let mut out = Vec::new();
    ds.write_csv(&mut out).unwrap();
    let again = Dataset::read_csv(out.as_slice(), 1.0).unwrap();
    assert_eq!(ds.len(), again.len());
});
