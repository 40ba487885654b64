#![no_main]

use dd_iss::experiment::CertificateFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = serde_json::from_slice::<CertificateFile>(data) else { return };
    let Some(cert) = file.certificate else { return };
    if cert.sos.iter().all(|r| r.certificate.basis.len() <= 32) {
        let _ = cert.check_invariants();
    }
});
