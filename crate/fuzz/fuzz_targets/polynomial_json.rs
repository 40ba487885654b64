#![no_main]

use dd_iss::poly::Polynomial;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(p) = serde_json::from_slice::<Polynomial>(data) else { return };
    let back: Polynomial = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(p, back);
    if p.nvars() <= 8 && p.degree() <= 16 {
        let x = vec![0.5; p.nvars()];
        let _ = p.eval(&x);
        for i in 0..p.nvars() {
            let _ = p.derivative(i);
        }
    }
});
