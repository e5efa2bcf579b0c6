#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = monogain::model::load_model(src) {
        // A model that validates must also evaluate without panicking
        // (domain errors are fine, they come back as Err).
        let x = vec![1.0; model.n()];
        let u = vec![1.0; model.m()];
        let mut dx = vec![0.0; model.n()];
        let _ = model.f(&x, &u, &mut dx);
        let _ = model.h_vec(&x);
    }
});
