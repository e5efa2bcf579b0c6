#![no_main]

use libfuzzer_sys::fuzz_target;

// Drives the matrix-literal grammar through the document parser with the
// fuzz input standing in for each of the three blocks.
fuzz_target!(|data: &[u8]| {
    let Ok(lit) = std::str::from_utf8(data) else {
        return;
    };
    let doc = format!(
        "states x1\ninputs u1\nparam p = 2\nlinear A = {lit}\nlinear B = [[1]]\nlinear C = {lit}\n"
    );
    let _ = monogain::model::load_model(&doc);
});
