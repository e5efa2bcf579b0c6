#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(tokens) = monogain::expr::tokenize(src) else {
        return;
    };
    if let Ok(ast) = monogain::expr::parse_tokens(&tokens) {
        // Exercise the traversals too: they must handle any shape the
        // parser can produce.
        let mut vars = Vec::new();
        ast.variables(&mut vars);
        let _ = ast.rename(&|_| None);
        assert!(ast.same_shape(&ast.substitute(&|_| None)));
    }
});
