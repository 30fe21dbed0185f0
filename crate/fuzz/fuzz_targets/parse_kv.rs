#![no_main]

use libfuzzer_sys::fuzz_target;
use xdiff::io::kv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = kv::parse(text) {
        for (k, v) in &pairs {
            assert!(!k.is_empty());
            let _ = kv::value::<f64>(k, v);
        }
    }
    let _ = kv::split_override(text);
});
