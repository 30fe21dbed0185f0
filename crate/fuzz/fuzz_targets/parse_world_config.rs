#![no_main]

use libfuzzer_sys::fuzz_target;
use xdiff::WorldConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = WorldConfig::from_kv_text(text) {
        let out = cfg.to_kv_text();
        let back = WorldConfig::from_kv_text(&out).expect("printed config parses");
        assert_eq!(back.to_kv_text(), out);
    }
});
