#![no_main]

use libfuzzer_sys::fuzz_target;
use xdiff::cli::parse_cli;

// Arguments are NUL-separated; parsing must never panic.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let argv = std::iter::once("xdiff").chain(text.split('\0'));
    if let Ok(cfg) = parse_cli(argv) {
        let _ = cfg.resolve_configs();
    }
});
