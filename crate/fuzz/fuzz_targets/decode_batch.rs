#![no_main]

use libfuzzer_sys::fuzz_target;
use xdiff::io::{decode_batch, encode_batch};

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = decode_batch(data) {
        let bytes = encode_batch(&batch);
        let again = decode_batch(&bytes).expect("re-encoded batch decodes");
        assert_eq!(encode_batch(&again), bytes);
    }
});
