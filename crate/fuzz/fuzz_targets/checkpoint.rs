#![no_main]

use dgow::io::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_checkpoint(data) {
        // a decoded checkpoint re-encodes to the same bytes
        assert_eq!(encode_checkpoint(&store), data);
    }
});
