#![no_main]

use libfuzzer_sys::fuzz_target;
use unlearnlab::checkpoint::{decode, decode_any, encode};

fuzz_target!(|data: &[u8]| {
    if decode_any(data).is_ok() {
        // anything that decodes as one dtype must re-encode to the same bytes
        if let Ok(s) = decode::<f32>(data) {
            assert_eq!(encode(&s).unwrap(), data);
        }
        if let Ok(s) = decode::<f64>(data) {
            assert_eq!(encode(&s).unwrap(), data);
        }
    }
});
