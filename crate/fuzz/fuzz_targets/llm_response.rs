#![no_main]

use libfuzzer_sys::fuzz_target;
use unlearnlab::augment::parse_chat_response;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(choices) = parse_chat_response(text) {
            assert!(!choices.is_empty());
        }
    }
});
