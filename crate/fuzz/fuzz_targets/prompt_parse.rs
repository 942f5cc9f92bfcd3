#![no_main]

use libfuzzer_sys::fuzz_target;
use unlearnlab::prompt::{ConceptId, PromptTokens};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = PromptTokens::parse(text) {
            // the rendered words parse back to the same tokens
            assert_eq!(PromptTokens::parse(&p.to_string()).unwrap(), p);
            let _ = PromptTokens::from_ids(p.ids()).unwrap();
        }
        if let Ok(c) = ConceptId::parse(text) {
            assert_eq!(ConceptId::parse(&c.name()).unwrap(), c);
        }
    }
});
