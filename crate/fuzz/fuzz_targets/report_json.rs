#![no_main]

use libfuzzer_sys::fuzz_target;
use unlearnlab::eval::EvalReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = EvalReport::from_json(text) {
            if let Ok(json) = r.to_json() {
                let back = EvalReport::from_json(&json).expect("own output parses");
                assert_eq!(back.to_json().unwrap(), json);
            }
            let _ = r.to_csv();
        }
    }
});
