#![no_main]

use dgow::{tokenize, DatasetProfile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    for profile in [DatasetProfile::DEFAULT, DatasetProfile::SENTIMENT] {
        let tokens = tokenize(&text, profile);
        for t in &tokens {
            assert!(!t.is_empty());
            assert!(t.chars().all(char::is_alphanumeric));
        }
        // tokens are already normal form
        assert_eq!(tokenize(&tokens.join(" "), profile), tokens);
    }
});
