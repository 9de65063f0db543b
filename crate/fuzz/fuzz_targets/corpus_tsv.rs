#![no_main]

use dgow::corpus::{parse_corpus_tsv, Corpus};
use dgow::LoadOptions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(docs) = parse_corpus_tsv(text) else { return };
    for min_count in [1, 2] {
        let opts = LoadOptions { min_count, ..LoadOptions::default() };
        if let Ok((corpus, report)) = Corpus::from_documents(&docs, opts) {
            assert_eq!(report.train, corpus.train.len());
            assert!(corpus.train.iter().all(|s| !s.tokens.is_empty()));
        }
    }
});
