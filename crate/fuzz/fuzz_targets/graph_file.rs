#![no_main]

use dgow::GraphFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = GraphFile::parse(text) {
        let again = GraphFile::parse(&g.to_text()).expect("written graph parses");
        assert_eq!(again, g);
    }
});
