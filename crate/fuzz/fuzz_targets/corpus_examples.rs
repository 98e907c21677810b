#![no_main]

use archdistill::corpus::{read_examples, write_examples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(examples) = read_examples(data) {
        let mut out = Vec::new();
        write_examples(&examples, &mut out).unwrap();
        assert_eq!(read_examples(out.as_slice()).unwrap(), examples);
    }
});
