#![no_main]

use archdistill::nn::{decode_checkpoint, write_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        let mut again = Vec::new();
        write_checkpoint(&model, &mut again).unwrap();
        let back = decode_checkpoint(&again).unwrap();
        assert_eq!(back.config(), model.config());
    }
});
