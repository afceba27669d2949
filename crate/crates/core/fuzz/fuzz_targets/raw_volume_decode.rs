#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((v, labels)) = autoprosam::volume::io::decode_raw(data) {
        if let Some(l) = labels {
            assert_eq!(l.shape(), v.shape());
        }
    }
});
