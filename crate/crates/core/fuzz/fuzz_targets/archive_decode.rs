#![no_main]

use autoprosam::archive::Archive;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = Archive::from_bytes(data) {
        // anything that decodes must survive a round trip
        assert_eq!(Archive::from_bytes(&a.to_bytes()).unwrap(), a);
    }
});
