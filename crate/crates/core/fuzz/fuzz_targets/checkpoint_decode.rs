#![no_main]

use autoprosam::archive::Archive;
use autoprosam::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = Archive::from_bytes(data) {
        let _ = Model::from_archive(&a);
    }
});
