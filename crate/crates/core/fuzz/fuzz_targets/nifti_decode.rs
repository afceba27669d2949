#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = autoprosam::volume::nifti::decode(data) {
        assert_eq!(img.data.len(), img.shape.iter().product::<usize>());
    }
});
