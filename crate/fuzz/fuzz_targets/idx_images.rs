#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = fed_augmix::data_io::parse_idx_images(data);
});
