#![no_main]

use libfuzzer_sys::fuzz_target;

// First line is the header, the rest is the parameter byte stream,
// mirroring how load_model splits a snapshot file.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == b'\n').map_or(data.len(), |i| i + 1);
    if let Ok(header) = std::str::from_utf8(&data[..split]) {
        let _ = fed_augmix::models::parse_snapshot(header, &data[split..]);
    }
});
