#![no_main]

use libfuzzer_sys::fuzz_target;
use translit::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint loads");
        assert_eq!(again, ckpt);
    }
});
