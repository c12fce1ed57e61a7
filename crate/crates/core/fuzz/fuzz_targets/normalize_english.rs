#![no_main]

use libfuzzer_sys::fuzz_target;
use translit::dataset::normalize_english;

fuzz_target!(|text: &str| {
    let once = normalize_english(text);
    assert_eq!(normalize_english(&once), once);
});
