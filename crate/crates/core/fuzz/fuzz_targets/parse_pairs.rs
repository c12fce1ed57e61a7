#![no_main]

use libfuzzer_sys::fuzz_target;
use translit::dataset::parse_pairs;
use translit::CodepointVocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(pairs) = parse_pairs(data) else {
        return;
    };
    for p in &pairs {
        assert!(!p.source.is_empty() && !p.target.is_empty());
        assert!(!p.source.contains(['\t', '\n']) && !p.target.contains(['\t', '\n']));
    }
    let vocab = CodepointVocabulary::build(pairs.iter().map(|p| &p.source));
    for p in &pairs {
        let ids = vocab
            .encode(&p.source)
            .expect("vocabulary covers its corpus");
        assert_eq!(vocab.decode(&ids), p.source);
    }
});
