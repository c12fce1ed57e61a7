#![no_main]

use libfuzzer_sys::fuzz_target;
use translit::ctc::{ctc_beam_decode, ctc_greedy_decode, ctc_loss, BLANK};
use translit::tensor::log_sum_exp;
use translit::Tensor;

// byte 0: classes, byte 1: beam width, byte 2: target length, then target
// labels, then one byte per logit.
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let classes = 1 + data[0] as usize % 6;
    let width = 1 + data[1] as usize % 8;
    let target_len = data[2] as usize % 5;
    let rest = &data[3..];
    if rest.len() < target_len {
        return;
    }
    let target: Vec<u32> = rest[..target_len]
        .iter()
        .map(|&b| b as u32 % classes as u32)
        .collect();
    let logits = &rest[target_len..];
    let frames = (logits.len() / classes).min(24);
    if frames == 0 {
        return;
    }
    let mut rows = Vec::with_capacity(frames);
    for chunk in logits.chunks_exact(classes).take(frames) {
        let raw: Vec<f64> = chunk.iter().map(|&b| (b as f64 - 128.0) / 16.0).collect();
        let z = log_sum_exp(&raw);
        rows.push(raw.iter().map(|v| v - z).collect::<Vec<f64>>());
    }
    let table = Tensor::from_rows(&rows).unwrap();

    let greedy = ctc_greedy_decode(&table);
    assert!(greedy.len() <= frames && !greedy.contains(&BLANK));
    let beam = ctc_beam_decode(&table, width).unwrap();
    assert!(beam.len() <= frames && !beam.contains(&BLANK));

    if let Ok((nll, grad)) = ctc_loss(&table, &target) {
        assert!(nll.is_finite() && nll >= -1e-9);
        assert!(grad.is_finite());
    }
});
