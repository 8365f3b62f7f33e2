//! Average normalized Levenshtein similarity for closed-ended answers.

pub const DEFAULT_ANLS_THRESHOLD: f64 = 0.5;

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Normalized similarity `1 - d / max(len)` on case-folded, trimmed strings,
/// zeroed below `threshold`. Two empty strings score 1. Lengths count
/// Unicode scalar values.
pub fn anls(prediction: &str, truth: &str, threshold: f64) -> f64 {
    let (p, t) = (normalize(prediction), normalize(truth));
    let longest = p.chars().count().max(t.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let nls = 1.0 - strsim::levenshtein(&p, &t) as f64 / longest as f64;
    if nls >= threshold {
        nls
    } else {
        0.0
    }
}

/// Best score over several acceptable answers, with the index of the answer
/// that achieved it. An empty truth list scores 0.
pub fn anls_best(prediction: &str, truths: &[&str], threshold: f64) -> (f64, Option<usize>) {
    truths
        .iter()
        .enumerate()
        .map(|(i, t)| (anls(prediction, t, threshold), Some(i)))
        .fold((0.0, None), |best, cur| if cur.0 > best.0 || best.1.is_none() { cur } else { best })
}
