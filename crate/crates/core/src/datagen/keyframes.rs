use super::records::FeatureGrid;

/// `d_t = sum |frame_t - frame_{t-1}|` over all cells and channels, `d_0 = 0`.
pub fn frame_differences(frames: &[FeatureGrid]) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        if t == 0 {
            out.push(0.0);
            continue;
        }
        let prev = frames[t - 1].cells().data();
        let d = f
            .cells()
            .data()
            .iter()
            .zip(prev)
            .map(|(a, b)| (a - b).abs())
            .sum();
        out.push(d);
    }
    out
}

/// Indices of the `min(n, len)` largest scores in temporal order; ties go
/// to the smaller index.
pub fn top_by_score(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n.min(scores.len()));
    order.sort_unstable();
    order
}

/// Key frames: the `n` frames with the largest difference to their
/// predecessor, returned in temporal order.
pub fn select_keyframes(frames: &[FeatureGrid], n: usize) -> Vec<usize> {
    top_by_score(&frame_differences(frames), n)
}
