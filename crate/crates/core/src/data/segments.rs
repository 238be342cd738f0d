use std::ops::Range;

/// Frame ranges of the `g·t` temporal segments of an `n_frames`-long video.
///
/// Segment `i` covers `[⌊i·N/(G·T)⌋, ⌊(i+1)·N/(G·T)⌋)`. When the video is
/// shorter than the segment count that range can be empty; it is then
/// widened to the single frame at its start, so short videos repeat frames
/// instead of producing empty segments.
pub fn segment_boundaries(n_frames: usize, t: usize, g: usize) -> Vec<Range<usize>> {
    let segs = g * t;
    if n_frames == 0 || segs == 0 {
        return Vec::new();
    }
    (0..segs)
        .map(|i| {
            let lo = (i * n_frames / segs).min(n_frames - 1);
            let hi = ((i + 1) * n_frames / segs).max(lo + 1);
            lo..hi
        })
        .collect()
}
