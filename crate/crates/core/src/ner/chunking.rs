//! Overlapping windows for long documents and merging of window predictions.

use crate::error::{Error, Result};

/// Token window `[start, end)` in document coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }

    /// Distance from `pos` to the nearer edge of the window.
    pub fn depth(&self, pos: usize) -> usize {
        (pos - self.start).min(self.end - 1 - pos)
    }
}

/// Windows starting at `0, stride, 2·stride, …` until one reaches `len`.
pub fn chunk_with_stride(len: usize, max_len: usize, stride: usize) -> Result<Vec<Window>> {
    if max_len == 0 {
        return Err(Error::config("max_len", "must be positive"));
    }
    if stride == 0 || stride >= max_len {
        return Err(Error::config(
            "stride",
            format!("must satisfy 0 < stride < max_len ({max_len}), got {stride}"),
        ));
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(len);
        out.push(Window { start, end });
        if end >= len {
            return Ok(out);
        }
        start += stride;
    }
}

/// For every position, takes the prediction of the covering window in which
/// the position lies deepest; ties go to the earlier window.
pub fn merge_window_predictions<T: Clone>(windows: &[(Window, Vec<T>)], len: usize) -> Result<Vec<T>> {
    for (w, preds) in windows {
        if preds.len() != w.len() {
            return Err(Error::Shape(format!(
                "window [{}, {}) carries {} predictions",
                w.start,
                w.end,
                preds.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(len);
    for pos in 0..len {
        let mut best: Option<(usize, usize)> = None;
        for (k, (w, _)) in windows.iter().enumerate() {
            if w.contains(pos) && best.is_none_or(|(_, d)| w.depth(pos) > d) {
                best = Some((k, w.depth(pos)));
            }
        }
        let (k, _) = best.ok_or(Error::Coverage(pos))?;
        let (w, preds) = &windows[k];
        out.push(preds[pos - w.start].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(start: usize, end: usize) -> Window {
        Window { start, end }
    }

    #[test]
    fn stride_enumeration() {
        assert_eq!(chunk_with_stride(3, 4, 2).unwrap(), vec![w(0, 3)]);
        assert_eq!(
            chunk_with_stride(10, 4, 2).unwrap(),
            vec![w(0, 4), w(2, 6), w(4, 8), w(6, 10)]
        );
        assert!(matches!(chunk_with_stride(10, 4, 4), Err(Error::Config { key, .. }) if key == "stride"));
    }

    #[test]
    fn merge_rule() {
        let ws = chunk_with_stride(10, 4, 2).unwrap();
        // each window predicts its own index everywhere
        let tagged: Vec<_> = ws.iter().enumerate().map(|(k, w)| (*w, vec![k; w.len()])).collect();
        let m = merge_window_predictions(&tagged, 10).unwrap();
        // position 3: depth 0 in [0,4), depth 1 in [2,6) -> second window
        assert_eq!(m[3], 1);
        // position 2: depth 1 in [0,4), depth 0 in [2,6) -> first window
        assert_eq!(m[2], 0);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 2, 2, 3, 3, 3]);

        let single = vec![(w(0, 3), vec!['a', 'b', 'c'])];
        assert_eq!(merge_window_predictions(&single, 3).unwrap(), vec!['a', 'b', 'c']);
        assert!(matches!(merge_window_predictions(&single, 4), Err(Error::Coverage(3))));
    }
}
