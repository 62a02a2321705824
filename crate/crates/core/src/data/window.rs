use crate::error::{Error, Result};

/// Source indices for balanced boundary padding: `ceil((w - n) / 2)` copies
/// of the first frame, the `n` originals, then `floor((w - n) / 2)` copies of
/// the last frame.
pub fn pad_to_window_indices(n: usize, window: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Invalid("cannot pad an empty frame sequence".into()));
    }
    if n > window {
        return Err(Error::Invalid(format!(
            "sequence of {n} frames is longer than the window of {window}; window it first"
        )));
    }
    let missing = window - n;
    let front = missing.div_ceil(2);
    let back = missing / 2;
    let mut idx = Vec::with_capacity(window);
    idx.extend(std::iter::repeat_n(0, front));
    idx.extend(0..n);
    idx.extend(std::iter::repeat_n(n - 1, back));
    Ok(idx)
}

pub fn pad_to_window<T: Clone>(frames: &[T], window: usize) -> Result<Vec<T>> {
    let idx = pad_to_window_indices(frames.len(), window)?;
    Ok(idx.into_iter().map(|i| frames[i].clone()).collect())
}

/// Source indices of the window of length `window` around `apex`.
///
/// Long clips get a window starting at `apex - window / 2`, clamped to the
/// clip bounds. Short clips are padded with [`pad_to_window_indices`].
pub fn apex_window_indices(n: usize, apex: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::Invalid("window length must be positive".into()));
    }
    if apex >= n {
        return Err(Error::Invalid(format!(
            "apex out of range: index {apex} for a clip of {n} frames"
        )));
    }
    if n < window {
        return pad_to_window_indices(n, window);
    }
    let start = apex.saturating_sub(window / 2).min(n - window);
    Ok((start..start + window).collect())
}

pub fn apex_window<T: Clone>(frames: &[T], apex: usize, window: usize) -> Result<Vec<T>> {
    let idx = apex_window_indices(frames.len(), apex, window)?;
    Ok(idx.into_iter().map(|i| frames[i].clone()).collect())
}
