//! Run-length encoding of binary masks.
//!
//! Runs alternate between zeros and ones in row-major order, starting with
//! a (possibly empty) run of zeros.

use crate::geometry::{PxBox, Source};

pub fn rle_encode(mask: impl IntoIterator<Item = bool>) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for bit in mask {
        if bit != current {
            runs.push(len);
            current = bit;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u64], width: u32, height: u32) -> Result<Vec<bool>, String> {
    let total = u64::from(width) * u64::from(height);
    let sum = runs.iter().try_fold(0u64, |acc, &r| acc.checked_add(r));
    if sum != Some(total) {
        return Err(format!(
            "run lengths sum to {sum:?}, expected {total} for {width}x{height}"
        ));
    }
    let mut mask = Vec::with_capacity(total as usize);
    for (i, &r) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat(i % 2 == 1).take(r as usize));
    }
    Ok(mask)
}

/// Tight box of the set pixels, exclusive on the right and bottom.
pub(crate) fn tight_box(mask: &[bool], width: u32) -> Option<PxBox<Source>> {
    let w = width as usize;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bounds.map(|(x0, y0, x1, y1)| PxBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}
