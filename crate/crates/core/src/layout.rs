//! Sub-pixel ordering shared by the kernel field and pixel shuffle.
//!
//! A target pixel `(i', j')` of a `σ`-upsampled map sits at sub-pixel
//! `(i' mod σ, j' mod σ)` of source pixel `(⌊i'/σ⌋, ⌊j'/σ⌋)`. Sub-pixels are
//! numbered row-major, and kernel-field channels put the sub-pixel outermost
//! with the `k_up × k_up` window row-major inside it.

#[inline]
pub fn subpixel_index(p_y: usize, p_x: usize, sigma: usize) -> usize {
    p_y * sigma + p_x
}

/// Channel of window entry `(n_row, n_col)` for sub-pixel `p`.
#[inline]
pub fn kernel_channel(p: usize, n_row: usize, n_col: usize, k_up: usize) -> usize {
    p * k_up * k_up + n_row * k_up + n_col
}
