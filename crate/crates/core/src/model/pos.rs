/// Fixed 2-D sine-cosine positional table `[rows * cols, dim]`.
///
/// Half the channels encode the row index and half the column index; within
/// each half, the first quarter-width is `sin(pos * ω_k)` and the second is
/// `cos(pos * ω_k)` with `ω_k = 10000^(-k / (dim/4))`. `dim` must be divisible by 4.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "positional width must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}
