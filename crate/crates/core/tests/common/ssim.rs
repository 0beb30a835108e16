//! Window-by-window SSIM straight from the definition, with a 2-D Gaussian
//! weight grid built independently of the library's separable filter.

use msrnet::tensor::Tensor;

pub fn luma(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            out.push(0.299 * t.at(0, 0, y, x) as f64 + 0.587 * t.at(0, 1, y, x) as f64 + 0.114 * t.at(0, 2, y, x) as f64);
        }
    }
    out
}

pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let (c1, c2) = (1e-4, 9e-4);
    let mut g = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - K {
        for x0 in 0..=w - K {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let wt = g[i][j] / total;
                    ma += wt * a[(y0 + i) * w + x0 + j];
                    mb += wt * b[(y0 + i) * w + x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let wt = g[i][j] / total;
                    let (da, db) = (a[(y0 + i) * w + x0 + j] - ma, b[(y0 + i) * w + x0 + j] - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    sum / windows as f64
}
