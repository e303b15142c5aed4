//! Naive loop implementations of the fusion and reconstruction operators in
//! f64, used as oracles for the graph versions. Matrices are row-major
//! `Vec<f64>` with explicit extents; nothing here is fast.

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.at(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "inner extents");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for l in 0..self.cols {
                    s += self.at(i, l) * b.at(l, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        Mat::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        )
    }
}

/// Position encoding value for channel `c` at flattened position `pos`.
pub fn position_encoding(d: usize, r: usize) -> Mat {
    let mut pe = Mat::zeros(d, r);
    for c in 0..d {
        for pos in 0..r {
            let freq = 10000f64.powf(-2.0 * (c / 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            pe.set(c, pos, if c % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    pe
}

/// `softmax(q kᵀ · scale) v` with explicit loops.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    assert_eq!(q.cols, k.cols);
    assert_eq!(k.rows, v.rows);
    let mut out = Mat::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let mut scores = vec![0.0; k.rows];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for l in 0..q.cols {
                acc += q.at(i, l) * k.at(j, l);
            }
            *s = acc * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for m in 0..v.cols {
            let mut acc = 0.0;
            for j in 0..k.rows {
                acc += scores[j] / z * v.at(j, m);
            }
            out.set(i, m, acc);
        }
    }
    out
}

/// Channel optimization of a d×r feature; projections are r×r.
pub fn cfo(f: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let x = f.add(&position_encoding(f.rows, f.cols));
    attention(&x.matmul(wq), &x.matmul(wk), &x.matmul(wv), 1.0 / (f.cols as f64).sqrt())
}

/// Spatial optimization of a d×r feature; projections are d×d; returns r×d.
pub fn sfo(f: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, pos_enc: bool) -> Mat {
    let x = if pos_enc {
        f.add(&position_encoding(f.rows, f.cols))
    } else {
        f.clone()
    };
    let xs = x.transpose();
    attention(&xs.matmul(wq), &xs.matmul(wk), &xs.matmul(wv), 1.0 / (f.rows as f64).sqrt())
}

/// Channel reconstruction of a d×r query from K d×r shots, averaged over
/// shots; projections are r×r.
pub fn cfr_query(query: &Mat, shots: &[Mat], a: [&Mat; 3]) -> Mat {
    let scale = 1.0 / (query.cols as f64).sqrt();
    let q = query.matmul(a[0]);
    let mut acc = Mat::zeros(query.rows, query.cols);
    for s in shots {
        acc = acc.add(&attention(&q, &s.matmul(a[1]), &s.matmul(a[2]), scale));
    }
    let k = shots.len() as f64;
    Mat::new(acc.rows, acc.cols, acc.data.iter().map(|x| x / k).collect())
}

/// Channel reconstruction of each shot from the query, shots laid side by
/// side: d×K·r.
pub fn cfr_support(shots: &[Mat], query: &Mat, a: [&Mat; 3]) -> Mat {
    let (d, r) = (query.rows, query.cols);
    let scale = 1.0 / (r as f64).sqrt();
    let (qk, qv) = (query.matmul(a[1]), query.matmul(a[2]));
    let mut out = Mat::zeros(d, r * shots.len());
    for (k, s) in shots.iter().enumerate() {
        let block = attention(&s.matmul(a[0]), &qk, &qv, scale);
        for i in 0..d {
            for j in 0..r {
                out.set(i, k * r + j, block.at(i, j));
            }
        }
    }
    out
}

/// Spatial reconstruction of an r×d query from the K·r×d support stack;
/// projections are d×d.
pub fn sfr_query(query: &Mat, stack: &Mat, a: [&Mat; 3]) -> Mat {
    let scale = 1.0 / (query.cols as f64).sqrt();
    attention(&query.matmul(a[0]), &stack.matmul(a[1]), &stack.matmul(a[2]), scale)
}

/// Spatial reconstruction of the K·r×d support stack from an r×d query.
pub fn sfr_support(stack: &Mat, query: &Mat, a: [&Mat; 3]) -> Mat {
    let scale = 1.0 / (query.cols as f64).sqrt();
    attention(&stack.matmul(a[0]), &query.matmul(a[1]), &query.matmul(a[2]), scale)
}

/// Sum of squared differences.
pub fn squared_error(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from `query` to the mean of `shots`.
pub fn prototype_distance(query: &[f64], shots: &[Vec<f64>]) -> f64 {
    let k = shots.len() as f64;
    (0..query.len())
        .map(|i| {
            let p = shots.iter().map(|s| s[i]).sum::<f64>() / k;
            (query[i] - p) * (query[i] - p)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_averages_values() {
        let q = Mat::zeros(2, 3);
        let k = Mat::zeros(4, 3);
        let v = Mat::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let out = attention(&q, &k, &v, 1.0);
        assert_eq!(out.data, vec![2.5, 2.5]);
    }

    #[test]
    fn matmul_small() {
        let a = Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Mat::new(2, 1, vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).data, vec![3.0, 7.0]);
    }
}
