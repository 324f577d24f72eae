//! Plain-loop compute kernels behind the graph ops.

use super::Tensor;

pub fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.rank(), 3, "expected rank-3 tensor, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(t.rank(), 4, "expected rank-4 tensor, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

pub fn conv_out_hw(hi: usize, wi: usize, kh: usize, kw: usize, s: usize, p: usize) -> (usize, usize) {
    assert!(hi + 2 * p >= kh && wi + 2 * p >= kw, "kernel larger than padded input");
    ((hi + 2 * p - kh) / s + 1, (wi + 2 * p - kw) / s + 1)
}

/// y[o,oy,ox] = sum_{i,ky,kx} x[i, oy*s+ky-p, ox*s+kx-p] * k[o,i,ky,kx]
pub fn conv2d(x: &Tensor, k: &Tensor, s: usize, p: usize) -> Tensor {
    let (ci, hi, wi) = dims3(x);
    let (co, cik, kh, kw) = dims4(k);
    assert_eq!(ci, cik, "conv2d channel mismatch");
    let (ho, wo) = conv_out_hw(hi, wi, kh, kw, s, p);
    let mut out = vec![0.0; co * ho * wo];
    let xd = x.data();
    let kd = k.data();
    for o in 0..co {
        for i in 0..ci {
            let kbase = (o * ci + i) * kh * kw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let xrow = (i * hi + iy as usize) * wi;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] * kd[krow + kx];
                        }
                    }
                    out[(o * ho + oy) * wo + ox] += acc;
                }
            }
        }
    }
    Tensor::new(&[co, ho, wo], out)
}

/// Adjoint of conv2d w.r.t. its input: scatters g back to input coordinates.
pub fn conv_input_grad(g: &Tensor, k: &Tensor, s: usize, p: usize, hi: usize, wi: usize) -> Tensor {
    let (co, ho, wo) = dims3(g);
    let (cok, ci, kh, kw) = dims4(k);
    assert_eq!(co, cok, "conv_input_grad channel mismatch");
    let mut out = vec![0.0; ci * hi * wi];
    let gd = g.data();
    let kd = k.data();
    for o in 0..co {
        for i in 0..ci {
            let kbase = (o * ci + i) * kh * kw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gd[(o * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let orow = (i * hi + iy as usize) * wi;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            out[orow + ix as usize] += gv * kd[krow + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[ci, hi, wi], out)
}

/// Adjoint of conv2d w.r.t. its kernel.
pub fn conv_kernel_grad(g: &Tensor, x: &Tensor, s: usize, p: usize, kh: usize, kw: usize) -> Tensor {
    let (co, ho, wo) = dims3(g);
    let (ci, hi, wi) = dims3(x);
    let mut out = vec![0.0; co * ci * kh * kw];
    let gd = g.data();
    let xd = x.data();
    for o in 0..co {
        for i in 0..ci {
            let kbase = (o * ci + i) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        let grow = (o * ho + oy) * wo;
                        let xrow = (i * hi + iy as usize) * wi;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            acc += gd[grow + ox] * xd[xrow + ix as usize];
                        }
                    }
                    out[kbase + ky * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(&[co, ci, kh, kw], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2");
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2");
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(ka, kb, "matmul inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for kk in 0..ka {
            let av = ad[i * ka + kk];
            if av == 0.0 {
                continue;
            }
            let brow = kk * n;
            let orow = i * n;
            for j in 0..n {
                out[orow + j] += av * bd[brow + j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose2(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "transpose on rank-2 only");
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ones_example() {
        // 3x3 ones kernel over 5x5 ones image, stride 1, no pad -> 3x3 map of 9s
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0);
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_direct_summation() {
        // random-ish input checked against an independently indexed summation
        let x = Tensor::new(&[2, 4, 4], (0..32).map(|i| ((i * 7 + 3) % 11) as f64 * 0.13).collect());
        let k = Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| ((i * 5 + 1) % 13) as f64 * 0.07 - 0.3).collect());
        let y = conv2d(&x, &k, 1, 1);
        assert_eq!(y.shape(), &[3, 4, 4]);
        let mut expect = 0.0;
        let (o, oy, ox) = (1usize, 2usize, 1usize);
        for i in 0..2 {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let iy = (oy + ky) as isize - 1;
                    let ix = (ox + kx) as isize - 1;
                    if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                        expect += x.data()[(i * 4 + iy as usize) * 4 + ix as usize]
                            * k.data()[((o * 2 + i) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        assert!((y.data()[(o * 4 + oy) * 4 + ox] - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_adjoints_are_consistent() {
        // <conv(x,k), g> == <x, conv_input_grad(g,k)> == <k, conv_kernel_grad(g,x)>
        let x = Tensor::new(&[2, 5, 5], (0..50).map(|i| (i as f64 * 0.37).sin()).collect());
        let k = Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.71).cos()).collect());
        for &(s, p) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let y = conv2d(&x, &k, s, p);
            let g = y.map(|v| (v * 1.3).sin());
            let dot = |a: &Tensor, b: &Tensor| {
                a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>()
            };
            let lhs = dot(&y, &g);
            let gx = conv_input_grad(&g, &k, s, p, 5, 5);
            let gk = conv_kernel_grad(&g, &x, s, p, 3, 3);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - dot(&k, &gk)).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_transpose() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(transpose2(&a).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
