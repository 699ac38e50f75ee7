//! Forward and backward passes for the individual layer types.
//!
//! Every backward pass is hand-derived. Convolutions are lowered to matrix
//! products through an im2col buffer.

use super::gemm::{gemm, Layout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of a parametrised layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

fn check_dense(weight: &Tensor, bias: &Tensor, input: &Tensor) -> Result<(usize, usize, usize)> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::dim("weight", format!("expected a matrix, got {:?}", weight.shape())));
    };
    if bias.shape() != [out] {
        return Err(Error::dim(
            "bias",
            format!("expected [{out}], got {:?}", bias.shape()),
        ));
    }
    if input.shape().len() < 2 || input.row_len() != inp {
        return Err(Error::dim(
            "input",
            format!("expected [batch × {inp}], got {:?}", input.shape()),
        ));
    }
    Ok((input.rows(), inp, out))
}

/// `output[b][o] = Σ_k weight[o][k] · input[b][k] + bias[o]`.
///
/// Inputs with more than two dimensions are flattened per sample.
pub fn dense_forward(weight: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (batch, inp, out) = check_dense(weight, bias, input)?;
    let mut output = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        output.extend_from_slice(bias.data());
    }
    gemm(
        batch,
        inp,
        out,
        input.data(),
        Layout::row_major(inp),
        weight.data(),
        Layout::transposed(inp),
        1.0,
        &mut output,
    );
    Tensor::new(vec![batch, out], output)
}

/// Backward pass of [`dense_forward`]. The input gradient keeps the shape of `input`.
pub fn dense_backward(weight: &Tensor, input: &Tensor, grad_out: &Tensor) -> Result<LayerGrads> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::dim("weight", "expected a matrix"));
    };
    let batch = input.rows();
    if grad_out.shape() != [batch, out] {
        return Err(Error::dim(
            "grad_out",
            format!("expected [{batch}, {out}], got {:?}", grad_out.shape()),
        ));
    }
    let mut dw = vec![0.0; out * inp];
    gemm(
        out,
        batch,
        inp,
        grad_out.data(),
        Layout::transposed(out),
        input.data(),
        Layout::row_major(inp),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; out];
    for b in 0..batch {
        for (acc, g) in db.iter_mut().zip(grad_out.row(b)) {
            *acc += g;
        }
    }
    let mut dx = vec![0.0; batch * inp];
    gemm(
        batch,
        out,
        inp,
        grad_out.data(),
        Layout::row_major(out),
        weight.data(),
        Layout::row_major(inp),
        0.0,
        &mut dx,
    );
    Ok(LayerGrads {
        weight: Tensor::new(vec![out, inp], dw)?,
        bias: Tensor::vector(db),
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn check_conv(kernel: &Tensor, bias: &Tensor, input: &Tensor) -> Result<ConvGeometry> {
    let &[out_c, in_c, k, k2] = kernel.shape() else {
        return Err(Error::dim(
            "kernel",
            format!("expected [outC × inC × k × k], got {:?}", kernel.shape()),
        ));
    };
    if k != k2 {
        return Err(Error::dim("kernel", "kernel must be square"));
    }
    if bias.shape() != [out_c] {
        return Err(Error::dim(
            "bias",
            format!("expected [{out_c}], got {:?}", bias.shape()),
        ));
    }
    let &[batch, c, h, w] = input.shape() else {
        return Err(Error::dim(
            "input",
            format!("expected [batch × C × H × W], got {:?}", input.shape()),
        ));
    };
    if c != in_c {
        return Err(Error::dim(
            "input",
            format!("kernel expects {in_c} channels, input has {c}"),
        ));
    }
    if k > h || k > w {
        return Err(Error::dim(
            "kernel",
            format!("{k}×{k} kernel is larger than the {h}×{w} input"),
        ));
    }
    Ok(ConvGeometry {
        batch,
        in_c,
        out_c,
        k,
        h,
        w,
        oh: h - k + 1,
        ow: w - k + 1,
    })
}

/// Fills `cols` (`patch × positions`) with the sliding windows of one sample.
fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    let src = (c * g.h + oy + ky) * g.w + kx;
                    dst[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&sample[src..src + g.ow]);
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto an input-shaped buffer.
fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    let dst = (c * g.h + oy + ky) * g.w + kx;
                    for (d, s) in sample[dst..dst + g.ow]
                        .iter_mut()
                        .zip(&src[oy * g.ow..(oy + 1) * g.ow])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Valid, stride-1 cross-correlation plus bias.
pub fn conv2d_forward(kernel: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let g = check_conv(kernel, bias, input)?;
    let p = g.positions();
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * p;
    let mut cols = vec![0.0; g.patch() * p];
    let mut output = vec![0.0; g.batch * out_len];
    for b in 0..g.batch {
        im2col(&g, &input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let out = &mut output[b * out_len..(b + 1) * out_len];
        for (oc, &bv) in bias.data().iter().enumerate() {
            out[oc * p..(oc + 1) * p].fill(bv);
        }
        gemm(
            g.out_c,
            g.patch(),
            p,
            kernel.data(),
            Layout::row_major(g.patch()),
            &cols,
            Layout::row_major(p),
            1.0,
            out,
        );
    }
    Tensor::new(vec![g.batch, g.out_c, g.oh, g.ow], output)
}

/// Backward pass of [`conv2d_forward`].
pub fn conv2d_backward(kernel: &Tensor, input: &Tensor, grad_out: &Tensor) -> Result<LayerGrads> {
    let out_c = kernel.shape().first().copied().unwrap_or(0);
    let g = check_conv(kernel, &Tensor::zeros(vec![out_c]), input)?;
    if grad_out.shape() != [g.batch, g.out_c, g.oh, g.ow] {
        return Err(Error::dim(
            "grad_out",
            format!(
                "expected {:?}, got {:?}",
                [g.batch, g.out_c, g.oh, g.ow],
                grad_out.shape()
            ),
        ));
    }
    let p = g.positions();
    let r = g.patch();
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * p;
    let mut cols = vec![0.0; r * p];
    let mut dcols = vec![0.0; r * p];
    let mut dk = vec![0.0; g.out_c * r];
    let mut db = vec![0.0; g.out_c];
    let mut dx = vec![0.0; g.batch * in_len];
    for b in 0..g.batch {
        let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
        im2col(&g, &input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            g.out_c,
            p,
            r,
            go,
            Layout::row_major(p),
            &cols,
            Layout::transposed(p),
            1.0,
            &mut dk,
        );
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc += go[oc * p..(oc + 1) * p].iter().sum::<f64>();
        }
        gemm(
            r,
            g.out_c,
            p,
            kernel.data(),
            Layout::transposed(r),
            go,
            Layout::row_major(p),
            0.0,
            &mut dcols,
        );
        col2im(&g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    Ok(LayerGrads {
        weight: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::vector(db),
        input: Tensor::new(input.shape().to_vec(), dx)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Masks `grad_out` by the positive entries of the layer's ReLU output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if !output.same_shape(grad_out) {
        return Err(Error::dim("grad_out", "shape differs from relu output"));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Output of a 2×2 max-pool with the flat input index of each selected maximum.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max-pool. Ties go to the first element in row-major window order.
pub fn maxpool2(input: &Tensor) -> Result<Pooled> {
    let &[batch, c, h, w] = input.shape() else {
        return Err(Error::dim(
            "input",
            format!("expected [batch × C × H × W], got {:?}", input.shape()),
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "input",
            format!("max-pool needs even spatial dims, got {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut output = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                output.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![batch, c, oh, ow], output)?,
        argmax,
    })
}

/// Routes each pooled gradient back to the input element that won its window.
pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("grad_out", "does not match pooled output size"));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let data = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_weights() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = dense_forward(&w, &Tensor::zeros(vec![2]), &x).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_zero_weights_expose_bias() {
        let w = Tensor::zeros(vec![2, 3]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let x = Tensor::from_rows(&[vec![5.0, -1.0, 7.0], vec![0.3, 0.2, 0.1]]).unwrap();
        let y = dense_forward(&w, &b, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn dense_hand_product() {
        // [[1,2],[3,4]] · [1,1] = [3,7]
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = dense_forward(&w, &Tensor::zeros(vec![2]), &x).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_operand() {
        let w = Tensor::zeros(vec![2, 3]);
        let x = Tensor::zeros(vec![1, 4]);
        match dense_forward(&w, &Tensor::zeros(vec![2]), &x) {
            Err(Error::Dimension { operand, .. }) => assert_eq!(operand, "input"),
            other => panic!("unexpected {other:?}"),
        }
        match dense_forward(&w, &Tensor::zeros(vec![3]), &Tensor::zeros(vec![1, 3])) {
            Err(Error::Dimension { operand, .. }) => assert_eq!(operand, "bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![2, 1, 4, 5], &mut rng);
        let k = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&k, &Tensor::zeros(vec![1]), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_kernel_on_constant_image() {
        let c = 0.7;
        let x = Tensor::filled(vec![1, 1, 6, 6], c);
        let k = Tensor::filled(vec![1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&k, &Tensor::zeros(vec![1]), &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for v in y.data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    /// Direct six-loop cross-correlation.
    fn naive_conv(kernel: &Tensor, bias: &Tensor, input: &Tensor) -> Vec<f64> {
        let [oc_n, ic_n, k, _] = kernel.shape().try_into().unwrap();
        let [b_n, _, h, w] = input.shape().try_into().unwrap();
        let (oh, ow) = (h - k + 1, w - k + 1);
        let kd = kernel.data();
        let xd = input.data();
        let mut out = vec![0.0; b_n * oc_n * oh * ow];
        for b in 0..b_n {
            for oc in 0..oc_n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias.data()[oc];
                        for ic in 0..ic_n {
                            for ky in 0..k {
                                for kx in 0..k {
                                    s += kd[((oc * ic_n + ic) * k + ky) * k + kx]
                                        * xd[((b * ic_n + ic) * h + oy + ky) * w + ox + kx];
                                }
                            }
                        }
                        out[((b * oc_n + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![1, 1, 5, 5], &mut rng);
        let k = random(vec![1, 1, 3, 3], &mut rng);
        let b = random(vec![1], &mut rng);
        let y = conv2d_forward(&k, &b, &x).unwrap();
        for (a, e) in y.data().iter().zip(naive_conv(&k, &b, &x)) {
            assert!((a - e).abs() < 1e-12);
        }

        let x = random(vec![3, 2, 7, 6], &mut rng);
        let k = random(vec![4, 2, 3, 3], &mut rng);
        let b = random(vec![4], &mut rng);
        let y = conv2d_forward(&k, &b, &x).unwrap();
        for (a, e) in y.data().iter().zip(naive_conv(&k, &b, &x)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let k = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&k, &Tensor::zeros(vec![1]), &x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(vec![2, 2, 5, 4], &mut rng);
        let k = random(vec![3, 2, 2, 2], &mut rng);
        let b = random(vec![3], &mut rng);
        // loss = Σ r ⊙ conv(x)
        let y = conv2d_forward(&k, &b, &x).unwrap();
        let r = random(y.shape().to_vec(), &mut rng);
        let loss = |k: &Tensor, b: &Tensor, x: &Tensor| -> f64 {
            let y = conv2d_forward(k, b, x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, c)| a * c).sum()
        };
        let grads = conv2d_backward(&k, &x, &r).unwrap();
        let eps = 1e-6;
        let check = |target: &Tensor, analytic: &Tensor, which: usize| {
            for i in 0..target.len() {
                let mut plus = target.clone();
                plus.data_mut()[i] += eps;
                let mut minus = target.clone();
                minus.data_mut()[i] -= eps;
                let (lp, lm) = match which {
                    0 => (loss(&plus, &b, &x), loss(&minus, &b, &x)),
                    1 => (loss(&k, &plus, &x), loss(&k, &minus, &x)),
                    _ => (loss(&k, &b, &plus), loss(&k, &b, &minus)),
                };
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - analytic.data()[i]).abs() < 1e-7, "{which}/{i}: {fd} vs {}", analytic.data()[i]);
            }
        };
        check(&k, &grads.weight, 0);
        check(&b, &grads.bias, 1);
        check(&x, &grads.input, 2);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(vec![3, 4], &mut rng);
        let b = random(vec![3], &mut rng);
        let x = random(vec![2, 4], &mut rng);
        let r = random(vec![2, 3], &mut rng);
        let loss = |w: &Tensor, x: &Tensor| -> f64 {
            let y = dense_forward(w, &b, x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, c)| a * c).sum()
        };
        let g = dense_backward(&w, &x, &r).unwrap();
        let eps = 1e-6;
        for i in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[i] += eps;
            let mut m = w.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - g.weight.data()[i]).abs() < 1e-8);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(&w, &p) - loss(&w, &m)) / (2.0 * eps);
            assert!((fd - g.input.data()[i]).abs() < 1e-8);
        }
        let col_sums: Vec<f64> = (0..3).map(|o| r.data()[o] + r.data()[3 + o]).collect();
        assert_eq!(g.bias.data(), col_sums.as_slice());
    }

    #[test]
    fn relu_cases() {
        let y = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let neg = relu(&Tensor::vector(vec![-3.0, -0.5, -1e-9]));
        assert!(neg.data().iter().all(|&v| v == 0.0));
        let pos = Tensor::vector(vec![0.1, 4.0, 9.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_constant_and_forced() {
        let x = Tensor::filled(vec![1, 2, 4, 4], 3.5);
        let p = maxpool2(&x).unwrap();
        assert_eq!(p.output.shape(), &[1, 2, 2, 2]);
        assert!(p.output.data().iter().all(|&v| v == 3.5));

        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2(&x).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![1, 1, 4, 4], &mut rng);
        let p = maxpool2(&x).unwrap();
        let d = x.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(d[(2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                assert_eq!(p.output.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(matches!(
            maxpool2(&Tensor::zeros(vec![1, 1, 3, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 9.0]).unwrap();
        let p = maxpool2(&x).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 2], vec![10.0, 20.0]).unwrap();
        let dx = maxpool2_backward(x.shape(), &p.argmax, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 20.0]);
    }
}
