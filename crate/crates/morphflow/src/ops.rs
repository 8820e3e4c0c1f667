//! Differentiable building blocks for the registration network: n-D
//! convolution (stride 1 or 2), leaky rectifier, nearest-neighbor ×2
//! upsampling, channel concatenation — each with an exact backward pass —
//! plus a finite-difference gradient checker.
//!
//! Convolutions use "same" zero padding. Stride 2 produces ⌈dim/2⌉ per axis
//! with output position `j` reading the input window centered at `2j`, so
//! even dims halve exactly. Inner loops run along the contiguous last axis so
//! the compiler can vectorize them.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{num_voxels, strides, Real};
use rand::Rng as _;

/// Channel-major activation grid: `data[c * nvox + i]` with spatial index `i`
/// in canonical slowest-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

impl Tensor {
    pub fn new(channels: usize, shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert_eq!(
            channels * num_voxels(&shape),
            data.len(),
            "data length must be channels * voxel count"
        );
        Tensor { channels, shape, data }
    }

    pub fn zeros(channels: usize, shape: &[usize]) -> Self {
        Tensor {
            channels,
            shape: shape.to_vec(),
            data: vec![0.0; channels * num_voxels(shape)],
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn num_spatial(&self) -> usize {
        num_voxels(&self.shape)
    }

    pub fn channel(&self, c: usize) -> &[Real] {
        let n = self.num_spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One convolution layer's parameters. Weights are laid out
/// `[out_channel][in_channel][spatial extent...]` row-major; one bias per
/// output channel. Extents must be odd so "same" padding centers cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub extent: Vec<usize>,
    pub weights: Vec<Real>,
    pub bias: Vec<Real>,
}

impl ConvKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        extent: Vec<usize>,
        weights: Vec<Real>,
        bias: Vec<Real>,
    ) -> Self {
        assert!(extent.iter().all(|&e| e % 2 == 1), "kernel extents must be odd");
        assert_eq!(
            weights.len(),
            out_channels * in_channels * num_voxels(&extent),
            "weight count must be out * in * extent product"
        );
        assert_eq!(bias.len(), out_channels, "one bias per output channel");
        ConvKernel {
            out_channels,
            in_channels,
            extent,
            weights,
            bias,
        }
    }

    pub fn zeros(out_channels: usize, in_channels: usize, extent: &[usize]) -> Self {
        ConvKernel::new(
            out_channels,
            in_channels,
            extent.to_vec(),
            vec![0.0; out_channels * in_channels * num_voxels(extent)],
            vec![0.0; out_channels],
        )
    }

    /// weights.len() + bias.len()
    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn conv_out_shape(shape: &[usize], stride: usize) -> Vec<usize> {
    match stride {
        1 => shape.to_vec(),
        2 => shape.iter().map(|&d| d.div_ceil(2)).collect(),
        _ => panic!("stride must be 1 or 2"),
    }
}

/// Inclusive-exclusive range of output positions `j` along one axis for which
/// `stride*j + dt` lands inside `[0, in_dim)`.
fn valid_out_range(out_dim: usize, in_dim: usize, stride: usize, dt: isize) -> (usize, usize) {
    let lo = if dt >= 0 {
        0
    } else {
        ((-dt) as usize).div_ceil(stride)
    };
    let hi_in = in_dim as isize - dt; // exclusive bound on stride*j
    if hi_in <= 0 {
        return (0, 0);
    }
    let hi = ((hi_in as usize).div_ceil(stride)).min(out_dim);
    (lo.min(hi), hi)
}

fn check_conv_shapes(x: &Tensor, k: &ConvKernel) -> Result<()> {
    if x.channels != k.in_channels {
        return Err(Error::shape_mismatch(
            "conv channels",
            &[x.channels],
            &[k.in_channels],
        ));
    }
    if x.rank() != k.extent.len() {
        return Err(Error::shape_mismatch("conv rank", &x.shape, &k.extent));
    }
    Ok(())
}

/// Cross-correlate `x` with `k` and add the bias ("same" zero padding).
pub fn conv_forward(x: &Tensor, k: &ConvKernel, stride: usize) -> Result<Tensor> {
    check_conv_shapes(x, k)?;
    assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
    let rank = x.rank();
    let out_shape = conv_out_shape(&x.shape, stride);
    let in_vox = x.num_spatial();
    let out_vox = num_voxels(&out_shape);
    let in_strides = strides(&x.shape);
    let out_strides = strides(&out_shape);
    let k_vox = num_voxels(&k.extent);
    let half: Vec<isize> = k.extent.iter().map(|&e| (e / 2) as isize).collect();

    // Row iteration covers every axis but the (contiguous) last one.
    let row_shape = &out_shape[..rank - 1];
    let last_out = out_shape[rank - 1];
    let last_in = x.shape[rank - 1];

    let mut out = vec![0.0 as Real; k.out_channels * out_vox];
    let mut t = vec![0usize; rank];
    let mut row = vec![0usize; rank.saturating_sub(1)];

    for co in 0..k.out_channels {
        let out_chan = &mut out[co * out_vox..(co + 1) * out_vox];
        out_chan.fill(k.bias[co]);
        for ci in 0..k.in_channels {
            let x_chan = &x.data[ci * in_vox..(ci + 1) * in_vox];
            let w_base = (co * k.in_channels + ci) * k_vox;
            t.fill(0);
            for ti in 0..k_vox {
                let kw = k.weights[w_base + ti];
                let dt_last = t[rank - 1] as isize - half[rank - 1];
                let (j0, j1) = valid_out_range(last_out, last_in, stride, dt_last);
                if kw != 0.0 && j0 < j1 {
                    row.fill(0);
                    'rows: loop {
                        let mut o_base = 0usize;
                        let mut x_base = 0isize;
                        for d in 0..rank - 1 {
                            let src = (stride * row[d]) as isize + t[d] as isize - half[d];
                            if src < 0 || src >= x.shape[d] as isize {
                                if !crate::next_index(&mut row, row_shape) {
                                    break 'rows;
                                }
                                continue 'rows;
                            }
                            o_base += row[d] * out_strides[d];
                            x_base += src * in_strides[d] as isize;
                        }
                        let out_row = &mut out_chan[o_base + j0..o_base + j1];
                        if stride == 1 {
                            let s = (x_base + j0 as isize + dt_last) as usize;
                            let x_row = &x_chan[s..s + (j1 - j0)];
                            for (o, xv) in out_row.iter_mut().zip(x_row) {
                                *o += kw * xv;
                            }
                        } else {
                            let base = x_base + dt_last;
                            for (j, o) in (j0..j1).zip(out_row.iter_mut()) {
                                *o += kw * x_chan[(base + 2 * j as isize) as usize];
                            }
                        }
                        if !crate::next_index(&mut row, row_shape) {
                            break;
                        }
                    }
                }
                crate::next_index(&mut t, &k.extent);
            }
        }
    }
    Ok(Tensor {
        channels: k.out_channels,
        shape: out_shape,
        data: out,
    })
}

/// Gradients of `⟨upstream, conv_forward(x, k, stride)⟩` with respect to the
/// input and the parameters. The returned kernel holds the weight and bias
/// gradients in the same layout as `k`.
pub fn conv_backward(
    x: &Tensor,
    k: &ConvKernel,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, ConvKernel)> {
    check_conv_shapes(x, k)?;
    assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
    let out_shape = conv_out_shape(&x.shape, stride);
    if upstream.channels != k.out_channels || upstream.shape != out_shape {
        return Err(Error::shape_mismatch(
            "conv upstream",
            &upstream.shape,
            &out_shape,
        ));
    }
    let rank = x.rank();
    let in_vox = x.num_spatial();
    let out_vox = num_voxels(&out_shape);
    let in_strides = strides(&x.shape);
    let out_strides = strides(&out_shape);
    let k_vox = num_voxels(&k.extent);
    let half: Vec<isize> = k.extent.iter().map(|&e| (e / 2) as isize).collect();
    let row_shape = &out_shape[..rank - 1];
    let last_out = out_shape[rank - 1];
    let last_in = x.shape[rank - 1];

    let mut grad_x = vec![0.0 as Real; x.data.len()];
    let mut grad_w = vec![0.0 as Real; k.weights.len()];
    let mut grad_b = vec![0.0 as Real; k.out_channels];

    let mut t = vec![0usize; rank];
    let mut row = vec![0usize; rank.saturating_sub(1)];

    for (co, gb) in grad_b.iter_mut().enumerate() {
        *gb = upstream.data[co * out_vox..(co + 1) * out_vox].iter().sum();
    }
    for co in 0..k.out_channels {
        let up_chan = &upstream.data[co * out_vox..(co + 1) * out_vox];
        for ci in 0..k.in_channels {
            let x_chan = &x.data[ci * in_vox..(ci + 1) * in_vox];
            let gx_chan = &mut grad_x[ci * in_vox..(ci + 1) * in_vox];
            let w_base = (co * k.in_channels + ci) * k_vox;
            t.fill(0);
            for ti in 0..k_vox {
                let kw = k.weights[w_base + ti];
                let dt_last = t[rank - 1] as isize - half[rank - 1];
                let (j0, j1) = valid_out_range(last_out, last_in, stride, dt_last);
                if j0 < j1 {
                    let mut gw_acc = 0.0 as Real;
                    row.fill(0);
                    'rows: loop {
                        let mut o_base = 0usize;
                        let mut x_base = 0isize;
                        for d in 0..rank - 1 {
                            let src = (stride * row[d]) as isize + t[d] as isize - half[d];
                            if src < 0 || src >= x.shape[d] as isize {
                                if !crate::next_index(&mut row, row_shape) {
                                    break 'rows;
                                }
                                continue 'rows;
                            }
                            o_base += row[d] * out_strides[d];
                            x_base += src * in_strides[d] as isize;
                        }
                        let up_row = &up_chan[o_base + j0..o_base + j1];
                        if stride == 1 {
                            let s = (x_base + j0 as isize + dt_last) as usize;
                            let x_row = &x_chan[s..s + (j1 - j0)];
                            let gx_row = &mut gx_chan[s..s + (j1 - j0)];
                            let mut dot = 0.0;
                            for ((u, xv), g) in up_row.iter().zip(x_row).zip(gx_row.iter_mut()) {
                                dot += u * xv;
                                *g += kw * u;
                            }
                            gw_acc += dot;
                        } else {
                            let base = x_base + dt_last;
                            for (j, u) in (j0..j1).zip(up_row) {
                                let s = (base + 2 * j as isize) as usize;
                                gw_acc += u * x_chan[s];
                                gx_chan[s] += kw * u;
                            }
                        }
                        if !crate::next_index(&mut row, row_shape) {
                            break;
                        }
                    }
                    grad_w[w_base + ti] = gw_acc;
                }
                crate::next_index(&mut t, &k.extent);
            }
        }
    }
    let grad_x = Tensor {
        channels: x.channels,
        shape: x.shape.clone(),
        data: grad_x,
    };
    let grad_k = ConvKernel {
        out_channels: k.out_channels,
        in_channels: k.in_channels,
        extent: k.extent.clone(),
        weights: grad_w,
        bias: grad_b,
    };
    Ok((grad_x, grad_k))
}

/// y = x for x ≥ 0, slope·x otherwise.
pub fn leaky_relu_forward(x: &Tensor, slope: Real) -> Tensor {
    assert!(slope > 0.0 && slope < 1.0, "slope must lie in (0, 1)");
    Tensor {
        channels: x.channels,
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect(),
    }
}

/// Scales upstream by 1 where x ≥ 0 and by `slope` elsewhere.
pub fn leaky_relu_backward(x: &Tensor, slope: Real, upstream: &Tensor) -> Tensor {
    assert_eq!(x.data.len(), upstream.data.len(), "shapes must match");
    Tensor {
        channels: x.channels,
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&v, &u)| if v >= 0.0 { u } else { slope * u })
            .collect(),
    }
}

/// Replicate each voxel 2× along every spatial axis.
pub fn upsample_nearest(x: &Tensor) -> Tensor {
    let out_shape: Vec<usize> = x.shape.iter().map(|&d| d * 2).collect();
    let out_vox = num_voxels(&out_shape);
    let in_strides = strides(&x.shape);
    let out_strides = strides(&out_shape);
    let rank = x.rank();
    let mut data = vec![0.0 as Real; x.channels * out_vox];
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut data[c * out_vox..(c + 1) * out_vox];
        let mut idx = vec![0usize; rank];
        for d in dst.iter_mut() {
            let mut lin = 0usize;
            for a in 0..rank {
                lin += (idx[a] / 2) * in_strides[a];
            }
            let _ = out_strides; // linear write order follows the odometer
            *d = src[lin];
            crate::next_index(&mut idx, &out_shape);
        }
    }
    Tensor {
        channels: x.channels,
        shape: out_shape,
        data,
    }
}

/// Backward of [`upsample_nearest`]: sums upstream over each 2^n block.
pub fn upsample_nearest_backward(upstream: &Tensor) -> Tensor {
    assert!(
        upstream.shape.iter().all(|&d| d % 2 == 0),
        "upstream dims must be even"
    );
    let out_shape: Vec<usize> = upstream.shape.iter().map(|&d| d / 2).collect();
    let out_vox = num_voxels(&out_shape);
    let out_strides = strides(&out_shape);
    let rank = upstream.rank();
    let up_vox = upstream.num_spatial();
    let mut data = vec![0.0 as Real; upstream.channels * out_vox];
    for c in 0..upstream.channels {
        let src = &upstream.data[c * up_vox..(c + 1) * up_vox];
        let dst = &mut data[c * out_vox..(c + 1) * out_vox];
        let mut idx = vec![0usize; rank];
        for s in src {
            let mut lin = 0usize;
            for a in 0..rank {
                lin += (idx[a] / 2) * out_strides[a];
            }
            dst[lin] += s;
            crate::next_index(&mut idx, &upstream.shape);
        }
    }
    Tensor {
        channels: upstream.channels,
        shape: out_shape,
        data,
    }
}

/// Stack `a`'s channels before `b`'s. Spatial shapes must match.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape_mismatch("concat_channels", &a.shape, &b.shape));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        channels: a.channels + b.channels,
        shape: a.shape.clone(),
        data,
    })
}

/// Backward of [`concat_channels`]: split upstream back into the two parts.
pub fn split_channels(x: &Tensor, a_channels: usize) -> (Tensor, Tensor) {
    assert!(a_channels <= x.channels, "split point exceeds channel count");
    let n = x.num_spatial();
    let a = Tensor {
        channels: a_channels,
        shape: x.shape.clone(),
        data: x.data[..a_channels * n].to_vec(),
    };
    let b = Tensor {
        channels: x.channels - a_channels,
        shape: x.shape.clone(),
        data: x.data[a_channels * n..].to_vec(),
    };
    (a, b)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    pub trials: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: Real) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Central-difference directional derivative of `f` at `x` along `dir`.
pub fn directional_derivative<F: FnMut(&[Real]) -> Real>(
    mut f: F,
    x: &[Real],
    dir: &[Real],
    step: Real,
) -> Real {
    let plus: Vec<Real> = x.iter().zip(dir).map(|(&v, &d)| v + step * d).collect();
    let minus: Vec<Real> = x.iter().zip(dir).map(|(&v, &d)| v - step * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Compare `analytic_grad` of the scalar function `f` at `x` against central
/// differences along `trials` random unit directions. Relative error uses the
/// larger of the two derivative magnitudes as denominator, floored to dodge
/// 0/0 blowups.
pub fn finite_diff_check<F: FnMut(&[Real]) -> Real>(
    mut f: F,
    x: &[Real],
    analytic_grad: &[Real],
    step: Real,
    trials: usize,
    rng: &mut Rng,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic_grad.len(), "gradient length must match x");
    let mut max_rel_err = 0.0 as Real;
    for _ in 0..trials {
        let mut dir: Vec<Real> = (0..x.len())
            .map(|_| rng.random_range(-1.0..1.0) as Real)
            .collect();
        let norm = dir.iter().map(|d| d * d).sum::<Real>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for d in dir.iter_mut() {
            *d /= norm;
        }
        let analytic: Real = analytic_grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let numeric = directional_derivative(&mut f, x, &dir, step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-10);
        max_rel_err = max_rel_err.max((analytic - numeric).abs() / denom);
    }
    GradCheckReport {
        max_rel_err,
        trials,
    }
}
