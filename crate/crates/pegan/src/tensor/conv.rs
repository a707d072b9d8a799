//! Strided cross-correlation and its transpose.
//!
//! Convolution here is cross-correlation (no kernel flip), the usual
//! deep-learning convention; the brute-force oracles in the tests follow the
//! same convention. Kernel layouts:
//!
//! - `conv2d`: kernel `[Cout, Cin, kh, kw]`
//! - `conv2d_transpose`: kernel `[Cin, Cout, kh, kw]`
//!
//! so that `conv2d_transpose(y, k)` with the *same* kernel array is the exact
//! adjoint of `conv2d(x, k)`: for all compatible x, y,
//! `<conv2d(x,k), y> == <x, conv2d_transpose(y,k)>`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Copies [B,C,H,W] data into a zero-padded [B,C,H+2p,W+2p] buffer.
fn pad_input(d: &[f64], bsz: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; bsz * c * ph * pw];
    for bc in 0..bsz * c {
        for i in 0..h {
            let src = bc * h * w + i * w;
            let dst = bc * ph * pw + (i + p) * pw + p;
            out[dst..dst + w].copy_from_slice(&d[src..src + w]);
        }
    }
    out
}

impl Tensor {
    /// Strided 2-d cross-correlation with zero padding.
    ///
    /// input [B,Cin,H,W] * kernel [Cout,Cin,kh,kw] + bias [Cout]
    /// -> [B,Cout,H',W'] with H' = floor((H + 2p - kh)/stride) + 1.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (si, sk, sb) = (self.shape(), kernel.shape(), bias.shape());
        if si.len() != 4 || sk.len() != 4 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects input rank 4, kernel rank 4, bias rank 1; got {si:?}, {sk:?}, {sb:?}"
            )));
        }
        let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kcin, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin {
            return Err(Error::Config(format!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if sb[0] != cout {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{cout}], got {sb:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d window {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;

        let xpad = pad_input(&self.data(), bsz, cin, h, w, padding);
        let mut out = vec![0.0; bsz * cout * oh * ow];
        {
            let kd = kernel.data();
            let bd = bias.data();
            for b in 0..bsz {
                for co in 0..cout {
                    let oplane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    oplane.fill(bd[co]);
                    for ci in 0..cin {
                        let xplane = &xpad[(b * cin + ci) * ph * pw..(b * cin + ci + 1) * ph * pw];
                        for u in 0..kh {
                            let krow = &kd[((co * cin + ci) * kh + u) * kw..((co * cin + ci) * kh + u + 1) * kw];
                            for i in 0..oh {
                                let xrow = &xplane[(i * stride + u) * pw..(i * stride + u + 1) * pw];
                                let orow = &mut oplane[i * ow..(i + 1) * ow];
                                for j in 0..ow {
                                    let base = j * stride;
                                    let mut acc = 0.0;
                                    for v in 0..kw {
                                        acc += xrow[base + v] * krow[v];
                                    }
                                    orow[j] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }

        let (px, pk, pb) = (self.clone(), kernel.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![bsz, cout, oh, ow],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                let kd = pk.data();
                let xpad = pad_input(&px.data(), bsz, cin, h, w, padding);

                pb.with_grad_mut(|gb| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            gb[co] += g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });

                pk.with_grad_mut(|gk| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            let gplane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                            for ci in 0..cin {
                                let xplane =
                                    &xpad[(b * cin + ci) * ph * pw..(b * cin + ci + 1) * ph * pw];
                                for u in 0..kh {
                                    let grow_k = &mut gk[((co * cin + ci) * kh + u) * kw
                                        ..((co * cin + ci) * kh + u + 1) * kw];
                                    for i in 0..oh {
                                        let xrow =
                                            &xplane[(i * stride + u) * pw..(i * stride + u + 1) * pw];
                                        let grow = &gplane[i * ow..(i + 1) * ow];
                                        for j in 0..ow {
                                            let gv = grow[j];
                                            let base = j * stride;
                                            for v in 0..kw {
                                                grow_k[v] += gv * xrow[base + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });

                if px.requires_grad() {
                    let mut gxpad = vec![0.0; bsz * cin * ph * pw];
                    for b in 0..bsz {
                        for co in 0..cout {
                            let gplane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                            for ci in 0..cin {
                                let gxplane = &mut gxpad
                                    [(b * cin + ci) * ph * pw..(b * cin + ci + 1) * ph * pw];
                                for u in 0..kh {
                                    let krow = &kd[((co * cin + ci) * kh + u) * kw
                                        ..((co * cin + ci) * kh + u + 1) * kw];
                                    for i in 0..oh {
                                        let gxrow = &mut gxplane
                                            [(i * stride + u) * pw..(i * stride + u + 1) * pw];
                                        let grow = &gplane[i * ow..(i + 1) * ow];
                                        for j in 0..ow {
                                            let gv = grow[j];
                                            let base = j * stride;
                                            for v in 0..kw {
                                                gxrow[base + v] += gv * krow[v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    px.with_grad_mut(|gx| {
                        for bc in 0..bsz * cin {
                            for i in 0..h {
                                let src = bc * ph * pw + (i + padding) * pw + padding;
                                let dst = bc * h * w + i * w;
                                for j in 0..w {
                                    gx[dst + j] += gxpad[src + j];
                                }
                            }
                        }
                    });
                }
            },
        ))
    }

    /// Transposed strided cross-correlation (fractionally strided upsampling).
    ///
    /// input [B,Cin,H,W] * kernel [Cin,Cout,kh,kw] + bias [Cout]
    /// -> [B,Cout,H',W'] with H' = (H-1)*stride - 2p + kh + output_padding.
    ///
    /// `output_padding` resolves the output-size ambiguity of strided
    /// convolution and must be < stride. The stride-2, 5x5, pad-2,
    /// output-padding-1 configuration doubles the spatial extent exactly.
    pub fn conv2d_transpose(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let (si, sk, sb) = (self.shape(), kernel.shape(), bias.shape());
        if si.len() != 4 || sk.len() != 4 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d_transpose expects input rank 4, kernel rank 4, bias rank 1; got {si:?}, {sk:?}, {sb:?}"
            )));
        }
        let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (kcin, cout, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin {
            return Err(Error::Config(format!(
                "conv2d_transpose channel mismatch: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if sb[0] != cout {
            return Err(Error::Shape(format!(
                "conv2d_transpose bias must be [{cout}], got {sb:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d_transpose stride must be >= 1".into()));
        }
        if output_padding >= stride {
            return Err(Error::Config(format!(
                "conv2d_transpose output_padding {output_padding} must be < stride {stride} \
                 (output size otherwise ambiguous)"
            )));
        }
        // Scatter extent before cropping: every input pixel lands in-bounds.
        let sh = (h - 1) * stride + kh;
        let sw = (w - 1) * stride + kw;
        let oh = (sh + output_padding).checked_sub(2 * padding).filter(|&v| v >= 1);
        let ow = (sw + output_padding).checked_sub(2 * padding).filter(|&v| v >= 1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d_transpose output would be empty for input {h}x{w}, kernel {kh}x{kw}, \
                     stride {stride}, padding {padding}"
                )))
            }
        };

        let scatter = |x: &[f64], k: &[f64]| -> Vec<f64> {
            let mut buf = vec![0.0; bsz * cout * sh * sw];
            for b in 0..bsz {
                for ci in 0..cin {
                    let xplane = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    for co in 0..cout {
                        let oplane =
                            &mut buf[(b * cout + co) * sh * sw..(b * cout + co + 1) * sh * sw];
                        for u in 0..kh {
                            let krow = &k[((ci * cout + co) * kh + u) * kw
                                ..((ci * cout + co) * kh + u + 1) * kw];
                            for i in 0..h {
                                let xrow = &xplane[i * w..(i + 1) * w];
                                let orow = &mut oplane[(i * stride + u) * sw..(i * stride + u + 1) * sw];
                                for j in 0..w {
                                    let xv = xrow[j];
                                    let base = j * stride;
                                    for v in 0..kw {
                                        orow[base + v] += xv * krow[v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            buf
        };

        let full = scatter(&self.data(), &kernel.data());
        let mut out = vec![0.0; bsz * cout * oh * ow];
        {
            let bd = bias.data();
            for b in 0..bsz {
                for co in 0..cout {
                    let oplane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    oplane.fill(bd[co]);
                    let fplane = &full[(b * cout + co) * sh * sw..(b * cout + co + 1) * sh * sw];
                    for i in 0..oh {
                        let fi = i + padding;
                        if fi >= sh {
                            continue;
                        }
                        for j in 0..ow {
                            let fj = j + padding;
                            if fj >= sw {
                                continue;
                            }
                            oplane[i * ow + j] += fplane[fi * sw + fj];
                        }
                    }
                }
            }
        }

        let (px, pk, pb) = (self.clone(), kernel.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![bsz, cout, oh, ow],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                pb.with_grad_mut(|gb| {
                    for b in 0..bsz {
                        for co in 0..cout {
                            gb[co] += g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });

                // Re-embed the output gradient at the scatter coordinates;
                // positions cropped away (or added by output_padding) carry 0.
                let mut gfull = vec![0.0; bsz * cout * sh * sw];
                for b in 0..bsz {
                    for co in 0..cout {
                        let gplane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                        let fplane =
                            &mut gfull[(b * cout + co) * sh * sw..(b * cout + co + 1) * sh * sw];
                        for i in 0..oh {
                            let fi = i + padding;
                            if fi >= sh {
                                continue;
                            }
                            for j in 0..ow {
                                let fj = j + padding;
                                if fj >= sw {
                                    continue;
                                }
                                fplane[fi * sw + fj] = gplane[i * ow + j];
                            }
                        }
                    }
                }

                if px.requires_grad() {
                    let kd = pk.data();
                    px.with_grad_mut(|gx| {
                        for b in 0..bsz {
                            for ci in 0..cin {
                                let gxplane =
                                    &mut gx[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                                for co in 0..cout {
                                    let fplane = &gfull
                                        [(b * cout + co) * sh * sw..(b * cout + co + 1) * sh * sw];
                                    for u in 0..kh {
                                        let krow = &kd[((ci * cout + co) * kh + u) * kw
                                            ..((ci * cout + co) * kh + u + 1) * kw];
                                        for i in 0..h {
                                            let frow = &fplane[(i * stride + u) * sw
                                                ..(i * stride + u + 1) * sw];
                                            let gxrow = &mut gxplane[i * w..(i + 1) * w];
                                            for j in 0..w {
                                                let base = j * stride;
                                                let mut acc = 0.0;
                                                for v in 0..kw {
                                                    acc += frow[base + v] * krow[v];
                                                }
                                                gxrow[j] += acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }

                if pk.requires_grad() {
                    let xd = px.data();
                    pk.with_grad_mut(|gk| {
                        for b in 0..bsz {
                            for ci in 0..cin {
                                let xplane =
                                    &xd[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                                for co in 0..cout {
                                    let fplane = &gfull
                                        [(b * cout + co) * sh * sw..(b * cout + co + 1) * sh * sw];
                                    for u in 0..kh {
                                        let grow_k = &mut gk[((ci * cout + co) * kh + u) * kw
                                            ..((ci * cout + co) * kh + u + 1) * kw];
                                        for i in 0..h {
                                            let xrow = &xplane[i * w..(i + 1) * w];
                                            let frow = &fplane[(i * stride + u) * sw
                                                ..(i * stride + u + 1) * sw];
                                            for j in 0..w {
                                                let xv = xrow[j];
                                                let base = j * stride;
                                                for v in 0..kw {
                                                    grow_k[v] += xv * frow[base + v];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            },
        ))
    }
}
