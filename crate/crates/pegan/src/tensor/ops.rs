//! Differentiable primitives beyond the convolution pair.
//!
//! All operations validate shapes strictly: nothing broadcasts spatial
//! dimensions silently. Each backward closure routes the output gradient into
//! the parents it captured; parents that do not require a gradient are
//! skipped.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train/eval switch shared by stochastic and statistics-bearing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                a.accumulate_grad(g);
                b.with_grad_mut(|gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                if a.requires_grad() {
                    let bd = b.data();
                    a.with_grad_mut(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bd[i];
                        }
                    });
                }
                if b.requires_grad() {
                    let ad = a.data();
                    b.with_grad_mut(|gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * ad[i];
                        }
                    });
                }
            },
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|a| -a).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for (x, gi) in gp.iter_mut().zip(g) {
                    *x -= gi;
                }
            });
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.accumulate_grad(g);
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for (x, gi) in gp.iter_mut().zip(g) {
                    *x += c * gi;
                }
            });
        })
    }

    pub fn relu(&self) -> Tensor {
        let xs = self.to_vec();
        let data = xs.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    if xs[i] > 0.0 {
                        gp[i] += g[i];
                    }
                }
            });
        })
    }

    /// LReLU; the subgradient at the kink follows the negative branch.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let xs = self.to_vec();
        let data = xs.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    gp[i] += g[i] * if xs[i] > 0.0 { 1.0 } else { slope };
                }
            });
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let ys: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let saved = ys.clone();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), ys, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    gp[i] += g[i] * saved[i] * (1.0 - saved[i]);
                }
            });
        })
    }

    pub fn tanh(&self) -> Tensor {
        let ys: Vec<f64> = self.data().iter().map(|&x| x.tanh()).collect();
        let saved = ys.clone();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), ys, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    gp[i] += g[i] * (1.0 - saved[i] * saved[i]);
                }
            });
        })
    }

    /// |x|, with subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        let xs = self.to_vec();
        let data = xs.iter().map(|x| x.abs()).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    gp[i] += g[i] * xs[i].signum() * if xs[i] == 0.0 { 0.0 } else { 1.0 };
                }
            });
        })
    }

    /// ln(max(x, floor)); gradient is zero where the clamp engages.
    pub fn log_clamped(&self, floor: f64) -> Tensor {
        let xs = self.to_vec();
        let data = xs.iter().map(|&x| x.max(floor).ln()).collect();
        let p = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for i in 0..gp.len() {
                    if xs[i] > floor {
                        gp[i] += g[i] / xs[i];
                    }
                }
            });
        })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                for x in gp.iter_mut() {
                    *x += g[0];
                }
            });
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![s / n], vec![self.clone()], move |g| {
            p.with_grad_mut(|gp| {
                let gi = g[0] / n;
                for x in gp.iter_mut() {
                    *x += gi;
                }
            });
        })
    }

    /// Train mode zeroes each element with probability `p` and rescales
    /// survivors by 1/(1-p); the mask is a pure function of the rng stream.
    /// Eval mode (or p = 0) is exact identity.
    pub fn dropout(&self, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let parent = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for i in 0..gp.len() {
                        gp[i] += g[i] * mask[i];
                    }
                });
            },
        ))
    }

    /// Channel concatenation of two [B,C,H,W] tensors: `self` occupies the
    /// leading channels of the result.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 4 || sb.len() != 4 {
            return Err(Error::Shape(format!(
                "concat_channels expects rank-4 tensors, got {sa:?} and {sb:?}"
            )));
        }
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::Shape(format!(
                "concat_channels batch/spatial mismatch: {sa:?} vs {sb:?}"
            )));
        }
        let (bsz, ca, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let cb = sb[1];
        let plane = h * w;
        let mut data = vec![0.0; bsz * (ca + cb) * plane];
        {
            let ad = self.data();
            let bd = other.data();
            for b in 0..bsz {
                let dst = b * (ca + cb) * plane;
                data[dst..dst + ca * plane]
                    .copy_from_slice(&ad[b * ca * plane..(b + 1) * ca * plane]);
                data[dst + ca * plane..dst + (ca + cb) * plane]
                    .copy_from_slice(&bd[b * cb * plane..(b + 1) * cb * plane]);
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bsz, ca + cb, h, w],
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                pa.with_grad_mut(|ga| {
                    for b in 0..bsz {
                        let src = b * (ca + cb) * plane;
                        for i in 0..ca * plane {
                            ga[b * ca * plane + i] += g[src + i];
                        }
                    }
                });
                pb.with_grad_mut(|gb| {
                    for b in 0..bsz {
                        let src = b * (ca + cb) * plane + ca * plane;
                        for i in 0..cb * plane {
                            gb[b * cb * plane + i] += g[src + i];
                        }
                    }
                });
            },
        ))
    }

    /// The channel slice inverse of [`Tensor::concat_channels`].
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape("slice_channels expects rank 4".into()));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_channels [{start}, {}) out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = vec![0.0; bsz * len * plane];
        {
            let d = self.data();
            for b in 0..bsz {
                let src = (b * c + start) * plane;
                data[b * len * plane..(b + 1) * len * plane]
                    .copy_from_slice(&d[src..src + len * plane]);
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![bsz, len, h, w],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for b in 0..bsz {
                        let dst = (b * c + start) * plane;
                        for i in 0..len * plane {
                            gp[dst + i] += g[b * len * plane + i];
                        }
                    }
                });
            },
        ))
    }

    /// Block-average pooling by an integral factor that must divide both
    /// spatial extents. Factor 1 is exact identity.
    pub fn avg_downsample(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape("avg_downsample expects rank 4".into()));
        }
        if factor == 0 {
            return Err(Error::Shape("avg_downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "avg_downsample factor {factor} does not divide spatial extent {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut data = vec![0.0; bsz * c * oh * ow];
        {
            let d = self.data();
            for bc in 0..bsz * c {
                let src = bc * h * w;
                let dst = bc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for u in 0..factor {
                            let row = src + (i * factor + u) * w + j * factor;
                            for v in 0..factor {
                                acc += d[row + v];
                            }
                        }
                        data[dst + i * ow + j] = acc * inv;
                    }
                }
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![bsz, c, oh, ow],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for bc in 0..bsz * c {
                        let src = bc * h * w;
                        let dst = bc * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gi = g[dst + i * ow + j] * inv;
                                for u in 0..factor {
                                    let row = src + (i * factor + u) * w + j * factor;
                                    for v in 0..factor {
                                        gp[row + v] += gi;
                                    }
                                }
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Affine map: input [B,N] x weight [M,N] + bias [M] -> [B,M].
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (si, sw, sb) = (self.shape(), weight.shape(), bias.shape());
        if si.len() != 2 || sw.len() != 2 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "linear expects input [B,N], weight [M,N], bias [M]; got {si:?}, {sw:?}, {sb:?}"
            )));
        }
        let (bsz, n) = (si[0], si[1]);
        let (m, wn) = (sw[0], sw[1]);
        if wn != n || sb[0] != m {
            return Err(Error::Shape(format!(
                "linear inner-dimension mismatch: input {si:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let mut data = vec![0.0; bsz * m];
        {
            let xd = self.data();
            let wd = weight.data();
            let bd = bias.data();
            for b in 0..bsz {
                let xrow = &xd[b * n..(b + 1) * n];
                for i in 0..m {
                    let wrow = &wd[i * n..(i + 1) * n];
                    let mut acc = bd[i];
                    for k in 0..n {
                        acc += xrow[k] * wrow[k];
                    }
                    data[b * m + i] = acc;
                }
            }
        }
        let (px, pw, pb) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![bsz, m],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            move |g| {
                if px.requires_grad() {
                    let wd = pw.data();
                    px.with_grad_mut(|gx| {
                        for b in 0..bsz {
                            for i in 0..m {
                                let gi = g[b * m + i];
                                let wrow = &wd[i * n..(i + 1) * n];
                                let grow = &mut gx[b * n..(b + 1) * n];
                                for k in 0..n {
                                    grow[k] += gi * wrow[k];
                                }
                            }
                        }
                    });
                }
                if pw.requires_grad() {
                    let xd = px.data();
                    pw.with_grad_mut(|gw| {
                        for b in 0..bsz {
                            let xrow = &xd[b * n..(b + 1) * n];
                            for i in 0..m {
                                let gi = g[b * m + i];
                                let grow = &mut gw[i * n..(i + 1) * n];
                                for k in 0..n {
                                    grow[k] += gi * xrow[k];
                                }
                            }
                        }
                    });
                }
                pb.with_grad_mut(|gb| {
                    for b in 0..bsz {
                        for i in 0..m {
                            gb[i] += g[b * m + i];
                        }
                    }
                });
            },
        ))
    }

    /// 2x2 stride-2 max pooling; both spatial extents must be even.
    pub fn maxpool2x2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape("maxpool2x2 expects rank 4".into()));
        }
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2x2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0usize; bsz * c * oh * ow];
        {
            let d = self.data();
            for bc in 0..bsz * c {
                let src = bc * h * w;
                let dst = bc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for u in 0..2 {
                            for v in 0..2 {
                                let idx = src + (2 * i + u) * w + 2 * j + v;
                                if d[idx] > best {
                                    best = d[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        data[dst + i * ow + j] = best;
                        argmax[dst + i * ow + j] = best_idx;
                    }
                }
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![bsz, c, oh, ow],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gp[src] += g[o];
                    }
                });
            },
        ))
    }

    /// Reinterprets the buffer under a new shape with identical element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {new_shape:?} changes element count",
                self.shape()
            )));
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |g| {
                parent.accumulate_grad(g);
            },
        ))
    }

    /// Column slice of a [B,M] tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape("slice_cols expects rank 2".into()));
        }
        let (bsz, m) = (s[0], s[1]);
        if start + len > m {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) out of {m} columns",
                start + len
            )));
        }
        let mut data = vec![0.0; bsz * len];
        {
            let d = self.data();
            for b in 0..bsz {
                data[b * len..(b + 1) * len]
                    .copy_from_slice(&d[b * m + start..b * m + start + len]);
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![bsz, len],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for b in 0..bsz {
                        for j in 0..len {
                            gp[b * m + start + j] += g[b * len + j];
                        }
                    }
                });
            },
        ))
    }

    /// Row gather from a table [N,E]: one row per id, giving [len(ids), E].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape("gather_rows expects rank 2".into()));
        }
        let (n, e) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Lookup(format!("row id {bad} out of range 0..{n}")));
        }
        let mut data = vec![0.0; ids.len() * e];
        {
            let d = self.data();
            for (k, &i) in ids.iter().enumerate() {
                data[k * e..(k + 1) * e].copy_from_slice(&d[i * e..(i + 1) * e]);
            }
        }
        let ids = ids.to_vec();
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![ids.len(), e],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for (k, &i) in ids.iter().enumerate() {
                        for j in 0..e {
                            gp[i * e + j] += g[k * e + j];
                        }
                    }
                });
            },
        ))
    }

    /// Replicates a [B,C] tensor over an HxW grid, giving [B,C,H,W].
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape("broadcast_spatial expects rank 2".into()));
        }
        let (bsz, c) = (s[0], s[1]);
        let plane = h * w;
        let mut data = vec![0.0; bsz * c * plane];
        {
            let d = self.data();
            for bc in 0..bsz * c {
                data[bc * plane..(bc + 1) * plane].fill(d[bc]);
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![bsz, c, h, w],
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for bc in 0..gp.len() {
                        gp[bc] += g[bc * plane..(bc + 1) * plane].iter().sum::<f64>();
                    }
                });
            },
        ))
    }

    /// Elementwise sigmoid cross entropy against constant targets, computed
    /// in the numerically stable logit form. Returns per-element losses.
    pub fn sigmoid_bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::Shape(format!(
                "sigmoid_bce_with_logits: {} targets for shape {:?}",
                targets.len(),
                self.shape()
            )));
        }
        let xs = self.to_vec();
        let data = xs
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let targets = targets.to_vec();
        let parent = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    for i in 0..gp.len() {
                        let sig = 1.0 / (1.0 + (-xs[i]).exp());
                        gp[i] += g[i] * (sig - targets[i]);
                    }
                });
            },
        ))
    }

    /// Mean softmax cross entropy of [B,C] logits against one class index per
    /// row.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape("softmax_cross_entropy expects rank 2".into()));
        }
        let (bsz, c) = (s[0], s[1]);
        if targets.len() != bsz {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} targets for batch {bsz}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Lookup(format!("class {bad} out of range 0..{c}")));
        }
        let xs = self.to_vec();
        let mut softmax = vec![0.0; bsz * c];
        let mut loss = 0.0;
        for b in 0..bsz {
            let row = &xs[b * c..(b + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            loss += lse - row[targets[b]];
            for j in 0..c {
                softmax[b * c + j] = (row[j] - m).exp() / z;
            }
        }
        loss /= bsz as f64;
        let targets = targets.to_vec();
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            move |g| {
                parent.with_grad_mut(|gp| {
                    let scale = g[0] / bsz as f64;
                    for b in 0..bsz {
                        for j in 0..c {
                            let ind = if j == targets[b] { 1.0 } else { 0.0 };
                            gp[b * c + j] += scale * (softmax[b * c + j] - ind);
                        }
                    }
                });
            },
        ))
    }
}

/// Batch normalization over a [B,C,H,W] tensor.
///
/// Train mode normalizes each channel with the batch statistics (biased
/// variance), applies the affine transform, and folds the batch statistics
/// into `running` with the given momentum (unbiased variance, matching the
/// usual running-stats convention). Eval mode normalizes with `running` and
/// leaves it untouched.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    running: &mut RunningStats,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape("batchnorm2d expects rank 4".into()));
    }
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm2d affine params must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm2d running stats must have {c} channels"
        )));
    }
    let n = bsz * h * w;
    let plane = h * w;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Numeric(format!(
                    "degenerate statistics: batchnorm2d train mode with per-channel population {n}"
                )));
            }
            let d = input.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..bsz {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        acc += d[base + i];
                    }
                }
                let mu = acc / n as f64;
                let mut vacc = 0.0;
                for b in 0..bsz {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        let dx = d[base + i] - mu;
                        vacc += dx * dx;
                    }
                }
                mean[ch] = mu;
                var[ch] = vacc / n as f64;
            }
            drop(d);
            let unbias = n as f64 / (n as f64 - 1.0);
            for ch in 0..c {
                running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean[ch];
                running.var[ch] =
                    (1.0 - momentum) * running.var[ch] + momentum * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (running.mean.clone(), running.var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; bsz * c * plane];
    let mut data = vec![0.0; bsz * c * plane];
    {
        let d = input.data();
        let gd = gamma.data();
        let bd = beta.data();
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in 0..plane {
                    let xh = (d[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = xh;
                    data[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }
    }

    let (pi, pg, pb) = (input.clone(), gamma.clone(), beta.clone());
    let train = mode == Mode::Train;
    Ok(Tensor::from_op(
        s.to_vec(),
        data,
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let gd = pg.data();
            // Per-channel reductions of the output gradient.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        sum_g[ch] += g[base + i];
                        sum_gx[ch] += g[base + i] * xhat[base + i];
                    }
                }
            }
            if pi.requires_grad() {
                pi.with_grad_mut(|gp| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = gd[ch] * inv_std[ch];
                            if train {
                                let mg = sum_g[ch] / n as f64;
                                let mgx = sum_gx[ch] / n as f64;
                                for i in 0..plane {
                                    gp[base + i] +=
                                        k * (g[base + i] - mg - xhat[base + i] * mgx);
                                }
                            } else {
                                for i in 0..plane {
                                    gp[base + i] += k * g[base + i];
                                }
                            }
                        }
                    }
                });
            }
            drop(gd);
            pg.with_grad_mut(|gg| {
                for ch in 0..c {
                    gg[ch] += sum_gx[ch];
                }
            });
            pb.with_grad_mut(|gb| {
                for ch in 0..c {
                    gb[ch] += sum_g[ch];
                }
            });
        },
    ))
}
