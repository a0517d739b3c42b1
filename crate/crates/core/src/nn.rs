//! Minimal fully-convolutional engine with hand-written backpropagation.
//!
//! Supports exactly what the detector needs: 3x3 / 1x1 convolutions with
//! stride 1 or 2, relu / softplus, nearest-neighbor x2 upsampling and
//! elementwise addition, assembled into a small two-scale top-down fusion
//! network. Generic over the float type: training runs in f32, gradient
//! verification in f64.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Float scalar the engine is generic over.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum<Self>
    + Send
    + Sync
    + std::fmt::Debug
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline(always)]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Channel-major (CHW) dense tensor.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_hw(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { c: 1, h, w, data }
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Softplus,
}

fn pad_input<T: Real>(input: &Tensor<T>, p: usize) -> (Vec<T>, usize, usize) {
    let (h, w) = (input.h, input.w);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = vec![T::zero(); input.c * ph * pw];
    for c in 0..input.c {
        let src_ch = input.channel(c);
        for y in 0..h {
            padded[(c * ph + y + p) * pw + p..(c * ph + y + p) * pw + p + w]
                .copy_from_slice(&src_ch[y * w..(y + 1) * w]);
        }
    }
    (padded, ph, pw)
}

pub fn conv_forward<T: Real>(input: &Tensor<T>, weights: &[T], bias: &[T], sh: &ConvShape) -> Tensor<T> {
    debug_assert_eq!(input.c, sh.in_c);
    debug_assert_eq!(weights.len(), sh.weight_len());
    let (oh, ow) = sh.out_hw(input.h, input.w);
    let mut out = Tensor::zeros(sh.out_c, oh, ow);

    if sh.k == 1 && sh.stride == 1 {
        // 1x1: per-pixel linear map across channels.
        let hw = oh * ow;
        for oc in 0..sh.out_c {
            let out_ch = &mut out.data[oc * hw..(oc + 1) * hw];
            out_ch.fill(bias[oc]);
            for ic in 0..sh.in_c {
                let wv = weights[oc * sh.in_c + ic];
                let in_ch = input.channel(ic);
                for (o, &i) in out_ch.iter_mut().zip(in_ch) {
                    *o += wv * i;
                }
            }
        }
        return out;
    }

    let p = sh.pad();
    let (padded, ph, pw) = pad_input(input, p);
    let hw = oh * ow;
    for oc in 0..sh.out_c {
        let out_ch = &mut out.data[oc * hw..(oc + 1) * hw];
        out_ch.fill(bias[oc]);
        for ic in 0..sh.in_c {
            let in_ch = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..sh.k {
                for kx in 0..sh.k {
                    let wv = weights[((oc * sh.in_c + ic) * sh.k + ky) * sh.k + kx];
                    if sh.stride == 1 {
                        for oy in 0..oh {
                            let in_row = &in_ch[(oy + ky) * pw + kx..(oy + ky) * pw + kx + ow];
                            let out_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                            for x in 0..ow {
                                out_row[x] += wv * in_row[x];
                            }
                        }
                    } else {
                        let s = sh.stride;
                        for oy in 0..oh {
                            let in_row = &in_ch[(oy * s + ky) * pw..(oy * s + ky + 1) * pw];
                            let out_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                            for x in 0..ow {
                                out_row[x] += wv * in_row[x * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of one convolution. `dinput` is omitted for the first layer.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weights: &[T],
    sh: &ConvShape,
    dout: &Tensor<T>,
    need_dinput: bool,
) -> (Vec<T>, Vec<T>, Option<Tensor<T>>) {
    let (oh, ow) = sh.out_hw(input.h, input.w);
    debug_assert_eq!((dout.h, dout.w), (oh, ow));
    let hw = oh * ow;
    let mut dw = vec![T::zero(); sh.weight_len()];
    let mut db = vec![T::zero(); sh.out_c];
    for oc in 0..sh.out_c {
        db[oc] = dout.channel(oc).iter().copied().sum();
    }

    if sh.k == 1 && sh.stride == 1 {
        for oc in 0..sh.out_c {
            let dout_ch = dout.channel(oc);
            for ic in 0..sh.in_c {
                let in_ch = input.channel(ic);
                let mut acc = T::zero();
                for (&d, &i) in dout_ch.iter().zip(in_ch) {
                    acc += d * i;
                }
                dw[oc * sh.in_c + ic] = acc;
            }
        }
        let dinput = need_dinput.then(|| {
            let mut din = Tensor::zeros(sh.in_c, input.h, input.w);
            for ic in 0..sh.in_c {
                let din_ch = &mut din.data[ic * hw..(ic + 1) * hw];
                for oc in 0..sh.out_c {
                    let wv = weights[oc * sh.in_c + ic];
                    let dout_ch = dout.channel(oc);
                    for (o, &d) in din_ch.iter_mut().zip(dout_ch) {
                        *o += wv * d;
                    }
                }
            }
            din
        });
        return (dw, db, dinput);
    }

    let p = sh.pad();
    let (padded, ph, pw) = pad_input(input, p);
    for oc in 0..sh.out_c {
        let dout_ch = dout.channel(oc);
        for ic in 0..sh.in_c {
            let in_ch = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..sh.k {
                for kx in 0..sh.k {
                    let mut acc = T::zero();
                    if sh.stride == 1 {
                        for oy in 0..oh {
                            let in_row = &in_ch[(oy + ky) * pw + kx..(oy + ky) * pw + kx + ow];
                            let d_row = &dout_ch[oy * ow..(oy + 1) * ow];
                            for x in 0..ow {
                                acc += d_row[x] * in_row[x];
                            }
                        }
                    } else {
                        let s = sh.stride;
                        for oy in 0..oh {
                            let in_row = &in_ch[(oy * s + ky) * pw..(oy * s + ky + 1) * pw];
                            let d_row = &dout_ch[oy * ow..(oy + 1) * ow];
                            for x in 0..ow {
                                acc += d_row[x] * in_row[x * s + kx];
                            }
                        }
                    }
                    dw[((oc * sh.in_c + ic) * sh.k + ky) * sh.k + kx] = acc;
                }
            }
        }
    }

    let dinput = need_dinput.then(|| {
        let mut dpad = vec![T::zero(); sh.in_c * ph * pw];
        for ic in 0..sh.in_c {
            let dpad_ch = &mut dpad[ic * ph * pw..(ic + 1) * ph * pw];
            for oc in 0..sh.out_c {
                let dout_ch = dout.channel(oc);
                for ky in 0..sh.k {
                    for kx in 0..sh.k {
                        let wv = weights[((oc * sh.in_c + ic) * sh.k + ky) * sh.k + kx];
                        if sh.stride == 1 {
                            for oy in 0..oh {
                                let dp_row =
                                    &mut dpad_ch[(oy + ky) * pw + kx..(oy + ky) * pw + kx + ow];
                                let d_row = &dout_ch[oy * ow..(oy + 1) * ow];
                                for x in 0..ow {
                                    dp_row[x] += wv * d_row[x];
                                }
                            }
                        } else {
                            let s = sh.stride;
                            for oy in 0..oh {
                                let d_row = &dout_ch[oy * ow..(oy + 1) * ow];
                                let base = (oy * s + ky) * pw + kx;
                                for x in 0..ow {
                                    dpad_ch[base + x * s] += wv * d_row[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut din = Tensor::zeros(sh.in_c, input.h, input.w);
        for ic in 0..sh.in_c {
            for y in 0..input.h {
                let src = &dpad[(ic * ph + y + p) * pw + p..(ic * ph + y + p) * pw + p + input.w];
                din.data[(ic * input.h + y) * input.w..(ic * input.h + y + 1) * input.w]
                    .copy_from_slice(src);
            }
        }
        din
    });
    (dw, db, dinput)
}

pub fn act_forward<T: Real>(act: Act, pre: &Tensor<T>) -> Tensor<T> {
    let mut out = pre.clone();
    match act {
        Act::Relu => {
            for v in &mut out.data {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Act::Softplus => {
            for v in &mut out.data {
                // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
                *v = v.max(T::zero()) + (-v.abs()).exp().ln_1p();
            }
        }
    }
    out
}

/// Multiplies `d` in place by the activation derivative at `pre`.
pub fn act_backward<T: Real>(act: Act, pre: &Tensor<T>, d: &mut Tensor<T>) {
    match act {
        Act::Relu => {
            for (dv, &pv) in d.data.iter_mut().zip(&pre.data) {
                if pv <= T::zero() {
                    *dv = T::zero();
                }
            }
        }
        Act::Softplus => {
            for (dv, &pv) in d.data.iter_mut().zip(&pre.data) {
                *dv = *dv * sigmoid(pv);
            }
        }
    }
}

pub fn upsample2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.h, input.w);
    let mut out = Tensor::zeros(input.c, h * 2, w * 2);
    for c in 0..input.c {
        let in_ch = input.channel(c);
        let out_ch = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        for y in 0..2 * h {
            let in_row = &in_ch[(y / 2) * w..(y / 2 + 1) * w];
            let out_row = &mut out_ch[y * 2 * w..(y + 1) * 2 * w];
            for x in 0..2 * w {
                out_row[x] = in_row[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (dout.h, dout.w);
    let (h, w) = (oh / 2, ow / 2);
    let mut din = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let dout_ch = dout.channel(c);
        let din_ch = &mut din.data[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let d_row = &dout_ch[y * ow..(y + 1) * ow];
            let t_row = &mut din_ch[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..ow {
                t_row[x / 2] += d_row[x];
            }
        }
    }
    din
}

/// Two-scale-and-up top-down fusion network:
/// encoder (stem + strided downs), 1x1 laterals onto a common width,
/// upsample-add merges smoothed by 3x3 convs, and a 1x1 sigmoid head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetPlan {
    pub in_c: usize,
    /// Encoder widths, index 0 = full resolution. `len() - 1` downsamplings.
    pub channels: Vec<usize>,
    pub fusion: usize,
    pub k: usize,
    pub act: Act,
}

impl NetPlan {
    pub fn scales(&self) -> usize {
        self.channels.len() - 1
    }

    /// Convolutions in parameter-layout order:
    /// stem, downs, laterals (fine to coarse), smooths (fine to coarse), head.
    pub fn convs(&self) -> Vec<ConvShape> {
        let s = self.scales();
        let mut shapes = Vec::new();
        shapes.push(ConvShape {
            in_c: self.in_c,
            out_c: self.channels[0],
            k: self.k,
            stride: 1,
        });
        for i in 1..=s {
            shapes.push(ConvShape {
                in_c: self.channels[i - 1],
                out_c: self.channels[i],
                k: self.k,
                stride: 2,
            });
        }
        for i in 0..=s {
            shapes.push(ConvShape {
                in_c: self.channels[i],
                out_c: self.fusion,
                k: 1,
                stride: 1,
            });
        }
        for _ in 0..s {
            shapes.push(ConvShape {
                in_c: self.fusion,
                out_c: self.fusion,
                k: self.k,
                stride: 1,
            });
        }
        shapes.push(ConvShape {
            in_c: self.fusion,
            out_c: 1,
            k: 1,
            stride: 1,
        });
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_len()).sum()
    }

    /// Byte offsets of each conv's (weights, bias) block in the flat vector.
    pub fn layout(&self) -> Vec<(usize, ConvShape)> {
        let mut offset = 0;
        self.convs()
            .into_iter()
            .map(|sh| {
                let entry = (offset, sh);
                offset += sh.param_len();
                entry
            })
            .collect()
    }

    /// Offset of the head conv's bias within the flat parameter vector.
    pub fn head_bias_offset(&self) -> usize {
        let layout = self.layout();
        let (off, sh) = layout[layout.len() - 1];
        off + sh.weight_len()
    }
}

pub struct Trace<T> {
    enc_pre: Vec<Tensor<T>>,
    enc: Vec<Tensor<T>>,
    merged: Vec<Tensor<T>>,
    smooth_pre: Vec<Tensor<T>>,
    head_in: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Real> Trace<T> {
    /// Smallest |pre-activation| anywhere in the network; used by gradient
    /// checks to reject instances sitting on a relu kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.enc_pre
            .iter()
            .chain(self.smooth_pre.iter())
            .flat_map(|t| t.data.iter())
            .map(|v| v.as_f64().abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn slice_params<'a, T>(params: &'a [T], offset: usize, sh: &ConvShape) -> (&'a [T], &'a [T]) {
    let w = &params[offset..offset + sh.weight_len()];
    let b = &params[offset + sh.weight_len()..offset + sh.param_len()];
    (w, b)
}

/// Full forward pass keeping every buffer backprop needs.
pub fn net_forward<T: Real>(plan: &NetPlan, params: &[T], input: &Tensor<T>) -> Trace<T> {
    debug_assert_eq!(params.len(), plan.param_count());
    let s = plan.scales();
    let layout = plan.layout();
    let conv = |idx: usize, input: &Tensor<T>| -> Tensor<T> {
        let (off, sh) = layout[idx];
        let (w, b) = slice_params(params, off, &sh);
        conv_forward(input, w, b, &sh)
    };

    // Encoder.
    let mut enc_pre = Vec::with_capacity(s + 1);
    let mut enc = Vec::with_capacity(s + 1);
    enc_pre.push(conv(0, input));
    enc.push(act_forward(plan.act, &enc_pre[0]));
    for i in 1..=s {
        enc_pre.push(conv(i, &enc[i - 1]));
        enc.push(act_forward(plan.act, &enc_pre[i]));
    }

    // Top-down fusion. Lateral conv index for scale i is (s + 1) + i;
    // smooth conv index for scale i is (2s + 2) + i.
    let mut pyr_above = conv(s + 1 + s, &enc[s]); // coarsest lateral
    let mut merged = vec![None; s];
    let mut smooth_pre = vec![None; s];
    let mut pyr_fine = None;
    for i in (0..s).rev() {
        let lat = conv(s + 1 + i, &enc[i]);
        let up = upsample2(&pyr_above);
        let mut m = lat;
        for (mv, uv) in m.data.iter_mut().zip(&up.data) {
            *mv += *uv;
        }
        let pre = conv(2 * s + 2 + i, &m);
        let post = act_forward(plan.act, &pre);
        merged[i] = Some(m);
        smooth_pre[i] = Some(pre);
        if i == 0 {
            pyr_fine = Some(post);
        } else {
            pyr_above = post;
        }
    }
    let head_in = if s == 0 { pyr_above } else { pyr_fine.unwrap() };
    let logits = conv(layout.len() - 1, &head_in);
    Trace {
        enc_pre,
        enc,
        merged: merged.into_iter().map(Option::unwrap).collect(),
        smooth_pre: smooth_pre.into_iter().map(Option::unwrap).collect(),
        head_in,
        logits,
    }
}

/// Backward pass from a gradient w.r.t. the logits; returns gradients in the
/// flat parameter layout. `input` is the original network input (needed for
/// the stem weight gradient, which the trace does not duplicate).
pub fn net_backward_with_input<T: Real>(
    plan: &NetPlan,
    params: &[T],
    input: &Tensor<T>,
    trace: &Trace<T>,
    dlogits: &Tensor<T>,
) -> Vec<T> {
    let s = plan.scales();
    let layout = plan.layout();
    let mut grads = vec![T::zero(); params.len()];

    {
        let mut store = |idx: usize, dw: Vec<T>, db: Vec<T>, grads: &mut Vec<T>| {
            let (off, sh) = layout[idx];
            grads[off..off + sh.weight_len()].copy_from_slice(&dw);
            grads[off + sh.weight_len()..off + sh.param_len()].copy_from_slice(&db);
        };
        let back = |idx: usize, input: &Tensor<T>, dout: &Tensor<T>, need: bool| {
            let (off, sh) = layout[idx];
            let (w, _) = slice_params(params, off, &sh);
            conv_backward(input, w, &sh, dout, need)
        };

        let (dw, db, din) = back(layout.len() - 1, &trace.head_in, dlogits, true);
        store(layout.len() - 1, dw, db, &mut grads);
        let mut d_pyr = din.unwrap();

        let mut d_enc: Vec<Option<Tensor<T>>> = (0..=s).map(|_| None).collect();
        fn add_to<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
            match slot {
                None => *slot = Some(t),
                Some(acc) => {
                    for (a, v) in acc.data.iter_mut().zip(&t.data) {
                        *a += *v;
                    }
                }
            }
        }

        for i in 0..s {
            let mut d = d_pyr;
            act_backward(plan.act, &trace.smooth_pre[i], &mut d);
            let (dw, db, din) = back(2 * s + 2 + i, &trace.merged[i], &d, true);
            store(2 * s + 2 + i, dw, db, &mut grads);
            let d_merged = din.unwrap();
            let (dw, db, din) = back(s + 1 + i, &trace.enc[i], &d_merged, true);
            store(s + 1 + i, dw, db, &mut grads);
            add_to(&mut d_enc[i], din.unwrap());
            d_pyr = upsample2_backward(&d_merged);
        }

        let (dw, db, din) = back(s + 1 + s, &trace.enc[s], &d_pyr, true);
        store(s + 1 + s, dw, db, &mut grads);
        add_to(&mut d_enc[s], din.unwrap());

        for i in (1..=s).rev() {
            let mut d = d_enc[i].take().unwrap();
            act_backward(plan.act, &trace.enc_pre[i], &mut d);
            let (dw, db, din) = back(i, &trace.enc[i - 1], &d, true);
            store(i, dw, db, &mut grads);
            add_to(&mut d_enc[i - 1], din.unwrap());
        }
        let mut d = d_enc[0].take().unwrap();
        act_backward(plan.act, &trace.enc_pre[0], &mut d);
        let (dw, db, _) = back(0, input, &d, false);
        store(0, dw, db, &mut grads);
    }
    grads
}
