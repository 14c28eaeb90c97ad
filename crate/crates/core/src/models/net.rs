//! Forward and hand-derived backward passes for the two embedding
//! architectures, plus the classification loss heads used in training.
//!
//! Layouts are fixed at construction: parameters live in one flat vector and
//! every pass indexes it through `Layout` segments. Conv activations use CHW
//! order internally; images at the API boundary are HWC in [0, 255] and are
//! scaled by 1/255 on entry.

use super::{Architecture, DropoutPattern};

/// One contiguous segment of the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Seg {
    pub off: usize,
    pub len: usize,
}

impl Seg {
    fn next(off: &mut usize, len: usize) -> Seg {
        let s = Seg { off: *off, len };
        *off += len;
        s
    }

    pub fn slice<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.off..self.off + self.len]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.off..self.off + self.len]
    }
}

/// Segment map of the flat parameter vector for one concrete network.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub w1: Seg,
    pub b1: Seg,
    pub w2: Seg,
    pub b2: Seg,
    pub w3: Seg,
    pub b3: Seg,
    pub wc: Seg,
    pub bc: Seg,
    pub total: usize,
}

impl Layout {
    pub fn new(
        arch: &Architecture,
        input_shape: [usize; 3],
        feature_dim: usize,
        n_classes: usize,
    ) -> Layout {
        let [h, w, c] = input_shape;
        let mut off = 0;
        let (w1, b1, w2, b2, w3, b3) = match *arch {
            Architecture::Mlp3 { hidden1, hidden2 } => {
                let n0 = h * w * c;
                (
                    Seg::next(&mut off, hidden1 * n0),
                    Seg::next(&mut off, hidden1),
                    Seg::next(&mut off, hidden2 * hidden1),
                    Seg::next(&mut off, hidden2),
                    Seg::next(&mut off, feature_dim * hidden2),
                    Seg::next(&mut off, feature_dim),
                )
            }
            Architecture::Conv2 {
                channels1,
                channels2,
            } => {
                let flat = channels2 * (h / 4) * (w / 4);
                (
                    Seg::next(&mut off, channels1 * c * 9),
                    Seg::next(&mut off, channels1),
                    Seg::next(&mut off, channels2 * channels1 * 9),
                    Seg::next(&mut off, channels2),
                    Seg::next(&mut off, feature_dim * flat),
                    Seg::next(&mut off, feature_dim),
                )
            }
        };
        let wc = Seg::next(&mut off, n_classes * feature_dim);
        let bc = Seg::next(&mut off, n_classes);
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            wc,
            bc,
            total: off,
        }
    }

    /// Fan-in of each weight segment, for initialization.
    pub fn fan_ins(arch: &Architecture, input_shape: [usize; 3], feature_dim: usize) -> [usize; 4] {
        let [h, w, c] = input_shape;
        match *arch {
            Architecture::Mlp3 { hidden1, hidden2 } => [h * w * c, hidden1, hidden2, feature_dim],
            Architecture::Conv2 {
                channels1,
                channels2,
            } => [c * 9, channels1 * 9, channels2 * (h / 4) * (w / 4), feature_dim],
        }
    }
}

/// Sizes of the two droppable hidden stages.
pub(crate) fn dropout_sizes(arch: &Architecture, input_shape: [usize; 3]) -> (usize, usize) {
    let [h, w, _c] = input_shape;
    match *arch {
        Architecture::Mlp3 { hidden1, hidden2 } => (hidden1, hidden2),
        Architecture::Conv2 {
            channels1,
            channels2,
        } => (channels1 * h * w, channels2 * (h / 2) * (w / 2)),
    }
}

/// Saved activations from one forward pass, enough to run backward.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    /// Scaled input: MLP keeps HWC order, Conv is transposed to CHW.
    pub x_scaled: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>, // relu(z1) with dropout applied
    pub p1: Vec<f64>, // conv only: pooled a1
    pub z2: Vec<f64>,
    pub a2: Vec<f64>, // relu(z2) with dropout applied
    pub p2: Vec<f64>, // conv only: pooled a2, flattened
    pub feat_raw: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = b[r] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
    }
}

/// g_x += W^T g_y
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g_y: &[f64], g_x: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = g_y[r];
        if g != 0.0 {
            for (gx, wi) in g_x.iter_mut().zip(row) {
                *gx += wi * g;
            }
        }
    }
}

/// dW += g_y outer x
fn outer_acc(g_y: &[f64], x: &[f64], dw: &mut [f64]) {
    let cols = x.len();
    for (r, g) in g_y.iter().enumerate() {
        if *g != 0.0 {
            let row = &mut dw[r * cols..(r + 1) * cols];
            for (d, xi) in row.iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
}

fn relu_dropout(z: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        None => z.iter().map(|&v| v.max(0.0)).collect(),
        Some(m) => z.iter().zip(m).map(|(&v, &mi)| v.max(0.0) * mi).collect(),
    }
}

/// 3x3 convolution with zero padding 1, CHW layout.
fn conv3x3(input: &[f64], ci: usize, h: usize, w: usize, k: &[f64], b: &[f64], co: usize, out: &mut [f64]) {
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = b[o];
                for i in 0..ci {
                    let base = ((o * ci + i) * 3) * 3;
                    let plane = &input[i * h * w..(i + 1) * h * w];
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for kx in 0..3usize {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += k[base + ky * 3 + kx] * row[sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
}

/// Backward of `conv3x3` into any subset of input/kernel/bias gradients.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: &[f64],
    co: usize,
    g_out: &[f64],
    mut g_input: Option<&mut [f64]>,
    mut g_k: Option<&mut [f64]>,
    mut g_b: Option<&mut [f64]>,
) {
    for o in 0..co {
        let g_plane = &g_out[o * h * w..(o + 1) * h * w];
        if let Some(gb) = g_b.as_deref_mut() {
            gb[o] += g_plane.iter().sum::<f64>();
        }
        for y in 0..h {
            for x in 0..w {
                let g = g_plane[y * w + x];
                if g == 0.0 {
                    continue;
                }
                for i in 0..ci {
                    let base = ((o * ci + i) * 3) * 3;
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let in_idx = (i * h + sy as usize) * w + sx as usize;
                            if let Some(gk) = g_k.as_deref_mut() {
                                gk[base + ky * 3 + kx] += g * input[in_idx];
                            }
                            if let Some(gi) = g_input.as_deref_mut() {
                                gi[in_idx] += g * k[base + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn avgpool2(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = plane[(2 * y) * w + 2 * x]
                    + plane[(2 * y) * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1];
                out[(ch * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
}

fn avgpool2_backward(g_out: &[f64], c: usize, h: usize, w: usize, g_in: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * g_out[(ch * oh + y) * ow + x];
                let plane = &mut g_in[ch * h * w..(ch + 1) * h * w];
                plane[(2 * y) * w + 2 * x] += g;
                plane[(2 * y) * w + 2 * x + 1] += g;
                plane[(2 * y + 1) * w + 2 * x] += g;
                plane[(2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
}

pub(crate) struct Net<'a> {
    pub arch: &'a Architecture,
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    pub layout: Layout,
    pub params: &'a [f64],
}

impl<'a> Net<'a> {
    /// Raw feature head from an HWC image in [0, 255].
    pub fn forward(&self, image_hwc: &[f64], pattern: Option<&DropoutPattern>) -> Forward {
        let [h, w, c] = self.input_shape;
        let p = self.params;
        let l = &self.layout;
        let (m1, m2) = match pattern {
            Some(pat) => (Some(pat.mask1.as_slice()), Some(pat.mask2.as_slice())),
            None => (None, None),
        };
        match *self.arch {
            Architecture::Mlp3 { hidden1, hidden2 } => {
                let n0 = h * w * c;
                let x_scaled: Vec<f64> = image_hwc.iter().map(|v| v / 255.0).collect();
                let mut z1 = vec![0.0; hidden1];
                matvec(l.w1.slice(p), hidden1, n0, &x_scaled, l.b1.slice(p), &mut z1);
                let a1 = relu_dropout(&z1, m1);
                let mut z2 = vec![0.0; hidden2];
                matvec(l.w2.slice(p), hidden2, hidden1, &a1, l.b2.slice(p), &mut z2);
                let a2 = relu_dropout(&z2, m2);
                let mut feat_raw = vec![0.0; self.feature_dim];
                matvec(l.w3.slice(p), self.feature_dim, hidden2, &a2, l.b3.slice(p), &mut feat_raw);
                Forward {
                    x_scaled,
                    z1,
                    a1,
                    p1: Vec::new(),
                    z2,
                    a2,
                    p2: Vec::new(),
                    feat_raw,
                }
            }
            Architecture::Conv2 {
                channels1,
                channels2,
            } => {
                // HWC -> CHW, scaled.
                let mut x_scaled = vec![0.0; c * h * w];
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            x_scaled[(ch * h + y) * w + x] = image_hwc[(y * w + x) * c + ch] / 255.0;
                        }
                    }
                }
                let mut z1 = vec![0.0; channels1 * h * w];
                conv3x3(&x_scaled, c, h, w, l.w1.slice(p), l.b1.slice(p), channels1, &mut z1);
                let a1 = relu_dropout(&z1, m1);
                let mut p1 = vec![0.0; channels1 * (h / 2) * (w / 2)];
                avgpool2(&a1, channels1, h, w, &mut p1);

                let mut z2 = vec![0.0; channels2 * (h / 2) * (w / 2)];
                conv3x3(
                    &p1,
                    channels1,
                    h / 2,
                    w / 2,
                    l.w2.slice(p),
                    l.b2.slice(p),
                    channels2,
                    &mut z2,
                );
                let a2 = relu_dropout(&z2, m2);
                let mut p2 = vec![0.0; channels2 * (h / 4) * (w / 4)];
                avgpool2(&a2, channels2, h / 2, w / 2, &mut p2);

                let mut feat_raw = vec![0.0; self.feature_dim];
                matvec(
                    l.w3.slice(p),
                    self.feature_dim,
                    p2.len(),
                    &p2,
                    l.b3.slice(p),
                    &mut feat_raw,
                );
                Forward {
                    x_scaled,
                    z1,
                    a1,
                    p1,
                    z2,
                    a2,
                    p2,
                    feat_raw,
                }
            }
        }
    }

    /// Backward from dL/dfeat_raw through the trunk. Accumulates parameter
    /// gradients into `g_params` (same layout as `params`) and/or writes the
    /// input gradient (HWC order, with respect to raw 0-255 pixels).
    pub fn backward(
        &self,
        fw: &Forward,
        g_feat: &[f64],
        pattern: Option<&DropoutPattern>,
        mut g_params: Option<&mut [f64]>,
        g_input_hwc: Option<&mut [f64]>,
    ) {
        let [h, w, c] = self.input_shape;
        let p = self.params;
        let l = &self.layout;
        let want_input = g_input_hwc.is_some();
        match *self.arch {
            Architecture::Mlp3 { hidden1, hidden2 } => {
                let n0 = h * w * c;
                if let Some(gp) = g_params.as_deref_mut() {
                    outer_acc(g_feat, &fw.a2, l.w3.slice_mut(gp));
                    for (d, g) in l.b3.slice_mut(gp).iter_mut().zip(g_feat) {
                        *d += g;
                    }
                }
                let mut g_a2 = vec![0.0; hidden2];
                matvec_t_acc(l.w3.slice(p), self.feature_dim, hidden2, g_feat, &mut g_a2);
                apply_relu_dropout_grad(&mut g_a2, &fw.z2, pattern.map(|pt| pt.mask2.as_slice()));

                if let Some(gp) = g_params.as_deref_mut() {
                    outer_acc(&g_a2, &fw.a1, l.w2.slice_mut(gp));
                    for (d, g) in l.b2.slice_mut(gp).iter_mut().zip(&g_a2) {
                        *d += g;
                    }
                }
                let mut g_a1 = vec![0.0; hidden1];
                matvec_t_acc(l.w2.slice(p), hidden2, hidden1, &g_a2, &mut g_a1);
                apply_relu_dropout_grad(&mut g_a1, &fw.z1, pattern.map(|pt| pt.mask1.as_slice()));

                if let Some(gp) = g_params.as_deref_mut() {
                    outer_acc(&g_a1, &fw.x_scaled, l.w1.slice_mut(gp));
                    for (d, g) in l.b1.slice_mut(gp).iter_mut().zip(&g_a1) {
                        *d += g;
                    }
                }
                if let Some(gi) = g_input_hwc {
                    let mut g_x = vec![0.0; n0];
                    matvec_t_acc(l.w1.slice(p), hidden1, n0, &g_a1, &mut g_x);
                    for (out, g) in gi.iter_mut().zip(&g_x) {
                        *out = g / 255.0;
                    }
                }
            }
            Architecture::Conv2 {
                channels1,
                channels2,
            } => {
                if let Some(gp) = g_params.as_deref_mut() {
                    outer_acc(g_feat, &fw.p2, l.w3.slice_mut(gp));
                    for (d, g) in l.b3.slice_mut(gp).iter_mut().zip(g_feat) {
                        *d += g;
                    }
                }
                let mut g_p2 = vec![0.0; fw.p2.len()];
                matvec_t_acc(l.w3.slice(p), self.feature_dim, fw.p2.len(), g_feat, &mut g_p2);

                let mut g_a2 = vec![0.0; fw.a2.len()];
                avgpool2_backward(&g_p2, channels2, h / 2, w / 2, &mut g_a2);
                apply_relu_dropout_grad(&mut g_a2, &fw.z2, pattern.map(|pt| pt.mask2.as_slice()));

                let mut g_p1 = vec![0.0; fw.p1.len()];
                {
                    // w2 and b2 are adjacent in the flat layout.
                    let (gk, gb) = match g_params.as_deref_mut() {
                        Some(gp) => {
                            let (left, right) = gp.split_at_mut(l.b2.off);
                            (
                                Some(&mut left[l.w2.off..l.w2.off + l.w2.len]),
                                Some(&mut right[..l.b2.len]),
                            )
                        }
                        None => (None, None),
                    };
                    conv3x3_backward(
                        &fw.p1,
                        channels1,
                        h / 2,
                        w / 2,
                        l.w2.slice(p),
                        channels2,
                        &g_a2,
                        Some(&mut g_p1[..]),
                        gk.map(|s| &mut s[..]),
                        gb.map(|s| &mut s[..]),
                    );
                }

                let mut g_a1 = vec![0.0; fw.a1.len()];
                avgpool2_backward(&g_p1, channels1, h, w, &mut g_a1);
                apply_relu_dropout_grad(&mut g_a1, &fw.z1, pattern.map(|pt| pt.mask1.as_slice()));

                let mut g_x = if want_input {
                    Some(vec![0.0; c * h * w])
                } else {
                    None
                };
                {
                    // w1 and b1 are adjacent in the flat layout.
                    let (gk, gb) = match g_params.as_deref_mut() {
                        Some(gp) => {
                            let (left, right) = gp.split_at_mut(l.b1.off);
                            (
                                Some(&mut left[l.w1.off..l.w1.off + l.w1.len]),
                                Some(&mut right[..l.b1.len]),
                            )
                        }
                        None => (None, None),
                    };
                    conv3x3_backward(
                        &fw.x_scaled,
                        c,
                        h,
                        w,
                        l.w1.slice(p),
                        channels1,
                        &g_a1,
                        g_x.as_deref_mut(),
                        gk.map(|s| &mut s[..]),
                        gb.map(|s| &mut s[..]),
                    );
                }
                if let (Some(gi), Some(gx)) = (g_input_hwc, g_x) {
                    // CHW gradient back to HWC pixel units.
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..c {
                                gi[(y * w + x) * c + ch] = gx[(ch * h + y) * w + x] / 255.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn apply_relu_dropout_grad(g: &mut [f64], z: &[f64], mask: Option<&[f64]>) {
    match mask {
        None => {
            for (gi, zi) in g.iter_mut().zip(z) {
                if *zi <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        Some(m) => {
            for ((gi, zi), mi) in g.iter_mut().zip(z).zip(m) {
                *gi = if *zi > 0.0 { *gi * mi } else { 0.0 };
            }
        }
    }
}

/// Softmax cross-entropy head. Returns the loss and accumulates head
/// parameter gradients and dL/dfeat_raw.
pub(crate) fn softmax_head(
    feat_raw: &[f64],
    wc: &[f64],
    bc: &[f64],
    n_classes: usize,
    label: usize,
    mut g_wc: Option<&mut [f64]>,
    mut g_bc: Option<&mut [f64]>,
    g_feat: &mut [f64],
) -> f64 {
    let d = feat_raw.len();
    let mut logits = vec![0.0; n_classes];
    matvec(wc, n_classes, d, feat_raw, bc, &mut logits);
    let (loss, dlogits) = cross_entropy(&logits, label);
    if let Some(gw) = g_wc.as_deref_mut() {
        outer_acc(&dlogits, feat_raw, gw);
    }
    if let Some(gb) = g_bc.as_deref_mut() {
        for (g, dl) in gb.iter_mut().zip(&dlogits) {
            *g += dl;
        }
    }
    matvec_t_acc(wc, n_classes, d, &dlogits, g_feat);
    loss
}

/// Additive cosine-margin head on normalized features and class weights.
///
/// `cos_j = w_hat_j . f_hat`, `logit_j = scale * (cos_j - margin
/// * [j == label])`, cross-entropy on the logits. Gradients chain through
/// both normalizations: `d cos_j / d f_hat = w_hat_j` and `d cos_j / d w_j =
/// (f_hat - cos_j w_hat_j) / ||w_j||`, then `f_hat -> feat_raw` via
/// `(I - f_hat f_hat^T) / ||feat_raw||`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn margin_cosine_head(
    feat_raw: &[f64],
    wc: &[f64],
    n_classes: usize,
    label: usize,
    margin: f64,
    scale: f64,
    mut g_wc: Option<&mut [f64]>,
    g_feat: &mut [f64],
) -> f64 {
    let d = feat_raw.len();
    let fnorm = crate::numerics::l2_norm(feat_raw).max(1e-12);
    let fhat: Vec<f64> = feat_raw.iter().map(|v| v / fnorm).collect();

    let mut wnorms = vec![0.0; n_classes];
    let mut cosines = vec![0.0; n_classes];
    for j in 0..n_classes {
        let row = &wc[j * d..(j + 1) * d];
        wnorms[j] = crate::numerics::l2_norm(row).max(1e-12);
        cosines[j] = row.iter().zip(&fhat).map(|(w, f)| w * f).sum::<f64>() / wnorms[j];
    }
    let logits: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(j, &cosv)| scale * (cosv - if j == label { margin } else { 0.0 }))
        .collect();
    let (loss, dlogits) = cross_entropy(&logits, label);

    let mut g_fhat = vec![0.0; d];
    for j in 0..n_classes {
        let dcos = scale * dlogits[j];
        if dcos == 0.0 {
            continue;
        }
        let row = &wc[j * d..(j + 1) * d];
        let wn = wnorms[j];
        for t in 0..d {
            g_fhat[t] += dcos * row[t] / wn;
        }
        if let Some(gw) = g_wc.as_deref_mut() {
            let grow = &mut gw[j * d..(j + 1) * d];
            for t in 0..d {
                grow[t] += dcos * (fhat[t] - cosines[j] * row[t] / wn) / wn;
            }
        }
    }
    let dotp: f64 = g_fhat.iter().zip(&fhat).map(|(g, f)| g * f).sum();
    for t in 0..d {
        g_feat[t] += (g_fhat[t] - dotp * fhat[t]) / fnorm;
    }
    loss
}

fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(probs[label].max(1e-300)).ln();
    let mut dlogits = probs;
    dlogits[label] -= 1.0;
    (loss, dlogits)
}

/// Plain cosine logits used for classification accuracy under the margin
/// head (no margin at evaluation time).
pub(crate) fn cosine_logits(feat_raw: &[f64], wc: &[f64], n_classes: usize) -> Vec<f64> {
    let d = feat_raw.len();
    let fnorm = crate::numerics::l2_norm(feat_raw).max(1e-12);
    (0..n_classes)
        .map(|j| {
            let row = &wc[j * d..(j + 1) * d];
            let wn = crate::numerics::l2_norm(row).max(1e-12);
            row.iter().zip(feat_raw).map(|(w, f)| w * f).sum::<f64>() / (wn * fnorm)
        })
        .collect()
}

/// Plain logits for the softmax head.
pub(crate) fn affine_logits(feat_raw: &[f64], wc: &[f64], bc: &[f64], n_classes: usize) -> Vec<f64> {
    let d = feat_raw.len();
    let mut out = vec![0.0; n_classes];
    matvec(wc, n_classes, d, feat_raw, bc, &mut out);
    out
}
