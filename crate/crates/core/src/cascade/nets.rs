use std::sync::Arc;

use super::{CascadeModel, ModelError};
use crate::boxgeom::BBox;
use crate::losses::{LayerGradient, LayerId};
use crate::ndtensor::{SparseMap, Tape, Tensor, Var};
use crate::recurrent::LstmVars;

/// Pixel spacing between cells of the merged feature map.
pub const GRID_STRIDE: f64 = 4.0;

/// Tape values of a two-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct MlpOut {
    pub input: Var,
    pub pre: Var,
    pub logits: Var,
}

/// Bilinear samples of a `[C, H, W]` map at patch-coordinate points, laid
/// out channel-major (`[C, points]`). Points outside the map clamp to the
/// border.
pub fn sample_points(shape: &[usize], points: &[(f64, f64)], stride: f64) -> SparseMap {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let taps: Vec<[(usize, f64); 4]> = points
        .iter()
        .map(|&(x, y)| {
            let u = (x / stride).clamp(0.0, (w - 1) as f64);
            let v = (y / stride).clamp(0.0, (h - 1) as f64);
            let (i0, j0) = (u.floor() as usize, v.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(w - 1), (j0 + 1).min(h - 1));
            let (a, b) = (u - i0 as f64, v - j0 as f64);
            [
                (j0 * w + i0, (1.0 - a) * (1.0 - b)),
                (j0 * w + i1, a * (1.0 - b)),
                (j1 * w + i0, (1.0 - a) * b),
                (j1 * w + i1, a * b),
            ]
        })
        .collect();
    let mut m = SparseMap::new();
    for ch in 0..c {
        let base = ch * h * w;
        for t in &taps {
            m.push_row(t.iter().filter(|e| e.1 != 0.0).map(|&(j, wt)| (base + j, wt)));
        }
    }
    m
}

/// `size × size` grid of cell centers covering `b`, row-major.
pub fn box_grid(b: &BBox, size: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            pts.push((
                b.x0() + (c as f64 + 0.5) * b.w / size as f64,
                b.y0() + (r as f64 + 0.5) * b.h / size as f64,
            ));
        }
    }
    pts
}

/// Score gradients of a two-layer perceptron with respect to its input,
/// hidden and output layers, for logit rows `other` and `truth`.
pub fn layer_gradients(w1: &Tensor, w2: &Tensor, pre: &[f64], other: usize, truth: usize) -> Vec<LayerGradient> {
    let (hdim, n) = (w1.shape()[0], w1.shape()[1]);
    let out = w2.shape()[0];
    let row = |r: usize| &w2.data()[r * hdim..(r + 1) * hdim];
    let input_grad = |r: usize| {
        let mut g = vec![0.0; n];
        for (k, &p) in pre.iter().enumerate() {
            if p > 0.0 {
                let s = row(r)[k];
                for (gj, &wkj) in g.iter_mut().zip(&w1.data()[k * n..(k + 1) * n]) {
                    *gj += s * wkj;
                }
            }
        }
        g
    };
    let unit = |r: usize| {
        let mut e = vec![0.0; out];
        e[r] = 1.0;
        e
    };
    vec![
        LayerGradient {
            layer: LayerId::Input,
            grad_other: input_grad(other),
            grad_true: input_grad(truth),
        },
        LayerGradient {
            layer: LayerId::LastHidden,
            grad_other: row(other).to_vec(),
            grad_true: row(truth).to_vec(),
        },
        LayerGradient {
            layer: LayerId::Output,
            grad_other: unit(other),
            grad_true: unit(truth),
        },
    ]
}

/// `(U, V, N)` for the attention objective: the patch content under the
/// predicted box resampled onto the ground-truth box's pixel grid, the
/// content under the ground-truth box, and the pixel count of the overlap.
pub fn attention_patch_term(patch: &Tensor, pred: &BBox, gt: &BBox) -> (Tensor, Tensor, usize) {
    let p = patch.shape()[0];
    let at = |x: f64, y: f64| -> f64 {
        let (c, r) = (x.round(), y.round());
        if c < 0.0 || r < 0.0 || c >= p as f64 || r >= p as f64 {
            0.0
        } else {
            patch.data()[r as usize * p + c as usize]
        }
    };
    let (sx, sy) = (pred.w / gt.w, pred.h / gt.h);
    let (mut u, mut v) = (Vec::new(), Vec::new());
    let mut n = 0;
    let y0 = gt.y0().ceil() as i64;
    let x0 = gt.x0().ceil() as i64;
    let y1 = gt.y1().floor() as i64;
    let x1 = gt.x1().floor() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (xf, yf) = (x as f64, y as f64);
            v.push(at(xf, yf));
            u.push(at(pred.cx + (xf - gt.cx) * sx, pred.cy + (yf - gt.cy) * sy));
            if pred.contains(xf, yf) {
                n += 1;
            }
        }
    }
    let len = u.len().max(1);
    if u.is_empty() {
        u.push(0.0);
        v.push(0.0);
    }
    (Tensor::vector(u).reshaped(&[len]).expect("len"), Tensor::vector(v), n)
}

/// A model bound to a tape, with forward building blocks shared by
/// training and inference.
pub struct Engine<'m> {
    pub model: &'m CascadeModel,
    pub tape: Tape,
    vars: Vec<Var>,
    mark: usize,
}

impl<'m> Engine<'m> {
    /// Binds parameters; names for which `trainable` holds become leaves.
    pub fn new(model: &'m CascadeModel, trainable: impl Fn(&str) -> bool, checked: bool) -> Self {
        let mut tape = if checked { Tape::new_checked() } else { Tape::new() };
        let vars = model.params.bind_with(&mut tape, trainable).vars().to_vec();
        Self::on_tape(model, tape, vars)
    }

    /// Wraps a tape on which the model's parameters are already placed;
    /// `vars` follows the parameter storage order.
    pub fn on_tape(model: &'m CascadeModel, tape: Tape, vars: Vec<Var>) -> Self {
        let mark = tape.len();
        Self {
            model,
            tape,
            vars,
            mark,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn frozen(model: &'m CascadeModel) -> Self {
        Self::new(model, |_| false, false)
    }

    /// Drops everything recorded after binding and clears gradients.
    pub fn reset(&mut self) {
        self.tape.truncate(self.mark);
        self.tape.zero_grad();
    }

    /// Tape handle of a parameter. Panics on unknown names; models are
    /// validated on load.
    pub fn var(&self, name: &str) -> Var {
        match self.model.params.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter '{name}'"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient accumulated on parameter `name` (zeros if untouched).
    pub fn param_grad(&self, name: &str) -> Vec<f64> {
        let v = self.var(name);
        self.tape
            .grad(v)
            .map_or_else(|| vec![0.0; self.tape.value(v).len()], <[f64]>::to_vec)
    }

    pub fn patch_var(&mut self, patch: &Tensor) -> Result<Var, ModelError> {
        let p = self.model.arch.patch;
        if patch.shape() != [p, p] {
            return Err(ModelError::Arch(format!(
                "patch must be {p}x{p}, got {:?}",
                patch.shape()
            )));
        }
        Ok(self.tape.constant(patch.clone().reshaped(&[1, p, p])?))
    }

    fn conv_relu(&mut self, x: Var, prefix: &str, layer: &str) -> Result<Var, ModelError> {
        let k = self.var(&format!("{prefix}.{layer}.w"));
        let b = self.var(&format!("{prefix}.{layer}.b"));
        let y = self.tape.conv2d(x, k, 2, 1)?;
        let y = self.tape.add_channel_bias(y, b)?;
        Ok(self.tape.relu(y))
    }

    /// Outputs of the second and third stride-2 convolutions.
    pub fn backbone(&mut self, prefix: &str, patch: Var) -> Result<(Var, Var), ModelError> {
        let a = self.conv_relu(patch, prefix, "c1")?;
        let b = self.conv_relu(a, prefix, "c2")?;
        let c = self.conv_relu(b, prefix, "c3")?;
        Ok((b, c))
    }

    /// Four attention box deltas relative to [`super::ArchConfig::anchor_box`].
    pub fn attention_delta(&mut self, patch: Var) -> Result<Var, ModelError> {
        let (_, c3) = self.backbone("att", patch)?;
        let n = self.tape.value(c3).len();
        let flat = self.tape.reshape(c3, &[n])?;
        let (w, b) = (self.var("att.fc.w"), self.var("att.fc.b"));
        Ok(self.tape.affine(flat, w, b)?)
    }

    /// Fine backbone map plus the upsampled lateral projection of the coarse map.
    pub fn merged_map(&mut self, patch: Var) -> Result<Var, ModelError> {
        let (fine, coarse) = self.backbone("det", patch)?;
        let (lw, lb) = (self.var("det.lat.w"), self.var("det.lat.b"));
        let lat = self.tape.conv2d(coarse, lw, 1, 0)?;
        let lat = self.tape.add_channel_bias(lat, lb)?;
        let fs = self.tape.shape(fine).to_vec();
        let cs = self.tape.shape(lat).to_vec();
        let mut up = SparseMap::new();
        for ch in 0..fs[0] {
            for y in 0..fs[1] {
                for x in 0..fs[2] {
                    let sy = ((y as f64 / 2.0).round() as usize).min(cs[1] - 1);
                    let sx = ((x as f64 / 2.0).round() as usize).min(cs[2] - 1);
                    up.push_row([(ch * cs[1] * cs[2] + sy * cs[2] + sx, 1.0)]);
                }
            }
        }
        let up = self.tape.sparse_linear(lat, Arc::new(up), &fs)?;
        Ok(self.tape.add(fine, up)?)
    }

    fn mlp(&mut self, input: Var, prefix: &str) -> Result<MlpOut, ModelError> {
        let (w1, b1) = (self.var(&format!("{prefix}.w1")), self.var(&format!("{prefix}.b1")));
        let (w2, b2) = (self.var(&format!("{prefix}.w2")), self.var(&format!("{prefix}.b2")));
        let pre = self.tape.affine(input, w1, b1)?;
        let h = self.tape.relu(pre);
        let logits = self.tape.affine(h, w2, b2)?;
        Ok(MlpOut { input, pre, logits })
    }

    /// Proposal logits (`2·scales` values) from the map sampled at `point`.
    pub fn rpn(&mut self, map: Var, point: (f64, f64)) -> Result<MlpOut, ModelError> {
        let shape = self.tape.shape(map).to_vec();
        let s = sample_points(&shape, &[point], GRID_STRIDE);
        let x = self.tape.sparse_linear(map, Arc::new(s), &[shape[0]])?;
        self.mlp(x, "det.rpn")
    }

    /// Region feature: bilinear `roi × roi` crop of the map over `b`, then an
    /// affine layer with ReLU.
    pub fn roi_feature(&mut self, map: Var, b: &BBox) -> Result<Var, ModelError> {
        let shape = self.tape.shape(map).to_vec();
        let r = self.model.arch.roi_size;
        let s = sample_points(&shape, &box_grid(b, r), GRID_STRIDE);
        let x = self.tape.sparse_linear(map, Arc::new(s), &[shape[0] * r * r])?;
        let (w, bias) = (self.var("det.roi.w"), self.var("det.roi.b"));
        let y = self.tape.affine(x, w, bias)?;
        Ok(self.tape.relu(y))
    }

    /// Two-class scores; `prefix` is `head` or `lhead`.
    pub fn cls_head(&mut self, prefix: &str, feat: Var) -> Result<MlpOut, ModelError> {
        self.mlp(feat, &format!("{prefix}.cls"))
    }

    /// Center offset `(t_x, t_y)` relative to the anchor.
    pub fn box_head(&mut self, prefix: &str, feat: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.var(&format!("{prefix}.box.w")), self.var(&format!("{prefix}.box.b")));
        Ok(self.tape.affine(feat, w, b)?)
    }

    /// Per-pixel mask features `[mask_size², mask_channels]` over `b`.
    pub fn mask_features(&mut self, map: Var, b: &BBox) -> Result<Var, ModelError> {
        let shape = self.tape.shape(map).to_vec();
        let m = self.model.arch.mask_size;
        let s = sample_points(&shape, &box_grid(b, m), GRID_STRIDE);
        let x = self.tape.sparse_linear(map, Arc::new(s), &[shape[0], m, m])?;
        let (w, bias) = (self.var("det.mask.w1"), self.var("det.mask.b1"));
        let y = self.tape.conv2d(x, w, 1, 0)?;
        let y = self.tape.add_channel_bias(y, bias)?;
        let y = self.tape.tanh(y);
        let mc = self.model.arch.mask_channels;
        let p = m * m;
        let idx = (0..p).flat_map(|px| (0..mc).map(move |c| Some(c * p + px))).collect();
        Ok(self.tape.gather(y, idx, &[p, mc])?)
    }

    /// Foreground probability per mask pixel from its features.
    pub fn mask_probs(&self, feats: Var) -> Vec<f64> {
        let w = self.tape.value(self.var("det.mask.w")).data();
        let x = self.tape.value(feats);
        let mc = x.shape()[1];
        x.data()
            .chunks(mc)
            .map(|f| {
                let z0: f64 = f.iter().zip(&w[..mc]).map(|(a, b)| a * b).sum();
                let z1: f64 = f.iter().zip(&w[mc..]).map(|(a, b)| a * b).sum();
                crate::ndtensor::sigmoid(z1 - z0)
            })
            .collect()
    }

    pub fn lstm(&self) -> Result<LstmVars, ModelError> {
        Ok(LstmVars::from_lookup(&self.model.params, "lstm.", |n| self.var(n))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_sampling_weights() {
        let m = sample_points(&[1, 2, 2], &[(2.0, 0.0), (0.0, 0.0), (100.0, -5.0)], 4.0);
        let x = [1.0, 3.0, 5.0, 7.0];
        assert_eq!(m.apply(&x), vec![2.0, 1.0, 3.0]);
        let m2 = sample_points(&[2, 2, 2], &[(2.0, 2.0)], 4.0);
        let x2 = [1.0, 3.0, 5.0, 7.0, 0.0, 0.0, 0.0, 8.0];
        assert_eq!(m2.apply(&x2), vec![4.0, 2.0]);
    }

    #[test]
    fn box_grid_covers_box() {
        let b = BBox::square(10.0, 20.0, 4.0).unwrap();
        let g = box_grid(&b, 2);
        assert_eq!(g, vec![(9.0, 19.0), (11.0, 19.0), (9.0, 21.0), (11.0, 21.0)]);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let w1 = Tensor::matrix(3, 2, vec![0.5, -1.0, 0.3, 0.8, -0.6, 0.2]).unwrap();
        let w2 = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 0.4, 0.9, -1.2]).unwrap();
        let x = [0.7, -0.4];
        let f = |x: &[f64], r: usize| {
            let mut s = 0.0;
            for k in 0..3 {
                let pre = w1.data()[2 * k] * x[0] + w1.data()[2 * k + 1] * x[1];
                s += w2.data()[3 * r + k] * pre.max(0.0);
            }
            s
        };
        let pre: Vec<f64> = (0..3).map(|k| w1.data()[2 * k] * x[0] + w1.data()[2 * k + 1] * x[1]).collect();
        let g = layer_gradients(&w1, &w2, &pre, 0, 1);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd0 = (f(&xp, 0) - f(&xm, 0)) / (2.0 * h);
            let fd1 = (f(&xp, 1) - f(&xm, 1)) / (2.0 * h);
            assert!((g[0].grad_other[j] - fd0).abs() < 1e-8);
            assert!((g[0].grad_true[j] - fd1).abs() < 1e-8);
        }
        assert_eq!(g[1].grad_true, vec![0.4, 0.9, -1.2]);
    }

    #[test]
    fn attention_patch_term_identity() {
        let patch = Tensor::new(vec![10, 10], (0..100).map(|i| i as f64 / 100.0).collect()).unwrap();
        let b = BBox::square(5.0, 5.0, 4.0).unwrap();
        let (u, v, n) = attention_patch_term(&patch, &b, &b);
        assert_eq!(u, v);
        assert_eq!(n, 25);
        let far = BBox::square(50.0, 50.0, 4.0).unwrap();
        let (_, _, n) = attention_patch_term(&patch, &far, &b);
        assert_eq!(n, 0);
    }
}
