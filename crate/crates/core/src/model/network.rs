//! U-Net forward pass and its hand-written reverse pass.

use super::loss::{loss_and_logit_grads, LossTerms, LossWeights};
use super::ops::{self, conv_out_dim, NormCache};
use super::params::{Architecture, Layer, LayerKind, NetworkConfig, NetworkParams, INPUT_CHANNELS};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::targets::PixelTargets;

/// Logits of the three heads, each `[classes, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits<T> {
    pub height: usize,
    pub width: usize,
    pub seg: Vec<T>,
    pub narrowing: Vec<T>,
    pub erosion: Vec<T>,
}

impl<T: Scalar> HeadLogits<T> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn zeros_like(&self) -> Self {
        HeadLogits {
            height: self.height,
            width: self.width,
            seg: vec![T::zero(); self.seg.len()],
            narrowing: vec![T::zero(); self.narrowing.len()],
            erosion: vec![T::zero(); self.erosion.len()],
        }
    }
}

/// Network input: intensity, then x and y coordinate planes scaled to `[0, 1]`.
pub fn input_planes<T: Scalar>(image: &GrayImage) -> Vec<T> {
    let (h, w) = (image.height(), image.width());
    let p = h * w;
    let mut x = Vec::with_capacity(INPUT_CHANNELS * p);
    x.extend(image.data().iter().map(|&v| T::of(f64::from(v))));
    let sx = if w > 1 { 1.0 / (w - 1) as f64 } else { 0.0 };
    let sy = if h > 1 { 1.0 / (h - 1) as f64 } else { 0.0 };
    for _ in 0..h {
        x.extend((0..w).map(|c| T::of(c as f64 * sx)));
    }
    for r in 0..h {
        x.extend(std::iter::repeat_n(T::of(r as f64 * sy), w));
    }
    x
}

enum Saved<T> {
    Conv { col: Vec<T> },
    Up { input: Vec<T> },
}

struct BlockCache<T> {
    saved: Saved<T>,
    norm: NormCache<T>,
    out: Vec<T>,
    in_h: usize,
    in_w: usize,
}

struct Tape<T> {
    blocks: Vec<BlockCache<T>>,
    trunk_out: Vec<T>,
}

struct LayerGrads<'a, T> {
    weight: &'a mut [T],
    bias: &'a mut [T],
    norm: Option<(&'a mut [T], &'a mut [T])>,
}

fn layer_grads<'a, T: Scalar>(params: &NetworkParams<T>, layer: &Layer, grads: &'a mut [T]) -> LayerGrads<'a, T> {
    let specs = params.specs();
    let w = &specs[layer.first_param];
    let b = &specs[layer.first_param + 1];
    let rest = &mut grads[w.offset..];
    let (weight, rest) = rest.split_at_mut(w.len);
    let (bias, rest) = rest.split_at_mut(b.len);
    let norm = if layer.normalized() {
        let (scale, rest) = rest.split_at_mut(layer.cout);
        let (shift, _) = rest.split_at_mut(layer.cout);
        Some((scale, shift))
    } else {
        None
    };
    LayerGrads { weight, bias, norm }
}

struct Net<'a, T> {
    params: &'a NetworkParams<T>,
    cfg: NetworkConfig,
    arch: Architecture,
}

impl<'a, T: Scalar> Net<'a, T> {
    fn new(params: &'a NetworkParams<T>) -> Self {
        let cfg = *params.config();
        Net {
            params,
            cfg,
            arch: Architecture::new(&cfg),
        }
    }

    fn check_input(&self, image: &GrayImage) -> Result<()> {
        if image.height() != self.cfg.in_h || image.width() != self.cfg.in_w {
            return Err(Error::ShapeMismatch(format!(
                "network expects {}x{} input, got {}x{}",
                self.cfg.in_h,
                self.cfg.in_w,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn block_forward(&self, layer: &Layer, x: &[T], h: usize, w: usize, keep: bool) -> (Vec<T>, usize, usize, Option<BlockCache<T>>) {
        let p = self.params;
        let weight = p.tensor(layer.first_param);
        let bias = p.tensor(layer.first_param + 1);
        let scale = p.tensor(layer.first_param + 2);
        let shift = p.tensor(layer.first_param + 3);
        let (z, oh, ow, saved) = match layer.kind {
            LayerKind::Conv { stride } => {
                let mut col = Vec::new();
                let z = ops::conv3x3(x, layer.cin, h, w, stride, weight, bias, layer.cout, &mut col);
                (z, conv_out_dim(h, stride), conv_out_dim(w, stride), Saved::Conv { col })
            }
            LayerKind::UpConv => {
                let z = ops::conv_transpose3x3(x, layer.cin, h, w, weight, bias, layer.cout);
                let saved = Saved::Up {
                    input: if keep { x.to_vec() } else { Vec::new() },
                };
                (z, 2 * h, 2 * w, saved)
            }
            LayerKind::Head => unreachable!("heads are not blocks"),
        };
        let groups = self.cfg.groups_for(layer.cout);
        let (mut y, norm) = ops::group_norm(&z, layer.cout, oh * ow, groups, scale, shift);
        ops::relu_in_place(&mut y);
        let cache = keep.then(|| BlockCache {
            saved,
            norm,
            out: y.clone(),
            in_h: h,
            in_w: w,
        });
        (y, oh, ow, cache)
    }

    fn block_backward(&self, layer: &Layer, cache: BlockCache<T>, mut dy: Vec<T>, grads: &mut [T], need_dx: bool) -> Vec<T> {
        let p = self.params;
        let weight = p.tensor(layer.first_param);
        let scale = p.tensor(layer.first_param + 2);
        let g = layer_grads(p, layer, grads);
        let (dscale, dshift) = g.norm.expect("blocks are normalized");
        let (h, w) = (cache.in_h, cache.in_w);
        let (oh, ow) = match layer.kind {
            LayerKind::Conv { stride } => (conv_out_dim(h, stride), conv_out_dim(w, stride)),
            _ => (2 * h, 2 * w),
        };
        ops::relu_backward_in_place(&mut dy, &cache.out);
        let dz = ops::group_norm_backward(&dy, &cache.norm, layer.cout, oh * ow, scale, dscale, dshift);
        match (layer.kind, cache.saved) {
            (LayerKind::Conv { stride }, Saved::Conv { col }) => ops::conv3x3_backward(
                &dz, &col, layer.cin, h, w, stride, weight, layer.cout, g.weight, g.bias, need_dx,
            ),
            (LayerKind::UpConv, Saved::Up { input }) => {
                ops::conv_transpose3x3_backward(&dz, &input, layer.cin, h, w, weight, layer.cout, g.weight, g.bias)
            }
            _ => unreachable!("cache kind matches layer kind"),
        }
    }

    fn forward(&self, image: &GrayImage, keep: bool) -> Result<(HeadLogits<T>, Option<Tape<T>>)> {
        self.check_input(image)?;
        let depth = self.cfg.depth;
        let layers = &self.arch.layers;
        let mut blocks = Vec::new();
        let mut cursor = 0;
        let mut run = |x: &[T], h: usize, w: usize, cursor: &mut usize| {
            let (y, oh, ow, cache) = self.block_forward(&layers[*cursor], x, h, w, keep);
            if let Some(c) = cache {
                blocks.push(c);
            }
            *cursor += 1;
            (y, oh, ow)
        };

        let (mut h, mut w) = (self.cfg.in_h, self.cfg.in_w);
        let mut cur = input_planes::<T>(image);
        let mut skips = Vec::with_capacity(depth);
        for _ in 0..depth {
            let (y, _, _) = run(&cur, h, w, &mut cursor);
            let (y, _, _) = run(&y, h, w, &mut cursor);
            skips.push(y);
            let (y, oh, ow) = run(skips.last().unwrap(), h, w, &mut cursor);
            cur = y;
            (h, w) = (oh, ow);
        }
        let (y, _, _) = run(&cur, h, w, &mut cursor);
        let (y, _, _) = run(&y, h, w, &mut cursor);
        cur = y;
        for _ in (0..depth).rev() {
            let (mut up, oh, ow) = run(&cur, h, w, &mut cursor);
            (h, w) = (oh, ow);
            up.extend_from_slice(&skips.pop().unwrap());
            let (y, _, _) = run(&up, h, w, &mut cursor);
            let (y, _, _) = run(&y, h, w, &mut cursor);
            cur = y;
        }

        let p = h * w;
        let trunk_channels = self.cfg.channels(0);
        let mut outs = Vec::with_capacity(3);
        for layer in &layers[cursor..] {
            let weight = self.params.tensor(layer.first_param);
            let bias = self.params.tensor(layer.first_param + 1);
            outs.push(ops::conv1x1(&cur, trunk_channels, p, weight, bias, layer.cout));
        }
        let erosion = outs.pop().unwrap();
        let narrowing = outs.pop().unwrap();
        let seg = outs.pop().unwrap();
        let logits = HeadLogits {
            height: h,
            width: w,
            seg,
            narrowing,
            erosion,
        };
        let tape = keep.then_some(Tape {
            blocks,
            trunk_out: cur,
        });
        Ok((logits, tape))
    }

    fn backward(&self, tape: Tape<T>, dlogits: &HeadLogits<T>) -> Vec<T> {
        let params = self.params;
        let layers = &self.arch.layers;
        let depth = self.cfg.depth;
        let mut grads = vec![T::zero(); params.len()];
        let p = dlogits.pixels();
        let trunk_channels = self.cfg.channels(0);
        let n_blocks = layers.len() - 3;

        let mut dcur = vec![T::zero(); trunk_channels * p];
        for (layer, dy) in layers[n_blocks..]
            .iter()
            .zip([&dlogits.seg, &dlogits.narrowing, &dlogits.erosion])
        {
            let weight = params.tensor(layer.first_param);
            let g = layer_grads(params, layer, &mut grads);
            ops::conv1x1_backward(dy, &tape.trunk_out, trunk_channels, p, weight, layer.cout, g.weight, g.bias, &mut dcur);
        }

        let mut blocks = tape.blocks;
        let mut idx = n_blocks;
        let mut step = |dy: Vec<T>, grads: &mut [T], need_dx: bool| {
            idx -= 1;
            let cache = blocks.pop().expect("one cache per block");
            self.block_backward(&layers[idx], cache, dy, grads, need_dx)
        };

        let mut dskips = Vec::with_capacity(depth);
        for level in 0..depth {
            let c = self.cfg.channels(level);
            let d = step(dcur, &mut grads, true); // conv2
            let dcat = step(d, &mut grads, true); // conv1
            let half = dcat.len() / 2;
            debug_assert_eq!(half % c, 0);
            dskips.push(dcat[half..].to_vec());
            dcur = step(dcat[..half].to_vec(), &mut grads, true); // up
        }
        let d = step(dcur, &mut grads, true); // mid.conv2
        dcur = step(d, &mut grads, true); // mid.conv1
        for level in (0..depth).rev() {
            let mut d = step(dcur, &mut grads, true); // down
            let dskip = dskips.pop().unwrap();
            for (a, b) in d.iter_mut().zip(&dskip) {
                *a = *a + *b;
            }
            let d = step(d, &mut grads, true); // conv2
            dcur = step(d, &mut grads, level > 0); // conv1
        }
        debug_assert_eq!(idx, 0);
        grads
    }
}

/// Runs the network on one image.
pub fn forward<T: Scalar>(params: &NetworkParams<T>, image: &GrayImage) -> Result<HeadLogits<T>> {
    Net::new(params).forward(image, false).map(|(logits, _)| logits)
}

/// Loss terms and exact gradients of the total loss, aligned with
/// `params.flat()`.
pub fn gradients<T: Scalar>(
    params: &NetworkParams<T>,
    image: &GrayImage,
    targets: &PixelTargets,
    weights: &LossWeights,
) -> Result<(LossTerms, Vec<T>)> {
    let net = Net::new(params);
    let (logits, tape) = net.forward(image, true)?;
    let (terms, dlogits) = loss_and_logit_grads(&logits, targets, weights)?;
    let grads = net.backward(tape.expect("tape kept"), &dlogits);
    Ok((terms, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn default_output_shapes() {
        let cfg = NetworkConfig::default();
        let params = init_params(&cfg, 1).unwrap();
        let img = GrayImage::from_fn(64, 64, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let out = forward(&params, &img).unwrap();
        assert_eq!(out.seg.len(), 22 * 64 * 64);
        assert_eq!(out.narrowing.len(), 5 * 64 * 64);
        assert_eq!(out.erosion.len(), 6 * 64 * 64);
        assert!(out.seg.iter().chain(&out.narrowing).chain(&out.erosion).all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_size_is_shape_mismatch() {
        let params = init_params(&NetworkConfig::default(), 1).unwrap();
        assert!(matches!(forward(&params, &GrayImage::zeros(32, 64)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn coordinate_planes_hit_exact_endpoints() {
        let img = GrayImage::zeros(8, 16);
        let x = input_planes::<f32>(&img);
        let p = 8 * 16;
        let xs = &x[p..2 * p];
        let ys = &x[2 * p..];
        assert_eq!((xs[0], xs[15], xs[p - 16], xs[p - 1]), (0.0, 1.0, 0.0, 1.0));
        assert_eq!((ys[0], ys[15], ys[p - 16], ys[p - 1]), (0.0, 0.0, 1.0, 1.0));
    }
}
