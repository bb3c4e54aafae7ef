//! Plain convolutional discriminator.
//!
//! Besides the usual logit head it can emit its own input gradient as a
//! differentiable graph (`logits_and_input_grad_t`): the backward chain is
//! spelled out with `conv2d_transpose` / mask products over the recorded
//! weights, so the R1 penalty built from that gradient back-propagates into
//! the weights with a single reverse pass.

use super::GeneratorConfig;
use crate::ad::{Arr, ParamId, ParamStore, Registrar, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{stack_batch, ImageTensor};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

const SLOPE: f64 = 0.2;

struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

struct DBlock {
    level: usize,
    conv_a: ConvLayer, // stride 1, keeps level
    conv_b: ConvLayer, // stride 2, level -> level/2
}

pub struct Discriminator {
    resolution: usize,
    from_rgb: ConvLayer,
    blocks: Vec<DBlock>,
    lin1_w: ParamId,
    lin1_b: ParamId,
    lin2_w: ParamId,
    lin2_b: ParamId,
    ids: Vec<ParamId>,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registrar::new(store, rng, prefix);
        let res = cfg.output_resolution;
        let from_rgb = conv_layer(&mut reg, "from_rgb", 3, cfg.channels(res), 1, 1, 0);
        let mut blocks = Vec::new();
        let mut level = res;
        while level >= 8 {
            let (ci, co) = (cfg.channels(level), cfg.channels(level / 2));
            blocks.push(DBlock {
                level,
                conv_a: conv_layer(&mut reg, &format!("b{level}/conv_a"), ci, ci, 3, 1, 1),
                conv_b: conv_layer(&mut reg, &format!("b{level}/conv_b"), ci, co, 3, 2, 1),
            });
            level /= 2;
        }
        let c4 = cfg.channels(4);
        let flat = c4 * 16;
        let lin1_w = reg.normal("lin1/w", &[c4, flat], (2.0 / flat as f64).sqrt());
        let lin1_b = reg.zeros("lin1/b", &[c4]);
        let lin2_w = reg.normal("lin2/w", &[1, c4], (1.0 / c4 as f64).sqrt());
        let lin2_b = reg.zeros("lin2/b", &[1]);
        let ids = reg.finish();
        Ok(Discriminator {
            resolution: res,
            from_rgb,
            blocks,
            lin1_w,
            lin1_b,
            lin2_w,
            lin2_b,
            ids,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn check_res(&self, img_shape: &[usize]) -> Result<()> {
        if img_shape.len() != 4 || img_shape[1] != 3 || img_shape[2] != self.resolution
            || img_shape[3] != self.resolution
        {
            return Err(Error::domain(format!(
                "discriminator expects [b, 3, {r}, {r}], got {img_shape:?}",
                r = self.resolution
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every pre-activation value; shared by the logit
    /// head and the hand-built backward chain.
    fn forward_parts(&self, t: &Tape, ps: &ParamStore, img: Var) -> (Var, Vec<Var>) {
        let mut pre_acts = Vec::new();
        let mut apply = |layer: &ConvLayer, x: Var| -> Var {
            let y = t.conv2d(x, t.param(ps, layer.weight), layer.stride, layer.pad);
            let y = t.add_bias_ch(y, t.param(ps, layer.bias));
            pre_acts.push(y);
            t.leaky_relu(y, SLOPE)
        };
        let mut x = apply(&self.from_rgb, img);
        for block in &self.blocks {
            x = apply(&block.conv_a, x);
            x = apply(&block.conv_b, x);
        }
        let sh = t.shape(x);
        let flat = t.reshape(x, &[sh[0], sh[1] * sh[2] * sh[3]]);
        let h = t.linear(flat, t.param(ps, self.lin1_w), t.param(ps, self.lin1_b));
        pre_acts.push(h);
        let h = t.leaky_relu(h, SLOPE);
        let logits = t.linear(h, t.param(ps, self.lin2_w), t.param(ps, self.lin2_b));
        let b = t.shape(logits)[0];
        (t.reshape(logits, &[b]), pre_acts)
    }

    /// Realness logits, one per batch row.
    pub fn logits_t(&self, t: &Tape, ps: &ParamStore, img: Var) -> Var {
        self.forward_parts(t, ps, img).0
    }

    fn slope_mask(pre: &Arr) -> Arr {
        pre.mapv(|v| if v >= 0.0 { 1.0 } else { SLOPE })
    }

    /// Logits plus `d(sum of logits)/d(img)` built from differentiable ops,
    /// so penalties on the gradient itself remain trainable.
    pub fn logits_and_input_grad_t(&self, t: &Tape, ps: &ParamStore, img: Var) -> (Var, Var) {
        let (logits, pre_acts) = self.forward_parts(t, ps, img);
        let batch = t.shape(img)[0];

        // reverse through lin2: d/dh = broadcast of the weight row
        let ones = t.constant(Array2::<f64>::ones((batch, 1)).into_dyn());
        let mut g = t.matmul(ones, t.param(ps, self.lin2_w)); // [b, c4]
        // lin1 activation mask, then lin1
        let mut pre_iter = pre_acts.iter().rev();
        let lin1_pre = *pre_iter.next().unwrap();
        g = t.mul_mask(g, Self::slope_mask(&t.value(lin1_pre)));
        g = t.matmul(g, t.param(ps, self.lin1_w)); // [b, flat]
        let flat = t.shape(g)[1];
        g = t.reshape(g, &[batch, flat / 16, 4, 4]);

        // conv blocks in reverse
        for block in self.blocks.iter().rev() {
            let b_pre = *pre_iter.next().unwrap();
            g = t.mul_mask(g, Self::slope_mask(&t.value(b_pre)));
            g = t.conv2d_transpose(
                g,
                t.param(ps, block.conv_b.weight),
                block.conv_b.stride,
                block.conv_b.pad,
                (block.level, block.level),
            );
            let a_pre = *pre_iter.next().unwrap();
            g = t.mul_mask(g, Self::slope_mask(&t.value(a_pre)));
            g = t.conv2d_transpose(
                g,
                t.param(ps, block.conv_a.weight),
                block.conv_a.stride,
                block.conv_a.pad,
                (block.level, block.level),
            );
        }
        let rgb_pre = *pre_iter.next().unwrap();
        g = t.mul_mask(g, Self::slope_mask(&t.value(rgb_pre)));
        g = t.conv2d_transpose(
            g,
            t.param(ps, self.from_rgb.weight),
            self.from_rgb.stride,
            self.from_rgb.pad,
            (self.resolution, self.resolution),
        );
        (logits, g)
    }

    /// Plain scalar score for a single image.
    pub fn score(&self, ps: &ParamStore, img: &ImageTensor) -> Result<f64> {
        Ok(self.scores(ps, &[img])?[0])
    }

    pub fn scores(&self, ps: &ParamStore, imgs: &[&ImageTensor]) -> Result<Vec<f64>> {
        let batch = stack_batch(imgs)?;
        self.check_res(batch.shape())?;
        let t = Tape::new();
        let v = t.constant(batch);
        let logits = self.logits_t(&t, ps, v);
        Ok(t.value(logits).iter().copied().collect())
    }
}

fn conv_layer(
    reg: &mut Registrar,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ConvLayer {
    ConvLayer {
        weight: reg.normal(
            &format!("{name}/weight"),
            &[co, ci, k, k],
            (2.0 / (ci * k * k) as f64).sqrt(),
        ),
        bias: reg.zeros(&format!("{name}/bias"), &[co]),
        stride,
        pad,
    }
}
