//! One encoder-decoder sub-network over a flat parameter vector.

use super::layers::{
    avg_pool2, avg_pool2_backward, conv_backward, conv_forward, leaky_relu, leaky_relu_backward,
    upsample2, upsample2_backward, Tensor,
};
use super::ArchConfig;

/// Location of one convolution inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub offset: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset + self.weight_len()..self.offset + self.param_len()]
    }

    fn grads<'a>(&self, g: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let (w, b) = g[self.offset..self.offset + self.param_len()].split_at_mut(self.weight_len());
        (w, b)
    }

    fn forward(&self, p: &[f64], x: &Tensor) -> Tensor {
        conv_forward(x, self.weights(p), self.bias(p), self.cout, self.k)
    }

    fn backward(&self, p: &[f64], x: &Tensor, grad_out: &Tensor, grad: &mut [f64]) -> Tensor {
        let (gw, gb) = self.grads(grad);
        conv_backward(x, self.weights(p), grad_out, gw, gb, self.k)
    }
}

/// Two 3×3 convolutions with an optional additive shortcut.
///
/// The shortcut is the identity when channel counts agree and a 1×1
/// projection otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub conv_a: ConvSpec,
    pub conv_b: ConvSpec,
    pub shortcut: Shortcut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    None,
    Identity,
    Projection(ConvSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    pub encoder: Vec<BlockSpec>,
    /// Indexed by level: `decoder[0]` produces full resolution.
    pub decoder: Vec<BlockSpec>,
    pub output: ConvSpec,
    pub len: usize,
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvSpec {
        let spec = ConvSpec {
            cin,
            cout,
            k,
            offset: self.0,
        };
        self.0 += spec.param_len();
        spec
    }

    fn block(&mut self, cin: usize, cout: usize, use_shortcut: bool) -> BlockSpec {
        let conv_a = self.conv(cin, cout, 3);
        let conv_b = self.conv(cout, cout, 3);
        let shortcut = match (use_shortcut, cin == cout) {
            (false, _) => Shortcut::None,
            (true, true) => Shortcut::Identity,
            (true, false) => Shortcut::Projection(self.conv(cin, cout, 1)),
        };
        BlockSpec {
            conv_a,
            conv_b,
            shortcut,
        }
    }
}

impl HeadLayout {
    /// Parameters are laid out encoder blocks first (shallow to deep),
    /// then decoder blocks (deep to shallow), then the output convolution.
    pub fn new(cfg: &ArchConfig) -> Self {
        let levels = cfg.num_enc_blocks;
        let channels: Vec<usize> = (0..levels).map(|l| cfg.channels_at(l)).collect();
        let mut alloc = Alloc(0);
        let mut encoder = Vec::with_capacity(levels);
        let mut cin = super::INPUT_CHANNELS;
        for &c in &channels {
            encoder.push(alloc.block(cin, c, cfg.use_shortcut));
            cin = c;
        }
        let mut decoder: Vec<Option<BlockSpec>> = vec![None; levels];
        for l in (0..levels).rev() {
            let below = channels[(l + 1).min(levels - 1)];
            let cin = below + if cfg.use_skip { channels[l] } else { 0 };
            decoder[l] = Some(alloc.block(cin, channels[l], cfg.use_shortcut));
        }
        let output = alloc.conv(channels[0], super::OUTPUT_CHANNELS, 1);
        Self {
            encoder,
            decoder: decoder.into_iter().map(Option::unwrap).collect(),
            output,
            len: alloc.0,
        }
    }

    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let mut visit = |b: &BlockSpec| {
            out.push(b.conv_a);
            out.push(b.conv_b);
            if let Shortcut::Projection(p) = b.shortcut {
                out.push(p);
            }
        };
        self.encoder.iter().for_each(&mut visit);
        self.decoder.iter().rev().for_each(&mut visit);
        out.push(self.output);
        out.sort_by_key(|c| c.offset);
        out
    }
}

struct BlockCache {
    input: Tensor,
    pre_a: Tensor,
    act_a: Tensor,
    pre_out: Tensor,
}

fn block_forward(spec: &BlockSpec, p: &[f64], x: Tensor) -> (Tensor, BlockCache) {
    let pre_a = spec.conv_a.forward(p, &x);
    let act_a = leaky_relu(&pre_a);
    let mut pre_out = spec.conv_b.forward(p, &act_a);
    match spec.shortcut {
        Shortcut::None => {}
        Shortcut::Identity => pre_out.add_assign(&x),
        Shortcut::Projection(proj) => pre_out.add_assign(&proj.forward(p, &x)),
    }
    let out = leaky_relu(&pre_out);
    (
        out,
        BlockCache {
            input: x,
            pre_a,
            act_a,
            pre_out,
        },
    )
}

fn block_backward(
    spec: &BlockSpec,
    p: &[f64],
    cache: &BlockCache,
    mut grad_out: Tensor,
    grad: &mut [f64],
) -> Tensor {
    leaky_relu_backward(&cache.pre_out, &mut grad_out);
    let mut grad_a = spec.conv_b.backward(p, &cache.act_a, &grad_out, grad);
    leaky_relu_backward(&cache.pre_a, &mut grad_a);
    let mut grad_in = spec.conv_a.backward(p, &cache.input, &grad_a, grad);
    match spec.shortcut {
        Shortcut::None => {}
        Shortcut::Identity => grad_in.add_assign(&grad_out),
        Shortcut::Projection(proj) => {
            grad_in.add_assign(&proj.backward(p, &cache.input, &grad_out, grad))
        }
    }
    grad_in
}

/// Activations retained for the backward pass.
pub struct HeadCache {
    encoder: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
    skip_channels: Vec<usize>,
    decoded: Tensor,
}

/// Runs one head, returning the pre-activation output logits (3 channels).
pub fn head_forward(
    layout: &HeadLayout,
    use_skip: bool,
    p: &[f64],
    input: Tensor,
) -> (Tensor, HeadCache) {
    let levels = layout.encoder.len();
    let mut enc_caches = Vec::with_capacity(levels);
    let mut skips = Vec::with_capacity(levels);
    let mut x = input;
    for spec in &layout.encoder {
        let (y, cache) = block_forward(spec, p, x);
        x = avg_pool2(&y);
        enc_caches.push(cache);
        skips.push(y);
    }
    let mut dec_caches: Vec<Option<BlockCache>> = (0..levels).map(|_| None).collect();
    let mut skip_channels = vec![0; levels];
    for l in (0..levels).rev() {
        let up = upsample2(&x);
        let skip = std::mem::replace(&mut skips[l], Tensor::zeros(0, 0, 0));
        let block_in = if use_skip {
            skip_channels[l] = skip.c;
            up.concat(&skip)
        } else {
            up
        };
        let (y, cache) = block_forward(&layout.decoder[l], p, block_in);
        dec_caches[l] = Some(cache);
        x = y;
    }
    let logits = layout.output.forward(p, &x);
    (
        logits,
        HeadCache {
            encoder: enc_caches,
            decoder: dec_caches.into_iter().map(Option::unwrap).collect(),
            skip_channels,
            decoded: x,
        },
    )
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
pub fn head_backward(
    layout: &HeadLayout,
    p: &[f64],
    cache: &HeadCache,
    grad_logits: &Tensor,
    grad: &mut [f64],
) {
    let levels = layout.encoder.len();
    let mut g = layout.output.backward(p, &cache.decoded, grad_logits, grad);
    let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for (l, slot) in skip_grads.iter_mut().enumerate() {
        let g_in = block_backward(&layout.decoder[l], p, &cache.decoder[l], g, grad);
        let (g_up, g_skip) = if cache.skip_channels[l] > 0 {
            let below = g_in.c - cache.skip_channels[l];
            let (u, s) = g_in.split_channels(below);
            (u, Some(s))
        } else {
            (g_in, None)
        };
        *slot = g_skip;
        g = upsample2_backward(&g_up);
    }
    // `g` is now the gradient w.r.t. the pooled output of the deepest encoder block.
    for l in (0..levels).rev() {
        let mut g_out = avg_pool2_backward(&g);
        if let Some(s) = skip_grads[l].take() {
            g_out.add_assign(&s);
        }
        g = block_backward(&layout.encoder[l], p, &cache.encoder[l], g_out, grad);
    }
}
