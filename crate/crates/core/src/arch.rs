//! Mixed-dense connection network.
//!
//! A dual-link unit runs one 3×3 conv + ReLU producing `F + K` channels. The
//! first `F` are added onto the last `F` channels of its input (residual
//! link) and the remaining `K` are appended (dense link), so an `MDCB` of
//! `n` units grows its width `F -> F + n·K` before a 1×1 fusion conv folds it
//! back to `F` and a block-level skip adds the block input.
//!
//! The full model is `head (2 convs) -> MDCBs -> expand conv -> pixel
//! shuffle -> output conv`. Higher power-of-two factors reuse one ×2
//! parameter set by feeding each output back in as the next input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffle::{pixel_shuffle, pixel_shuffle_backward};
use crate::tensor::{add, relu, relu_backward, Shape, Tensor};

/// Channels per RGB frame.
pub const RGB: usize = 3;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Base channel count `F`.
    pub feat: usize,
    /// Growth rate `K`.
    pub growth: usize,
    pub blocks: usize,
    /// Dual-link units per block.
    pub units: usize,
    /// Target factor the parameters were trained for: 2, 3, 4 or 8.
    pub scale: u32,
    /// 3 for images, 15 for five-frame early fusion.
    pub in_channels: usize,
    /// Add head features to the body output before reconstruction.
    pub global_skip: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetConfig {
    /// F=64, K=36, 12 blocks of 6 units, ×2.
    pub const fn reference() -> Self {
        NetConfig {
            feat: 64,
            growth: 36,
            blocks: 12,
            units: 6,
            scale: 2,
            in_channels: RGB,
            global_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat == 0 || self.growth == 0 || self.blocks == 0 || self.units == 0 {
            return Err(Error::Config(format!(
                "feat, growth, blocks and units must be positive: {self:?}"
            )));
        }
        if !matches!(self.scale, 2 | 3 | 4 | 8) {
            return Err(Error::UnsupportedFactor {
                factor: self.scale,
                detail: "model scale must be one of 2, 3, 4, 8".into(),
            });
        }
        if self.in_channels == 0 || !self.in_channels.is_multiple_of(RGB) {
            return Err(Error::Config(format!(
                "in_channels must be a positive multiple of 3, got {}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Sub-pixel factor of the reconstruction tail.
    pub fn subpixel_factor(&self) -> usize {
        if self.scale == 3 {
            3
        } else {
            2
        }
    }

    /// Input width of unit `i` (0-based): `F + i·K`.
    pub fn unit_input_width(&self, i: usize) -> usize {
        self.feat + i * self.growth
    }

    /// Block width just before the fusion conv: `F + n·K`.
    pub fn fusion_width(&self) -> usize {
        self.unit_input_width(self.units)
    }

    /// `F, F+K, …, F+n·K`.
    pub fn width_schedule(&self) -> Vec<usize> {
        (0..=self.units).map(|i| self.unit_input_width(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualLinkUnitParams<T> {
    /// 3×3, `C_in -> F + K`.
    pub conv: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdcbParams<T> {
    pub units: Vec<DualLinkUnitParams<T>>,
    /// 1×1, `F + n·K -> F`, no activation.
    pub fusion: ConvParams<T>,
}

impl<T: Scalar> MdcbParams<T> {
    pub fn feat(&self) -> usize {
        self.fusion.c_out()
    }
}

/// Every trainable tensor of one network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetConfig,
    pub head: [ConvParams<T>; 2],
    pub blocks: Vec<MdcbParams<T>>,
    /// `F -> r²·F`, followed by ReLU and the pixel shuffle.
    pub tail_expand: ConvParams<T>,
    /// `F -> 3` at HR resolution, no activation.
    pub tail_out: ConvParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds the layer stack for `config` with every tensor produced by `make`.
    fn build(
        config: NetConfig,
        mut make: impl FnMut(usize, usize, usize) -> ConvParams<T>,
    ) -> Result<Self> {
        config.validate()?;
        let (f, k) = (config.feat, config.growth);
        let r = config.subpixel_factor();
        let head = [make(config.in_channels, f, 3), make(f, f, 3)];
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let units = (0..config.units)
                .map(|i| DualLinkUnitParams {
                    conv: make(config.unit_input_width(i), f + k, 3),
                })
                .collect();
            let fusion = make(config.fusion_width(), f, 1);
            blocks.push(MdcbParams { units, fusion });
        }
        let tail_expand = make(f, r * r * f, 3);
        let tail_out = make(f, RGB, 3);
        let params = ModelParams {
            config,
            head,
            blocks,
            tail_expand,
            tail_out,
        };
        params.check_channel_accounting()?;
        Ok(params)
    }

    /// Seeded fan-in uniform initialisation. Same seed and config give
    /// bit-identical parameters.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |ci, co, k| ConvParams::init_uniform(ci, co, k, &mut rng))
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        Self::build(config, ConvParams::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Asserts the per-block width law `F + i·K` and the fusion width.
    pub fn check_channel_accounting(&self) -> Result<()> {
        let cfg = &self.config;
        let fail = |what: String| Err(Error::dim("channel_accounting", what));
        if self.blocks.len() != cfg.blocks {
            return fail(format!("{} blocks, config says {}", self.blocks.len(), cfg.blocks));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.units.len() != cfg.units {
                return fail(format!("block {b} has {} units", block.units.len()));
            }
            for (i, unit) in block.units.iter().enumerate() {
                if unit.conv.c_in() != cfg.unit_input_width(i)
                    || unit.conv.c_out() != cfg.feat + cfg.growth
                {
                    return fail(format!(
                        "block {b} unit {i} maps {} -> {}, expected {} -> {}",
                        unit.conv.c_in(),
                        unit.conv.c_out(),
                        cfg.unit_input_width(i),
                        cfg.feat + cfg.growth
                    ));
                }
            }
            if block.fusion.c_in() != cfg.fusion_width() || block.fusion.c_out() != cfg.feat {
                return fail(format!(
                    "block {b} fusion maps {} -> {}, expected {} -> {}",
                    block.fusion.c_in(),
                    block.fusion.c_out(),
                    cfg.fusion_width(),
                    cfg.feat
                ));
            }
        }
        Ok(())
    }

    fn conv_names(&self) -> Vec<String> {
        let mut names = vec!["head.0".to_string(), "head.1".to_string()];
        for (b, block) in self.blocks.iter().enumerate() {
            for u in 0..block.units.len() {
                names.push(format!("blocks.{b}.units.{u}"));
            }
            names.push(format!("blocks.{b}.fusion"));
        }
        names.push("tail.expand".into());
        names.push("tail.out".into());
        names
    }

    fn convs(&self) -> Vec<&ConvParams<T>> {
        let mut out: Vec<&ConvParams<T>> = self.head.iter().collect();
        for block in &self.blocks {
            out.extend(block.units.iter().map(|u| &u.conv));
            out.push(&block.fusion);
        }
        out.push(&self.tail_expand);
        out.push(&self.tail_out);
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out: Vec<&mut ConvParams<T>> = self.head.iter_mut().collect();
        for block in &mut self.blocks {
            out.extend(block.units.iter_mut().map(|u| &mut u.conv));
            out.push(&mut block.fusion);
        }
        out.push(&mut self.tail_expand);
        out.push(&mut self.tail_out);
        out
    }

    /// `(name, tensor)` pairs in deterministic order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.conv_names()
            .into_iter()
            .zip(self.convs())
            .flat_map(|(name, c)| {
                [
                    (format!("{name}.weight"), &c.weight),
                    (format!("{name}.bias"), &c.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        ModelParams {
            config: self.config,
            head: [cast(&self.head[0]), cast(&self.head[1])],
            blocks: self
                .blocks
                .iter()
                .map(|b| MdcbParams {
                    units: b
                        .units
                        .iter()
                        .map(|u| DualLinkUnitParams { conv: cast(&u.conv) })
                        .collect(),
                    fusion: cast(&b.fusion),
                })
                .collect(),
            tail_expand: cast(&self.tail_expand),
            tail_out: cast(&self.tail_out),
        }
    }

    /// Warm-start copy for a new target scale and/or input width.
    ///
    /// Head and body weights carry over. A change of sub-pixel factor (×3)
    /// re-initialises the expand conv from `seed`. Widening the input from 3
    /// to `3·m` channels replicates the first-layer RGB weights `m` times,
    /// divided by `m`, so five identical frames reproduce the image model.
    pub fn retarget(&self, scale: u32, in_channels: usize, seed: u64) -> Result<Self> {
        let config = NetConfig {
            scale,
            in_channels,
            ..self.config
        };
        config.validate()?;
        let mut out = self.clone();
        out.config = config;
        if config.subpixel_factor() != self.config.subpixel_factor() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = config.subpixel_factor();
            out.tail_expand = ConvParams::init_uniform(config.feat, r * r * config.feat, 3, &mut rng);
        }
        if in_channels != self.config.in_channels {
            let old = &self.head[0].weight;
            let src_c = old.shape().c;
            if !in_channels.is_multiple_of(src_c) {
                return Err(Error::Config(format!(
                    "cannot widen {src_c} input channels to {in_channels}"
                )));
            }
            let copies = in_channels / src_c;
            let inv = T::lit(1.0 / copies as f64);
            let s = old.shape();
            out.head[0].weight = Tensor::from_fn(Shape::new(s.n, in_channels, s.h, s.w), |o, c, i, j| {
                old.at(o, c % src_c, i, j) * inv
            });
        }
        Ok(out)
    }
}

/// One row of a parameter table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> ParamTable {
    let rows: Vec<ParamRow> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| ParamRow {
            name,
            shape: t.shape(),
            count: t.len(),
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    ParamTable { rows, total }
}

// ---------------------------------------------------------------------------
// Dual-link unit

/// Forward-pass state a dual-link unit needs for its backward pass.
#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    input: Tensor<T>,
    /// Post-ReLU conv output, `F + K` channels.
    act: Tensor<T>,
}

fn check_dual_link<T: Scalar>(
    x: Shape,
    unit: &DualLinkUnitParams<T>,
    feat: usize,
    growth: usize,
) -> Result<()> {
    if x.c < feat {
        return Err(Error::dim(
            "dual_link_forward",
            format!("input {x} has fewer than F = {feat} channels"),
        ));
    }
    if unit.conv.c_out() != feat + growth {
        return Err(Error::dim(
            "dual_link_forward",
            format!("unit produces {} channels, F + K = {}", unit.conv.c_out(), feat + growth),
        ));
    }
    Ok(())
}

/// `concat(x[..C-F], x[C-F..] + y[..F], y[F..])` with `y = relu(conv(x))`.
fn route<T: Scalar>(x: &Tensor<T>, act: &Tensor<T>, feat: usize) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let growth = act.shape().c - feat;
    let out_shape = s.with_c(s.c + growth);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        let xi = x.item(n);
        let yi = act.item(n);
        out.extend_from_slice(xi);
        let start = n * out_shape.c * plane + (s.c - feat) * plane;
        for (o, &y) in out[start..].iter_mut().zip(&yi[..feat * plane]) {
            *o += y;
        }
        out.extend_from_slice(&yi[feat * plane..]);
    }
    Tensor::from_vec(out_shape, out).expect("routed shape")
}

fn dual_link_cached<T: Scalar>(
    x: Tensor<T>,
    unit: &DualLinkUnitParams<T>,
    feat: usize,
    growth: usize,
) -> Result<(Tensor<T>, UnitCache<T>)> {
    check_dual_link(x.shape(), unit, feat, growth)?;
    let act = relu(&conv2d(&x, &unit.conv, 1)?);
    let out = route(&x, &act, feat);
    Ok((out, UnitCache { input: x, act }))
}

/// `N×C×H×W -> N×(C+K)×H×W`.
pub fn dual_link_forward<T: Scalar>(
    x: &Tensor<T>,
    unit: &DualLinkUnitParams<T>,
    feat: usize,
    growth: usize,
) -> Result<Tensor<T>> {
    check_dual_link(x.shape(), unit, feat, growth)?;
    let act = relu(&conv2d(x, &unit.conv, 1)?);
    Ok(route(x, &act, feat))
}

/// Returns the input gradient; accumulates parameter gradients into `grad`.
fn dual_link_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &UnitCache<T>,
    unit: &DualLinkUnitParams<T>,
    grad: &mut DualLinkUnitParams<T>,
) -> Result<Tensor<T>> {
    let s = cache.input.shape();
    let feat = unit.conv.c_out() - (grad_out.shape().c - s.c);
    let plane = s.plane();
    let ya = cache.act.shape();
    let out_c = grad_out.shape().c;
    // Gradient reaching the activations: the residual slot and the appended slot.
    let mut g_act = Vec::with_capacity(ya.numel());
    let mut g_x = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        let g = grad_out.item(n);
        g_act.extend_from_slice(&g[(s.c - feat) * plane..out_c * plane]);
        g_x.extend_from_slice(&g[..s.c * plane]);
    }
    let g_act = relu_backward(&Tensor::from_vec(ya, g_act)?, &cache.act)?;
    let conv_grads = conv2d_backward(&g_act, &cache.input, &unit.conv, 1)?;
    grad.conv.weight.add_assign(&conv_grads.weight)?;
    grad.conv.bias.add_assign(&conv_grads.bias)?;
    let mut g_x = Tensor::from_vec(s, g_x)?;
    g_x.add_assign(&conv_grads.input)?;
    Ok(g_x)
}

fn zeroed_conv<T: Scalar>(c: &ConvParams<T>) -> ConvParams<T> {
    ConvParams::zeros(c.c_in(), c.c_out(), c.kernel())
}

/// Input and parameter gradients of [`dual_link_forward`] for `grad_out`.
pub fn dual_link_vjp<T: Scalar>(
    x: &Tensor<T>,
    unit: &DualLinkUnitParams<T>,
    feat: usize,
    growth: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, DualLinkUnitParams<T>)> {
    let (out, cache) = dual_link_cached(x.clone(), unit, feat, growth)?;
    if grad_out.shape() != out.shape() {
        return Err(Error::dim("dual_link_vjp", format!("grad {} vs output {}", grad_out.shape(), out.shape())));
    }
    let mut grad = DualLinkUnitParams { conv: zeroed_conv(&unit.conv) };
    let gx = dual_link_backward(grad_out, &cache, unit, &mut grad)?;
    Ok((gx, grad))
}

// ---------------------------------------------------------------------------
// Mixed-dense connection block

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    units: Vec<UnitCache<T>>,
    /// `F + n·K` channels, input to the fusion conv.
    dense: Tensor<T>,
}

fn block_dims<T: Scalar>(block: &MdcbParams<T>) -> (usize, usize) {
    let feat = block.feat();
    let growth = block.units.first().map_or(0, |u| u.conv.c_out() - feat);
    (feat, growth)
}

fn mdcb_cached<T: Scalar>(x: &Tensor<T>, block: &MdcbParams<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (feat, growth) = block_dims(block);
    if x.shape().c != feat {
        return Err(Error::dim(
            "mdcb_forward",
            format!("input {} must have exactly F = {feat} channels", x.shape()),
        ));
    }
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(block.units.len());
    for unit in &block.units {
        let (next, cache) = dual_link_cached(h, unit, feat, growth)?;
        caches.push(cache);
        h = next;
    }
    debug_assert_eq!(h.shape().c, feat + block.units.len() * growth);
    let fused = conv2d(&h, &block.fusion, 0)?;
    let out = add(x, &fused)?;
    Ok((out, BlockCache { units: caches, dense: h }))
}

/// `N×F×H×W -> N×F×H×W`.
pub fn mdcb_forward<T: Scalar>(x: &Tensor<T>, block: &MdcbParams<T>) -> Result<Tensor<T>> {
    mdcb_cached(x, block).map(|(out, _)| out)
}

fn mdcb_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BlockCache<T>,
    block: &MdcbParams<T>,
    grad: &mut MdcbParams<T>,
) -> Result<Tensor<T>> {
    let fusion = conv2d_backward(grad_out, &cache.dense, &block.fusion, 0)?;
    grad.fusion.weight.add_assign(&fusion.weight)?;
    grad.fusion.bias.add_assign(&fusion.bias)?;
    let mut g = fusion.input;
    for ((unit, c), gu) in block
        .units
        .iter()
        .zip(&cache.units)
        .zip(grad.units.iter_mut())
        .rev()
    {
        g = dual_link_backward(&g, c, unit, gu)?;
    }
    // block-level skip
    g.add_assign(grad_out)?;
    Ok(g)
}

/// Input and parameter gradients of [`mdcb_forward`] for `grad_out`.
pub fn mdcb_vjp<T: Scalar>(
    x: &Tensor<T>,
    block: &MdcbParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, MdcbParams<T>)> {
    let (out, cache) = mdcb_cached(x, block)?;
    if grad_out.shape() != out.shape() {
        return Err(Error::dim("mdcb_vjp", format!("grad {} vs output {}", grad_out.shape(), out.shape())));
    }
    let mut grad = MdcbParams {
        units: block
            .units
            .iter()
            .map(|u| DualLinkUnitParams { conv: zeroed_conv(&u.conv) })
            .collect(),
        fusion: zeroed_conv(&block.fusion),
    };
    let gx = mdcb_backward(grad_out, &cache, block, &mut grad)?;
    Ok((gx, grad))
}

// ---------------------------------------------------------------------------
// Full network

/// Activations retained by one forward pass of the network.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    head0: Tensor<T>,
    head1: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    body: Tensor<T>,
    expand: Tensor<T>,
    shuffled: Tensor<T>,
}

fn check_input<T: Scalar>(img: &Tensor<T>, params: &ModelParams<T>) -> Result<()> {
    let s = img.shape();
    if s.c != params.config.in_channels {
        return Err(Error::dim(
            "mdcn_forward",
            format!("input {s} but model expects {} channels", params.config.in_channels),
        ));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim("mdcn_forward", format!("empty input {s}")));
    }
    Ok(())
}

/// One ×r pass, keeping what the backward pass needs.
pub fn forward_cached<T: Scalar>(
    img: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_input(img, params)?;
    let r = params.config.subpixel_factor();
    let head0 = relu(&conv2d(img, &params.head[0], 1)?);
    let head1 = relu(&conv2d(&head0, &params.head[1], 1)?);
    let mut h = head1.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, cache) = mdcb_cached(&h, block)?;
        blocks.push(cache);
        h = next;
    }
    let body = if params.config.global_skip {
        add(&h, &head1)?
    } else {
        h
    };
    let expand = relu(&conv2d(&body, &params.tail_expand, 1)?);
    let shuffled = pixel_shuffle(&expand, r)?;
    let out = conv2d(&shuffled, &params.tail_out, 1)?;
    Ok((
        out,
        ForwardCache {
            input: img.clone(),
            head0,
            head1,
            blocks,
            body,
            expand,
            shuffled,
        },
    ))
}

/// Backpropagates one pass. Parameter gradients accumulate into `grad`;
/// the input gradient is returned.
pub fn backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ForwardCache<T>,
    params: &ModelParams<T>,
    grad: &mut ModelParams<T>,
) -> Result<Tensor<T>> {
    let r = params.config.subpixel_factor();
    let accum = |dst: &mut ConvParams<T>, w: &Tensor<T>, b: &Tensor<T>| -> Result<()> {
        dst.weight.add_assign(w)?;
        dst.bias.add_assign(b)
    };

    let g = conv2d_backward(grad_out, &cache.shuffled, &params.tail_out, 1)?;
    accum(&mut grad.tail_out, &g.weight, &g.bias)?;
    let g_expand = relu_backward(&pixel_shuffle_backward(&g.input, r)?, &cache.expand)?;
    let g = conv2d_backward(&g_expand, &cache.body, &params.tail_expand, 1)?;
    accum(&mut grad.tail_expand, &g.weight, &g.bias)?;

    let g_body = g.input;
    let mut g_h = g_body.clone();
    for ((block, c), gb) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        g_h = mdcb_backward(&g_h, c, block, gb)?;
    }
    if params.config.global_skip {
        g_h.add_assign(&g_body)?;
    }

    let g = relu_backward(&g_h, &cache.head1)?;
    let g = conv2d_backward(&g, &cache.head0, &params.head[1], 1)?;
    accum(&mut grad.head[1], &g.weight, &g.bias)?;
    let g = relu_backward(&g.input, &cache.head0)?;
    let g = conv2d_backward(&g, &cache.input, &params.head[0], 1)?;
    accum(&mut grad.head[0], &g.weight, &g.bias)?;
    Ok(g.input)
}

/// `N×in×H×W -> N×3×rH×rW`. Output is not clamped.
pub fn mdcn_forward<T: Scalar>(img: &Tensor<T>, params: &ModelParams<T>, r: usize) -> Result<Tensor<T>> {
    let own = params.config.subpixel_factor();
    if r != own {
        return Err(Error::UnsupportedFactor {
            factor: r as u32,
            detail: format!("parameters carry a x{own} sub-pixel tail"),
        });
    }
    forward_cached(img, params).map(|(out, _)| out)
}

/// Number of passes needed to reach `factor` with these parameters.
pub fn passes_for(config: &NetConfig, factor: u32) -> Result<usize> {
    match (config.subpixel_factor(), factor) {
        (3, 3) => Ok(1),
        (2, 2) => Ok(1),
        (2, 4) => Ok(2),
        (2, 8) => Ok(3),
        (r, f) => Err(Error::UnsupportedFactor {
            factor: f,
            detail: format!(
                "model has a x{r} tail (trained scale x{}); supported factors: {}",
                config.scale,
                if r == 3 { "3" } else { "2, 4, 8" }
            ),
        }),
    }
}

/// Builds the next pass input from a 3-channel estimate: for a multi-frame
/// head the estimate fills every frame slot.
fn recurrent_input<T: Scalar>(prev: &Tensor<T>, in_channels: usize) -> Result<Tensor<T>> {
    let copies = in_channels / RGB;
    if copies == 1 {
        return Ok(prev.clone());
    }
    let parts: Vec<&Tensor<T>> = std::iter::repeat_n(prev, copies).collect();
    crate::tensor::concat_channels(&parts)
}

fn recurrent_input_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let copies = grad.shape().c / RGB;
    let mut acc = crate::tensor::slice_channels(grad, 0, RGB)?;
    for i in 1..copies {
        acc.add_assign(&crate::tensor::slice_channels(grad, i * RGB, (i + 1) * RGB)?)?;
    }
    Ok(acc)
}

/// Scale-recurrent super-resolution by 2, 4 or 8 with one ×2 parameter set.
/// Intermediate outputs are fed back unclamped.
pub fn scale_recurrent_sr<T: Scalar>(img: &Tensor<T>, params: &ModelParams<T>, factor: u32) -> Result<Tensor<T>> {
    if params.config.subpixel_factor() != 2 || !matches!(factor, 2 | 4 | 8) {
        return Err(Error::UnsupportedFactor {
            factor,
            detail: "scale recurrence composes x2 passes only (2, 4, 8)".into(),
        });
    }
    super_resolve(img, params, factor)
}

/// Runs as many passes as `factor` needs (see [`passes_for`]).
pub fn super_resolve<T: Scalar>(img: &Tensor<T>, params: &ModelParams<T>, factor: u32) -> Result<Tensor<T>> {
    run_passes(img, params, passes_for(&params.config, factor)?).map(|(out, _)| out)
}

/// Forward through `passes` recurrent passes, keeping every cache.
pub fn run_passes<T: Scalar>(
    img: &Tensor<T>,
    params: &ModelParams<T>,
    passes: usize,
) -> Result<(Tensor<T>, Vec<ForwardCache<T>>)> {
    let mut caches = Vec::with_capacity(passes);
    let (mut out, cache) = forward_cached(img, params)?;
    caches.push(cache);
    for _ in 1..passes {
        let next_in = recurrent_input(&out, params.config.in_channels)?;
        let (o, cache) = forward_cached(&next_in, params)?;
        caches.push(cache);
        out = o;
    }
    Ok((out, caches))
}

/// Backpropagates through [`run_passes`]; returns gradients for the shared
/// parameters (summed over passes) and for the original input.
pub fn backward_passes<T: Scalar>(
    grad_out: &Tensor<T>,
    caches: &[ForwardCache<T>],
    params: &ModelParams<T>,
) -> Result<(ModelParams<T>, Tensor<T>)> {
    let mut grads = params.zeros_like();
    let mut g = grad_out.clone();
    for (i, cache) in caches.iter().enumerate().rev() {
        g = backward(&g, cache, params, &mut grads)?;
        if i > 0 {
            g = recurrent_input_backward(&g)?;
        }
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use proptest::prelude::*;

    fn micro(feat: usize, growth: usize, blocks: usize, units: usize) -> NetConfig {
        NetConfig {
            feat,
            growth,
            blocks,
            units,
            ..NetConfig::reference()
        }
    }

    fn sq_sum(t: &Tensor<f64>) -> f64 {
        t.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn reference_block_width_is_280() {
        let cfg = NetConfig::reference();
        assert_eq!(cfg.fusion_width(), 280);
        assert_eq!(cfg.width_schedule(), vec![64, 100, 136, 172, 208, 244, 280]);
        let small = micro(16, 8, 1, 4);
        assert_eq!(small.fusion_width(), 48);
    }

    #[test]
    fn config_validation() {
        assert!(micro(0, 8, 1, 1).validate().is_err());
        assert!(NetConfig { scale: 5, ..micro(4, 2, 1, 1) }.validate().is_err());
        assert!(NetConfig { in_channels: 4, ..micro(4, 2, 1, 1) }.validate().is_err());
        assert!(NetConfig { in_channels: 15, ..micro(4, 2, 1, 1) }.validate().is_ok());
    }

    #[test]
    fn dual_link_zero_weights_append_zero_channels() {
        let unit = DualLinkUnitParams { conv: ConvParams::<f32>::zeros(16, 24, 3) };
        let x = random_tensor::<f32>(Shape::new(1, 16, 8, 8), 1);
        let y = dual_link_forward(&x, &unit, 16, 8).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 24, 8, 8));
        assert_eq!(&y.item(0)[..16 * 64], x.item(0));
        assert!(y.item(0)[16 * 64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_link_rejects_narrow_input() {
        let unit = DualLinkUnitParams { conv: ConvParams::<f32>::zeros(8, 24, 3) };
        let x = Tensor::zeros(Shape::new(1, 8, 4, 4));
        assert!(dual_link_forward(&x, &unit, 16, 8).is_err());
    }

    #[test]
    fn dual_link_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (feat, growth, c) = (3, 2, 5);
        let unit = DualLinkUnitParams {
            conv: ConvParams::<f64>::init_uniform(c, feat + growth, 3, &mut rng),
        };
        let x = random_tensor::<f64>(Shape::new(2, c, 4, 4), 4);
        let (y, cache) = dual_link_cached(x.clone(), &unit, feat, growth).unwrap();
        let g_out = y.map(|v| 2.0 * v);
        let mut grad = DualLinkUnitParams { conv: ConvParams::zeros(c, feat + growth, 3) };
        let g_in = dual_link_backward(&g_out, &cache, &unit, &mut grad).unwrap();

        let e_w = check_gradient(
            &unit.conv.weight,
            |w| {
                let u = DualLinkUnitParams {
                    conv: ConvParams::new(w.clone(), unit.conv.bias.clone()).unwrap(),
                };
                sq_sum(&dual_link_forward(&x, &u, feat, growth).unwrap())
            },
            |_| grad.conv.weight.clone(),
        );
        let e_x = check_gradient(
            &x,
            |t| sq_sum(&dual_link_forward(t, &unit, feat, growth).unwrap()),
            |_| g_in.clone(),
        );
        assert!(e_w < 1e-4 && e_x < 1e-4, "{e_w} {e_x}");
    }

    #[test]
    fn zero_fusion_block_is_identity() {
        let mut p = ModelParams::<f32>::init(micro(16, 8, 1, 3), 5).unwrap();
        p.blocks[0].fusion = ConvParams::zeros(40, 16, 1);
        let x = random_tensor::<f32>(Shape::new(2, 16, 5, 6), 6);
        assert_eq!(mdcb_forward(&x, &p.blocks[0]).unwrap(), x);
    }

    #[test]
    fn mdcb_rejects_wrong_width() {
        let p = ModelParams::<f32>::init(micro(16, 8, 1, 2), 5).unwrap();
        let x = Tensor::zeros(Shape::new(1, 24, 4, 4));
        assert!(mdcb_forward(&x, &p.blocks[0]).is_err());
    }

    #[test]
    fn forward_shapes() {
        let p2 = ModelParams::<f32>::init(micro(8, 4, 1, 2), 1).unwrap();
        let x = random_tensor::<f32>(Shape::new(1, 3, 32, 32), 2);
        assert_eq!(mdcn_forward(&x, &p2, 2).unwrap().shape(), Shape::new(1, 3, 64, 64));

        let p3 = ModelParams::<f32>::init(NetConfig { scale: 3, ..micro(8, 4, 1, 2) }, 1).unwrap();
        let x = random_tensor::<f32>(Shape::new(1, 3, 10, 7), 2);
        assert_eq!(mdcn_forward(&x, &p3, 3).unwrap().shape(), Shape::new(1, 3, 30, 21));
        assert!(mdcn_forward(&x, &p3, 2).is_err());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let p = ModelParams::<f32>::init(micro(4, 2, 1, 1), 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 15, 4, 4));
        assert!(mdcn_forward(&x, &p, 2).is_err());
    }

    #[test]
    fn recurrence_shapes_and_factor_errors() {
        let p = ModelParams::<f32>::init(micro(4, 2, 1, 1), 1).unwrap();
        let x = random_tensor::<f32>(Shape::new(1, 3, 16, 16), 2);
        let once = scale_recurrent_sr(&x, &p, 2).unwrap();
        assert_eq!(once, mdcn_forward(&x, &p, 2).unwrap());
        assert_eq!(scale_recurrent_sr(&x, &p, 8).unwrap().shape(), Shape::new(1, 3, 128, 128));
        for bad in [1, 3, 6, 16] {
            assert!(matches!(
                scale_recurrent_sr(&x, &p, bad),
                Err(Error::UnsupportedFactor { .. })
            ));
        }
    }

    #[test]
    fn parameter_counts() {
        let conv = ConvParams::<f32>::zeros(4, 2, 1);
        assert_eq!(conv.numel(), 10);
        let unit = ConvParams::<f32>::zeros(16, 24, 3);
        assert_eq!(unit.numel(), 3480);
    }

    #[test]
    fn init_is_deterministic_and_names_unique() {
        let cfg = micro(8, 4, 2, 3);
        let a = ModelParams::<f32>::init(cfg, 42).unwrap();
        let b = ModelParams::<f32>::init(cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::<f32>::init(cfg, 43).unwrap());
        let names: Vec<String> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "head.0.weight");
        assert_eq!(names.last().unwrap(), "tail.out.bias");
    }

    #[test]
    fn init_bound_and_zero_bias() {
        let p = ModelParams::<f64>::init(micro(8, 4, 1, 1), 7).unwrap();
        let bound = (1.0f64 / (3.0 * 9.0)).sqrt();
        assert!(p.head[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(p.head[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn video_widening_matches_image_model_on_repeated_frames() {
        let img = ModelParams::<f64>::init(micro(4, 2, 1, 1), 9).unwrap();
        let vid = img.retarget(2, 15, 0).unwrap();
        // all shapes other than the first layer are unchanged
        let a = count_params(&img);
        let b = count_params(&vid);
        for (ra, rb) in a.rows.iter().zip(&b.rows).skip(1) {
            assert_eq!(ra.shape, rb.shape);
        }
        let frame = random_tensor::<f64>(Shape::new(1, 3, 6, 6), 10);
        let five = recurrent_input(&frame, 15).unwrap();
        let ya = mdcn_forward(&frame, &img, 2).unwrap();
        let yb = mdcn_forward(&five, &vid, 2).unwrap();
        assert!(ya.max_abs_diff(&yb) < 1e-12);
    }

    #[test]
    fn retarget_to_x3_keeps_body() {
        let p2 = ModelParams::<f32>::init(micro(4, 2, 1, 1), 9).unwrap();
        let p3 = p2.retarget(3, 3, 1).unwrap();
        assert_eq!(p3.blocks, p2.blocks);
        assert_eq!(p3.head, p2.head);
        assert_eq!(p3.tail_expand.c_out(), 36);
        assert_eq!(p2.retarget(4, 3, 1).unwrap().tail_expand, p2.tail_expand);
    }

    fn end_to_end_check(cfg: NetConfig, passes: usize, seed: u64) {
        let mut params = ModelParams::<f64>::init(cfg, seed).unwrap();
        // non-zero biases exercise every accumulation path
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            if t.shape().c == 1 && t.shape().h == 1 {
                *t = random_tensor(t.shape(), 100 + i as u64).map(|v| 0.1 * v);
            }
        }
        let x = random_tensor::<f64>(Shape::new(1, cfg.in_channels, 4, 4), seed + 1).map(|v| 0.5 + 0.5 * v);
        let (y, caches) = run_passes(&x, &params, passes).unwrap();
        // linear probe keeps the loss O(1) so central differences stay well above roundoff
        let probe = random_tensor::<f64>(y.shape(), seed + 2).map(|v| v / y.len() as f64);
        let (grads, g_in) = backward_passes(&probe, &caches, &params).unwrap();
        let loss = |p: &ModelParams<f64>, x: &Tensor<f64>| {
            let y = run_passes(x, p, passes).unwrap().0;
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };

        let e_x = check_gradient(&x, |t| loss(&params, t), |_| g_in.clone());
        assert!(e_x < 1e-4, "input rel err {e_x}");
        let named = grads.named_tensors();
        for (idx, (name, a)) in named.iter().enumerate() {
            let base = params.clone();
            let e = check_gradient(
                params.named_tensors()[idx].1,
                |t| {
                    let mut p = base.clone();
                    *p.tensors_mut()[idx] = t.clone();
                    loss(&p, &x)
                },
                |_| (*a).clone(),
            );
            assert!(e < 1e-4, "{name}: rel err {e}");
        }
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        end_to_end_check(micro(4, 2, 1, 1), 1, 21);
    }

    #[test]
    fn recurrent_and_video_gradients_match_finite_differences() {
        end_to_end_check(NetConfig { global_skip: true, ..micro(3, 2, 1, 2) }, 2, 31);
        end_to_end_check(NetConfig { in_channels: 15, ..micro(3, 2, 1, 1) }, 2, 41);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dual_link_prefix_is_preserved(seed in 0u64..10_000, extra in 0usize..3) {
            let (feat, growth) = (3, 2);
            let c = feat + extra * growth;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let unit = DualLinkUnitParams { conv: ConvParams::<f32>::init_uniform(c, feat + growth, 3, &mut rng) };
            let x = random_tensor::<f32>(Shape::new(2, c, 3, 4), seed);
            let y = dual_link_forward(&x, &unit, feat, growth).unwrap();
            let plane = 12;
            for n in 0..2 {
                prop_assert_eq!(&y.item(n)[..(c - feat) * plane], &x.item(n)[..(c - feat) * plane]);
            }
        }
    }
}
