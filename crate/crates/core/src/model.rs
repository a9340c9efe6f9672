//! Windowed-attention encoder/decoder with a spherical shared/private split.
//!
//! Images are `[channels, H, W]`. Inside the network features are kept as
//! token matrices `[H'·W', dim]` (token grid in row-major order); feature maps
//! handed out to callers use the channel-first `[dim, H', W']` layout.
//!
//! Each encoder is a patch embedding followed by `num_blocks` transformer
//! blocks with windowed self-attention, alternating plain and cyclically
//! shifted windows. The encoded channels are split in half: the first half is
//! the modality-shared ("align") part, the second the modality-private
//! ("separ") part, and each half is passed through a spherical transform.
//! The decoder sees the full visible feature plus the shared infrared half
//! only, runs another block stack, and expands tokens back to pixels.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Params};
use crate::sphere::{spherical_transform, SphericalConfig};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;
/// Added to attention logits that cross a wrapped window boundary.
const MASK_VALUE: f64 = -1e9;
/// Inputs are clamped to this margin before taking the logit for the
/// residual connection.
const SKIP_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub num_blocks: usize,
    pub patch_size: usize,
    pub decoder_blocks: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 32,
            num_heads: 4,
            window_size: 8,
            num_blocks: 4,
            patch_size: 4,
            decoder_blocks: 2,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelDims(m));
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            ));
        }
        if self.embed_dim < 6 {
            return bad(
                "embed_dim must be at least 6 so each half spans a sphere of dimension >= 2".into(),
            );
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if !self.fused_dim().is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} must divide the fused width {}",
                self.num_heads,
                self.fused_dim()
            ));
        }
        if self.window_size == 0 || self.patch_size == 0 || self.num_blocks == 0 {
            return bad("window_size, patch_size and num_blocks must be positive".into());
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.embed_dim / 2
    }

    /// Channels entering the decoder: full visible plus shared infrared.
    pub fn fused_dim(&self) -> usize {
        self.embed_dim + self.half()
    }

    /// Spatial sizes must be multiples of this after padding.
    pub fn granularity(&self) -> usize {
        self.patch_size * self.window_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visible,
    Infrared,
}

/// Shared and private halves of one modality's feature map, `[dim/2, H', W']` each.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub align: Var,
    pub separ: Var,
    pub modality: Modality,
}

/// A modality's features before (`psi`) and after (`psi_hat`) the spherical transform.
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub psi: FeatureBundle,
    pub psi_hat: FeatureBundle,
}

// ---- small layers -----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.normal(format!("{name}.weight"), &[input, output], INIT_STD, rng),
            bias: store.zeros(format!("{name}.bias"), &[output]),
            input,
            output,
        }
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Params, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("expected last axis {}, got {shape:?}", self.input),
            });
        }
        let rows = shape.iter().product::<usize>() / self.input;
        let flat = tape.reshape(x, &[rows, self.input])?;
        let w = p.var(tape, self.weight);
        let b = p.var(tape, self.bias);
        let y = tape.matmul(flat, w)?;
        let y = tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.output;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            weight: store.ones(format!("{name}.weight"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Params, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let w = p.var(tape, self.weight);
        let b = p.var(tape, self.bias);
        let y = tape.mul(n, w)?;
        tape.add(y, b)
    }
}

// ---- index builders -----------------------------------------------------------

/// Token grid geometry for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// For each (window, position-in-window) slot, the token it reads after a
/// cyclic shift of `shift` tokens towards the origin.
fn window_tokens(grid: Grid, window: usize, shift: usize) -> Vec<usize> {
    let (nh, nw) = (grid.height / window, grid.width / window);
    let mut out = Vec::with_capacity(grid.tokens());
    for a in 0..nh {
        for b in 0..nw {
            for p in 0..window {
                for q in 0..window {
                    let i = (a * window + p + shift) % grid.height;
                    let j = (b * window + q + shift) % grid.width;
                    out.push(i * grid.width + j);
                }
            }
        }
    }
    out
}

fn expand_rows(rows: &[usize], dim: usize) -> Arc<[isize]> {
    rows.iter()
        .flat_map(|&r| (0..dim).map(move |c| (r * dim + c) as isize))
        .collect()
}

/// Attention mask `[windows, 1, N, N]` blocking pairs that came from
/// different regions before the cyclic shift.
fn shift_mask(grid: Grid, window: usize, shift: usize) -> Tensor {
    let label = |x: usize, size: usize| -> usize {
        if x < size - window {
            0
        } else if x < size - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (grid.height / window, grid.width / window);
    let n = window * window;
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for a in 0..nh {
        for b in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|k| {
                    let (p, q) = (k / window, k % window);
                    label(a * window + p, grid.height) * 3 + label(b * window + q, grid.width)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if labels[i] == labels[j] {
                        0.0
                    } else {
                        MASK_VALUE
                    });
                }
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, 1, n, n], data)
}

/// Gather index mapping the bias table `[(2w-1)^2, heads]` to `[heads, N, N]`.
fn relative_bias_index(window: usize, heads: usize) -> Arc<[isize]> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut out = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let (pi, qi) = ((i / window) as isize, (i % window) as isize);
                let (pj, qj) = ((j / window) as isize, (j % window) as isize);
                let dr = (pi - pj + window as isize - 1) as usize;
                let dc = (qi - qj + window as isize - 1) as usize;
                out.push(((dr * span + dc) * heads + h) as isize);
            }
        }
    }
    out.into()
}

// ---- transformer block ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub rel_bias: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::ModelDims(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        let span = 2 * window - 1;
        Ok(SwinBlock {
            dim,
            heads,
            window,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            rel_bias: store.normal(
                format!("{name}.rel_bias"),
                &[span * span, heads],
                INIT_STD,
                rng,
            ),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, MLP_RATIO * dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * dim, dim, rng),
        })
    }

    fn check_grid(&self, grid: Grid) -> Result<()> {
        if !grid.height.is_multiple_of(self.window) || !grid.width.is_multiple_of(self.window) {
            return Err(Error::Shape {
                op: "swin_block",
                detail: format!(
                    "token grid {}x{} is not a multiple of window {}",
                    grid.height, grid.width, self.window
                ),
            });
        }
        Ok(())
    }

    /// Windowed multi-head self-attention on tokens `[L, dim]`, returning the
    /// projected attention output (before the residual add) and the
    /// per-window attention weights `[windows, heads, N, N]`.
    pub fn attention(
        &self,
        tape: &mut Tape,
        p: &mut Params,
        tokens: Var,
        grid: Grid,
        shift: bool,
    ) -> Result<(Var, Var)> {
        self.check_grid(grid)?;
        let (d, h, w) = (self.dim, self.heads, self.window);
        let n = w * w;
        let hd = d / h;
        let windows = grid.tokens() / n;
        let offset = if shift { w / 2 } else { 0 };

        let order = window_tokens(grid, w, offset);
        let xw = tape.gather(tokens, expand_rows(&order, d), &[grid.tokens(), d])?;
        let qkv = self.qkv.forward(tape, p, xw)?;
        let qkv = tape.reshape(qkv, &[windows, n, 3, h, hd])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let split = |tape: &mut Tape, i: usize| -> Result<Var> {
            let t = tape.narrow(qkv, 0, i, 1)?;
            tape.reshape(t, &[windows * h, n, hd])
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let scores = tape.reshape(scores, &[windows, h, n, n])?;
        let table = p.var(tape, self.rel_bias);
        let bias = tape.gather(table, relative_bias_index(w, h), &[h, n, n])?;
        let mut scores = tape.add(scores, bias)?;
        if shift {
            let mask = tape.constant(shift_mask(grid, w, offset));
            scores = tape.add(scores, mask)?;
        }
        let attn = tape.softmax(scores)?;
        let attn_flat = tape.reshape(attn, &[windows * h, n, n])?;
        let out = tape.matmul(attn_flat, v)?;
        let out = tape.reshape(out, &[windows, h, n, hd])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[grid.tokens(), d])?;
        let out = self.proj.forward(tape, p, out)?;

        // Undo the window partition and the shift.
        let mut inverse = vec![0usize; grid.tokens()];
        for (slot, &tok) in order.iter().enumerate() {
            inverse[tok] = slot;
        }
        let out = tape.gather(out, expand_rows(&inverse, d), &[grid.tokens(), d])?;
        Ok((out, attn))
    }

    /// Block on tokens `[L, dim]`.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        p: &mut Params,
        x: Var,
        grid: Grid,
        shift: bool,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s != [grid.tokens(), self.dim] {
            return Err(Error::ShapeMismatch {
                op: "swin_block",
                lhs: s.to_vec(),
                rhs: vec![grid.tokens(), self.dim],
            });
        }
        let h = self.norm1.forward(tape, p, x)?;
        let (a, _) = self.attention(tape, p, h, grid, shift)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }

    /// Block on a channel-first feature map `[dim, H', W']`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Params, x: Var, shift: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "swin_block",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        let grid = Grid {
            height: s[1],
            width: s[2],
        };
        let tokens = map_to_tokens(tape, x)?;
        let y = self.forward_tokens(tape, p, tokens, grid, shift)?;
        tokens_to_map(tape, y, grid)
    }
}

/// `[C, H, W]` to tokens `[H·W, C]`.
pub fn map_to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Tokens `[H·W, C]` to `[C, H, W]`.
pub fn tokens_to_map(tape: &mut Tape, tokens: Var, grid: Grid) -> Result<Var> {
    let c = tape.shape(tokens)[1];
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[c, grid.height, grid.width])
}

// ---- encoder -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<SwinBlock>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        dims: &ModelDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let p = dims.patch_size;
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            in_channels * p * p,
            dims.embed_dim,
            rng,
        );
        let embed_norm = LayerNorm::new(store, &format!("{name}.embed_norm"), dims.embed_dim);
        let blocks = (0..dims.num_blocks)
            .map(|i| {
                SwinBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    dims.embed_dim,
                    dims.num_heads,
                    dims.window_size,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            in_channels,
            patch_size: p,
            embed,
            embed_norm,
            blocks,
        })
    }

    /// Encodes `[C, H, W]` into tokens `[H'·W', dim]` with `H' = H / patch`.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        p: &mut Params,
        image: Var,
    ) -> Result<(Var, Grid)> {
        let s = tape.shape(image).to_vec();
        let ps = self.patch_size;
        if s.len() != 3
            || s[0] != self.in_channels
            || !s[1].is_multiple_of(ps)
            || !s[2].is_multiple_of(ps)
        {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "expected [{}, H, W] with H, W multiples of {ps}, got {s:?}",
                    self.in_channels
                ),
            });
        }
        let grid = Grid {
            height: s[1] / ps,
            width: s[2] / ps,
        };
        let patches = tape.gather(
            image,
            patch_index(self.in_channels, s[1], s[2], ps),
            &[grid.tokens(), self.in_channels * ps * ps],
        )?;
        let x = self.embed.forward(tape, p, patches)?;
        let mut x = self.embed_norm.forward(tape, p, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward_tokens(tape, p, x, grid, i % 2 == 1)?;
        }
        Ok((x, grid))
    }

    /// Encodes `[C, H, W]` into the feature map `[dim, H / patch, W / patch]`.
    pub fn encode(&self, tape: &mut Tape, p: &mut Params, image: Var) -> Result<Var> {
        let (tokens, grid) = self.encode_tokens(tape, p, image)?;
        tokens_to_map(tape, tokens, grid)
    }
}

/// Gather index turning `[C, H, W]` into patch rows `[(H/p)·(W/p), C·p·p]`.
fn patch_index(channels: usize, height: usize, width: usize, p: usize) -> Arc<[isize]> {
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(channels * height * width);
    for ti in 0..gh {
        for tj in 0..gw {
            for c in 0..channels {
                for di in 0..p {
                    for dj in 0..p {
                        out.push(((c * height + ti * p + di) * width + tj * p + dj) as isize);
                    }
                }
            }
        }
    }
    out.into()
}

/// Inverse of [`patch_index`]: patch rows back to `[C, H, W]`.
fn unpatch_index(channels: usize, height: usize, width: usize, p: usize) -> Arc<[isize]> {
    let gw = width / p;
    let row = channels * p * p;
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let token = (y / p) * gw + x / p;
                let k = (c * p + y % p) * p + x % p;
                out.push((token * row + k) as isize);
            }
        }
    }
    out.into()
}

// ---- spherical decomposition -----------------------------------------------------

/// Tangent-space linear map of one spherical transform.
#[derive(Clone, Copy, Debug)]
pub struct SphereLinear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SphereLinear {
    /// Starts as the identity map between tangent spaces.
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let k = channels - 1;
        let eye = Tensor::from_fn([k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
        SphereLinear {
            weight: store.add(format!("{name}.weight"), eye),
            bias: store.zeros(format!("{name}.bias"), &[k]),
        }
    }
}

/// Applies the spherical transform to each column of a `[C, H', W']` map.
pub fn transform_map(
    tape: &mut Tape,
    p: &mut Params,
    feat: Var,
    lin: &SphereLinear,
    cfg: &SphericalConfig,
) -> Result<Var> {
    let s = tape.shape(feat).to_vec();
    let flat = tape.reshape(feat, &[s[0], s[1] * s[2]])?;
    let w = p.var(tape, lin.weight);
    let b = p.var(tape, lin.bias);
    let y = spherical_transform(tape, flat, w, b, cfg)?;
    tape.reshape(y, &s)
}

/// Splits `[dim, H', W']` at `dim/2` and maps both halves through the sphere.
pub fn decompose(
    tape: &mut Tape,
    p: &mut Params,
    feat: Var,
    lin: &SphereLinear,
    cfg: &SphericalConfig,
    modality: Modality,
) -> Result<Decomposition> {
    let dim = tape.shape(feat)[0];
    if !dim.is_multiple_of(2) {
        return Err(Error::ModelDims(format!(
            "cannot split odd channel count {dim}"
        )));
    }
    let align = tape.narrow(feat, 0, 0, dim / 2)?;
    let separ = tape.narrow(feat, 0, dim / 2, dim / 2)?;
    let align_hat = transform_map(tape, p, align, lin, cfg)?;
    let separ_hat = transform_map(tape, p, separ, lin, cfg)?;
    Ok(Decomposition {
        psi: FeatureBundle {
            align,
            separ,
            modality,
        },
        psi_hat: FeatureBundle {
            align: align_hat,
            separ: separ_hat,
            modality,
        },
    })
}

// ---- decoder -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Decoder {
    pub patch_size: usize,
    pub blocks: Vec<SwinBlock>,
    pub norm: LayerNorm,
    pub expand: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &ModelDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = dims.fused_dim();
        let p = dims.patch_size;
        let blocks = (0..dims.decoder_blocks)
            .map(|i| {
                SwinBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    d,
                    dims.num_heads,
                    dims.window_size,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            patch_size: p,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            expand: Linear::new(store, &format!("{name}.expand"), d, 3 * p * p, rng),
        })
    }
}

/// Fuses the full visible feature with the shared infrared half and decodes
/// an RGB image in `[0, 1]`, `[3, H'·patch, W'·patch]`.
///
/// With `skip` set, the decoder output is added to the logit of that image
/// before the final sigmoid, so the network predicts a correction.
pub fn fuse(
    tape: &mut Tape,
    p: &mut Params,
    decoder: &Decoder,
    visible: &FeatureBundle,
    infrared: &FeatureBundle,
    skip: Option<&Tensor>,
) -> Result<Var> {
    if visible.modality != Modality::Visible || infrared.modality != Modality::Infrared {
        return Err(Error::Shape {
            op: "fuse",
            detail: "bundles must be (visible, infrared)".into(),
        });
    }
    let sv = tape.shape(visible.align).to_vec();
    let si = tape.shape(infrared.align).to_vec();
    if sv[1..] != si[1..] || tape.shape(visible.separ)[1..] != sv[1..] {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: sv,
            rhs: si,
        });
    }
    let grid = Grid {
        height: sv[1],
        width: sv[2],
    };
    let fused = tape.concat(&[visible.align, visible.separ, infrared.align], 0)?;
    let mut x = map_to_tokens(tape, fused)?;
    for (i, block) in decoder.blocks.iter().enumerate() {
        x = block.forward_tokens(tape, p, x, grid, i % 2 == 1)?;
    }
    let x = decoder.norm.forward(tape, p, x)?;
    let pix = decoder.expand.forward(tape, p, x)?;
    let ps = decoder.patch_size;
    let (h, w) = (grid.height * ps, grid.width * ps);
    let img = tape.gather(pix, unpatch_index(3, h, w, ps), &[3, h, w])?;
    let logits = match skip {
        Some(base) => {
            if base.shape() != [3, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "fuse",
                    lhs: base.shape().to_vec(),
                    rhs: vec![3, h, w],
                });
            }
            let l = Tensor::from_parts(
                base.shape().to_vec(),
                base.data()
                    .iter()
                    .map(|v| {
                        let c = v.clamp(SKIP_MARGIN, 1.0 - SKIP_MARGIN);
                        (c / (1.0 - c)).ln()
                    })
                    .collect(),
            );
            let l = tape.constant(l);
            tape.add(img, l)?
        }
        None => img,
    };
    tape.sigmoid(logits)
}

// ---- padding ---------------------------------------------------------------------

/// Reflection-pads `[C, H, W]` on the bottom/right up to multiples of `multiple`.
pub fn reflect_pad(tape: &mut Tape, image: Var, multiple: usize) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return Ok(image);
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::Shape {
            op: "reflect_pad",
            detail: format!("{h}x{w} is too small to reflect-pad to {ph}x{pw}"),
        });
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                index.push(((ch * h + reflect(y, h)) * w + reflect(x, w)) as isize);
            }
        }
    }
    tape.gather(image, index.into(), &[c, ph, pw])
}

/// Keeps the top-left `[C, h, w]` window.
pub fn crop(tape: &mut Tape, image: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s[1] == h && s[2] == w {
        return Ok(image);
    }
    let a = tape.narrow(image, 1, 0, h)?;
    tape.narrow(a, 2, 0, w)
}

// ---- full removal network ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ShadowRemover {
    pub dims: ModelDims,
    pub sphere: SphericalConfig,
    pub visible_encoder: Encoder,
    pub infrared_encoder: Encoder,
    pub visible_sphere: SphereLinear,
    pub infrared_sphere: SphereLinear,
    pub decoder: Decoder,
    /// Predict a correction on top of the input image.
    pub residual: bool,
}

pub struct RemovalOutput {
    pub visible: Decomposition,
    pub infrared: Decomposition,
    /// Shadow-free estimate `[3, H, W]`.
    pub image: Var,
}

impl ShadowRemover {
    pub fn new(
        dims: ModelDims,
        radius: f64,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let sphere = SphericalConfig::new(radius, dims.half())?;
        Ok(ShadowRemover {
            dims,
            sphere,
            visible_encoder: Encoder::new(store, "remover.visible", 3, &dims, rng)?,
            infrared_encoder: Encoder::new(store, "remover.infrared", 1, &dims, rng)?,
            visible_sphere: SphereLinear::identity(store, "remover.visible_sphere", dims.half()),
            infrared_sphere: SphereLinear::identity(store, "remover.infrared_sphere", dims.half()),
            decoder: Decoder::new(store, "remover.decoder", &dims, rng)?,
            residual: true,
        })
    }

    /// Runs the full network on a visible image `[3, H, W]` and its infrared
    /// companion `[1, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Params,
        visible: Var,
        infrared: Var,
    ) -> Result<RemovalOutput> {
        let sv = tape.shape(visible).to_vec();
        let si = tape.shape(infrared).to_vec();
        if sv.len() != 3 || sv[0] != 3 || si != [1, sv[1], sv[2]] {
            return Err(Error::Shape {
                op: "remover",
                detail: format!(
                    "visible {sv:?} and infrared {si:?} are not a [3,H,W]/[1,H,W] pair"
                ),
            });
        }
        let (h, w) = (sv[1], sv[2]);
        let g = self.dims.granularity();
        let vis = reflect_pad(tape, visible, g)?;
        let ir = reflect_pad(tape, infrared, g)?;

        let fv = self.visible_encoder.encode(tape, p, vis)?;
        let fi = self.infrared_encoder.encode(tape, p, ir)?;
        let dv = decompose(
            tape,
            p,
            fv,
            &self.visible_sphere,
            &self.sphere,
            Modality::Visible,
        )?;
        let di = decompose(
            tape,
            p,
            fi,
            &self.infrared_sphere,
            &self.sphere,
            Modality::Infrared,
        )?;
        let skip = if self.residual {
            Some(tape.value(vis).clone())
        } else {
            None
        };
        let out = fuse(
            tape,
            p,
            &self.decoder,
            &dv.psi_hat,
            &di.psi_hat,
            skip.as_ref(),
        )?;
        let image = crop(tape, out, h, w)?;
        Ok(RemovalOutput {
            visible: dv,
            infrared: di,
            image,
        })
    }

    /// Inference without gradients.
    pub fn infer(&self, store: &ParamStore, visible: &Tensor, infrared: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut p = Params::frozen(store);
        let v = tape.constant(visible.clone());
        let i = tape.constant(infrared.clone());
        let out = self.forward(&mut tape, &mut p, v, i)?;
        Ok(tape.value(out.image).clone())
    }
}
