//! Windowed multi-head self-attention with cyclic shifts.
//!
//! Feature maps are `d×H×W`. Partitioning turns them into `M×n×d` token
//! batches (`n = w²`), windows in row-major order over the window grid and
//! tokens in row-major order inside each window. All layout changes are
//! gathers, so they are exact and differentiable.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamRegistry, ParamVars};
use crate::tensor::{shape_err, Scalar, Tape, Tensor, Var};

/// Additive logit penalty for inadmissible token pairs.
pub const MASK_PENALTY: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || height == 0 || width == 0 {
            return shape_err(format!("degenerate layout {height}×{width} window {window}"));
        }
        if height % window != 0 || width % window != 0 {
            return shape_err(format!("{height}×{width} map is not divisible by window {window}"));
        }
        if shift >= window {
            return Err(Error::Config(format!("shift {shift} must be smaller than window {window}")));
        }
        Ok(WindowLayout {
            height,
            width,
            window,
            shift,
        })
    }

    pub fn windows_per_row(&self) -> usize {
        self.width / self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * self.windows_per_row()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Spatial position `(y, x)` of token `t` in window `m`.
    pub fn position(&self, m: usize, t: usize) -> (usize, usize) {
        let w = self.window;
        let (wr, wc) = (m / self.windows_per_row(), m % self.windows_per_row());
        (wr * w + t / w, wc * w + t % w)
    }
}

fn check_map<T: Scalar>(tape: &Tape<T>, f: Var, layout: &WindowLayout) -> Result<usize> {
    match tape.shape(f) {
        [d, h, w] if *h == layout.height && *w == layout.width => Ok(*d),
        s => shape_err(format!(
            "expected a d×{}×{} map, got {s:?}",
            layout.height, layout.width
        )),
    }
}

/// `d×H×W → M×n×d`
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, f: Var, layout: &WindowLayout) -> Result<Var> {
    let d = check_map(tape, f, layout)?;
    let (m, n) = (layout.num_windows(), layout.tokens_per_window());
    let hw = layout.height * layout.width;
    let mut index = Vec::with_capacity(m * n * d);
    for wi in 0..m {
        for t in 0..n {
            let (y, x) = layout.position(wi, t);
            index.extend((0..d).map(|c| c * hw + y * layout.width + x));
        }
    }
    tape.gather(f, index.into(), vec![m, n, d])
}

/// `M×n×d → d×H×W`, the inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let (m, n) = (layout.num_windows(), layout.tokens_per_window());
    let d = match tape.shape(windows) {
        [wm, wn, d] if *wm == m && *wn == n => *d,
        s => return shape_err(format!("expected {m}×{n}×d windows, got {s:?}")),
    };
    let (h, w) = (layout.height, layout.width);
    let mut index = vec![0; d * h * w];
    for wi in 0..m {
        for t in 0..n {
            let (y, x) = layout.position(wi, t);
            for c in 0..d {
                index[c * h * w + y * w + x] = (wi * n + t) * d + c;
            }
        }
    }
    tape.gather(windows, index.into(), vec![d, h, w])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Roll by `(-s, -s)`.
    Forward,
    /// Roll by `(+s, +s)`.
    Inverse,
}

/// Torus roll of a `d×H×W` map.
pub fn cyclic_shift<T: Scalar>(tape: &mut Tape<T>, f: Var, shift: usize, direction: ShiftDirection) -> Result<Var> {
    let (d, h, w) = match tape.shape(f) {
        [d, h, w] => (*d, *h, *w),
        s => return shape_err(format!("cyclic_shift expects d×H×W, got {s:?}")),
    };
    if shift >= h.min(w) {
        return shape_err(format!("shift {shift} too large for {h}×{w}"));
    }
    // out[y][x] = in[(y + dy) mod H][(x + dx) mod W]
    let (dy, dx) = match direction {
        ShiftDirection::Forward => (shift, shift),
        ShiftDirection::Inverse => (h - shift, w - shift),
    };
    let mut index = Vec::with_capacity(d * h * w);
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                index.push(c * h * w + ((y + dy) % h) * w + (x + dx) % w);
            }
        }
    }
    tape.gather(f, index.into(), vec![d, h, w])
}

/// Token-pair admissibility per window, `n×n` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    tokens: usize,
    windows: Vec<Vec<bool>>,
}

impl AttentionMask {
    pub fn from_windows(tokens: usize, windows: Vec<Vec<bool>>) -> Result<Self> {
        if windows.iter().any(|m| m.len() != tokens * tokens) {
            return shape_err(format!("mask windows must hold {tokens}×{tokens} entries"));
        }
        Ok(AttentionMask { tokens, windows })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, m: usize) -> &[bool] {
        &self.windows[m]
    }

    pub fn admissible(&self, m: usize, i: usize, j: usize) -> bool {
        self.windows[m][i * self.tokens + j]
    }

    pub fn admissible_count(&self) -> usize {
        self.windows.iter().flatten().filter(|&&a| a).count()
    }

    pub fn is_all_pass(&self) -> bool {
        self.windows.iter().flatten().all(|&a| a)
    }

    /// `0` for admissible pairs, [`MASK_PENALTY`] otherwise, shaped `M×n×n`.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let n = self.tokens;
        let data = self
            .windows
            .iter()
            .flatten()
            .map(|&a| if a { T::zero() } else { T::of(MASK_PENALTY) })
            .collect();
        Tensor::new(vec![self.windows.len(), n, n], data).expect("mask shape")
    }

    fn check_rows(&self) -> Result<()> {
        let n = self.tokens;
        for (m, win) in self.windows.iter().enumerate() {
            if let Some(row) = win.chunks_exact(n).position(|r| !r.iter().any(|&a| a)) {
                return Err(Error::Contract(format!("mask row {row} of window {m} admits no token")));
            }
        }
        Ok(())
    }
}

/// Region id of each position on the shifted grid; boundaries at `H-w`,
/// `H-s` (rows) and `W-w`, `W-s` (columns).
pub fn shift_regions(layout: &WindowLayout) -> Vec<usize> {
    let band = |v: usize, len: usize| -> usize {
        if v < len - layout.window {
            0
        } else if v < len - layout.shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(layout.height * layout.width);
    for y in 0..layout.height {
        for x in 0..layout.width {
            ids.push(band(y, layout.height) * 3 + band(x, layout.width));
        }
    }
    ids
}

/// Pairs inside a window are admissible iff they share a region id.
pub fn build_attention_mask(layout: &WindowLayout) -> AttentionMask {
    let n = layout.tokens_per_window();
    if layout.shift == 0 {
        return AttentionMask {
            tokens: n,
            windows: vec![vec![true; n * n]; layout.num_windows()],
        };
    }
    let regions = shift_regions(layout);
    let windows = (0..layout.num_windows())
        .map(|m| {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = layout.position(m, t);
                    regions[y * layout.width + x]
                })
                .collect();
            (0..n * n).map(|k| ids[k / n] == ids[k % n]).collect()
        })
        .collect();
    AttentionMask { tokens: n, windows }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    /// Learned `n×n` logit bias per head.
    pub position_bias: Option<Vec<ParamId>>,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    /// `tokens` is the window length `n`, only needed for the position bias.
    pub fn register(
        reg: &mut ParamRegistry,
        name: &str,
        embed_dim: usize,
        heads: usize,
        tokens: usize,
        position_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!("embed dim {embed_dim} not divisible by {heads} heads")));
        }
        let head_dim = embed_dim / heads;
        let mut proj = |kind: &str| -> Vec<ParamId> {
            (0..heads)
                .map(|h| reg.add(format!("{name}.{kind}{h}"), vec![embed_dim, head_dim], Init::FanIn(embed_dim)))
                .collect()
        };
        let (query, key, value) = (proj("query"), proj("key"), proj("value"));
        let output = reg.add(format!("{name}.output"), vec![embed_dim, embed_dim], Init::FanIn(embed_dim));
        let position_bias = position_bias.then(|| {
            (0..heads)
                .map(|h| reg.add(format!("{name}.position_bias{h}"), vec![tokens, tokens], Init::Zeros))
                .collect()
        });
        Ok(AttentionParams {
            query,
            key,
            value,
            output,
            position_bias,
            embed_dim,
            heads,
            head_dim,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Same shape as the input tokens.
    pub output: Var,
    /// Per head, `B×n×n` (or `n×n` for unbatched input).
    pub weights: Vec<Var>,
}

/// Multi-head self-attention over `n×d` tokens or a `B×n×d` batch of
/// windows. A mask, when given, must have one window per batch entry.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    attn: &AttentionParams,
    p: &ParamVars,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(tokens).to_vec();
    let (batch, n, d) = match shape.as_slice() {
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => return shape_err(format!("attention expects n×d or B×n×d tokens, got {shape:?}")),
    };
    if d != attn.embed_dim {
        return shape_err(format!("tokens have width {d}, attention expects {}", attn.embed_dim));
    }
    let additive = match mask {
        Some(m) => {
            if m.tokens() != n || m.num_windows() != batch {
                return shape_err(format!(
                    "mask for {} windows of {} tokens, input has {batch} of {n}",
                    m.num_windows(),
                    m.tokens()
                ));
            }
            m.check_rows()?;
            Some(m.additive::<T>())
        }
        None => None,
    };

    let flat = tape.reshape(tokens, vec![batch * n, d])?;
    let scale = T::one() / T::of(attn.head_dim as f64).sqrt();
    let head_shape = vec![batch, n, attn.head_dim];
    let mut heads = Vec::with_capacity(attn.heads);
    let mut weights = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let q = tape.matmul(flat, p[attn.query[h]])?;
        let q = tape.reshape(q, head_shape.clone())?;
        let k = tape.matmul(flat, p[attn.key[h]])?;
        let k = tape.reshape(k, head_shape.clone())?;
        let v = tape.matmul(flat, p[attn.value[h]])?;
        let v = tape.reshape(v, head_shape.clone())?;

        let mut logits = tape.matmul_nt(q, k)?;
        logits = tape.scale(logits, scale)?;
        if let Some(bias) = &attn.position_bias {
            logits = tape.add_broadcast(logits, p[bias[h]])?;
        }
        if let Some(add) = &additive {
            logits = tape.add_const(logits, add)?;
        }
        let a = tape.softmax(logits)?;
        heads.push(tape.matmul(a, v)?);
        weights.push(if shape.len() == 2 { tape.reshape(a, vec![n, n])? } else { a });
    }
    let z = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    let z = tape.reshape(z, vec![batch * n, d])?;
    let out = tape.matmul(z, p[attn.output])?;
    let output = tape.reshape(out, shape)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub window_attention: AttentionParams,
    pub shifted_attention: AttentionParams,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub layout: WindowLayout,
    mask: AttentionMask,
}

impl SwinBlock {
    pub fn register(
        reg: &mut ParamRegistry,
        name: &str,
        layout: WindowLayout,
        embed_dim: usize,
        heads: usize,
        position_bias: bool,
    ) -> Result<Self> {
        let n = layout.tokens_per_window();
        let window_attention = AttentionParams::register(reg, &format!("{name}.wmsa"), embed_dim, heads, n, position_bias)?;
        let shifted_attention = AttentionParams::register(reg, &format!("{name}.swmsa"), embed_dim, heads, n, position_bias)?;
        let norm_gamma = reg.add(format!("{name}.norm.gamma"), vec![embed_dim], Init::Ones);
        let norm_beta = reg.add(format!("{name}.norm.beta"), vec![embed_dim], Init::Zeros);
        Ok(SwinBlock {
            window_attention,
            shifted_attention,
            norm_gamma,
            norm_beta,
            layout,
            mask: build_attention_mask(&layout),
        })
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlockOutput {
    pub output: Var,
    /// Stage A map before the shifted stage.
    pub stage_a: Var,
    /// Stage B map before normalization.
    pub stage_b: Var,
    pub window_weights: Vec<Var>,
    pub shifted_weights: Vec<Var>,
}

/// Transposes `d×H×W` to `HW×d` tokens.
fn to_tokens<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let (d, hw) = (s[0], s[1] * s[2]);
    let index: Arc<[usize]> = (0..hw * d).map(|i| (i % d) * hw + i / d).collect();
    tape.gather(f, index, vec![hw, d])
}

fn from_tokens<T: Scalar>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let d = tape.shape(tokens)[1];
    let hw = h * w;
    let index: Arc<[usize]> = (0..d * hw).map(|i| (i % hw) * d + i / hw).collect();
    tape.gather(tokens, index, vec![d, h, w])
}

/// Window attention with residual, then shifted-window attention with
/// residual, then layer normalization over each token's features.
pub fn swin_block_forward<T: Scalar>(tape: &mut Tape<T>, f: Var, block: &SwinBlock, p: &ParamVars) -> Result<SwinBlockOutput> {
    let layout = &block.layout;
    let d = check_map(tape, f, layout)?;
    if d != block.window_attention.embed_dim {
        return shape_err(format!("map has {d} channels, block expects {}", block.window_attention.embed_dim));
    }

    let windows = window_partition(tape, f, layout)?;
    let a = multi_head_attention(tape, windows, &block.window_attention, p, None)?;
    let a_res = tape.add(a.output, windows)?;
    let stage_a = window_reverse(tape, a_res, layout)?;

    let shifted = cyclic_shift(tape, stage_a, layout.shift, ShiftDirection::Forward)?;
    let windows = window_partition(tape, shifted, layout)?;
    let b = multi_head_attention(tape, windows, &block.shifted_attention, p, Some(&block.mask))?;
    let b_res = tape.add(b.output, windows)?;
    let merged = window_reverse(tape, b_res, layout)?;
    let stage_b = cyclic_shift(tape, merged, layout.shift, ShiftDirection::Inverse)?;

    let tokens = to_tokens(tape, stage_b)?;
    let normed = tape.layer_norm(tokens, p[block.norm_gamma], p[block.norm_beta], LAYER_NORM_EPS)?;
    let output = from_tokens(tape, normed, layout.height, layout.width)?;
    Ok(SwinBlockOutput {
        output,
        stage_a,
        stage_b,
        window_weights: a.weights,
        shifted_weights: b.weights,
    })
}
