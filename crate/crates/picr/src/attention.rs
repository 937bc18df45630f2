//! Windowed attention with prompt-token conditioning.
//!
//! Feature maps are cut into non-overlapping `w x w` windows (cyclically
//! rolled first when the layer is shifted). Queries come from the image
//! tokens of a window only; keys and values are the image tokens augmented
//! with that window's prompt tokens, so prompts steer the attention but emit
//! no output row of their own. Prompt tokens live on a grid exactly half the
//! image-token grid, giving `S_P = S_I / 4` per window.

use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvT2d, LayerNorm, Linear, Mlp, NamedParams};
use crate::rng::Prng;

/// Geometry of one windowed-attention pass over an `H x W` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        let l = WindowLayout {
            height,
            width,
            window,
            shift,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape("window layout with zero extent".into()));
        }
        if self.height % self.window != 0 || self.width % self.window != 0 {
            return Err(Error::Shape(format!(
                "grid {}x{} not divisible by window {} (pad first)",
                self.height, self.width, self.window
            )));
        }
        if self.window % 2 != 0 {
            return Err(Error::Shape(format!(
                "window {} must be even",
                self.window
            )));
        }
        if self.shift >= self.window {
            return Err(Error::Shape(format!(
                "shift {} must be < window {}",
                self.shift, self.window
            )));
        }
        Ok(())
    }

    pub fn windows(&self) -> (usize, usize) {
        (self.height / self.window, self.width / self.window)
    }

    pub fn window_count(&self) -> usize {
        let (ny, nx) = self.windows();
        ny * nx
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Picks the working window for a grid: the configured window normally, 4
/// for grids smaller than 8. Grids below the window are mirror-padded up by
/// the layer, so the result is always even.
pub fn effective_window(grid: usize, config_window: usize) -> usize {
    if grid < 8 {
        4
    } else {
        config_window
    }
}

fn partition_index(c: usize, layout: &WindowLayout) -> Vec<u32> {
    let (h, w, win, s) = (layout.height, layout.width, layout.window, layout.shift);
    let (nwy, nwx) = layout.windows();
    let tokens = win * win;
    let mut idx = Vec::with_capacity(nwy * nwx * tokens * c);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for ty in 0..win {
                for tx in 0..win {
                    let sy = (wy * win + ty + s) % h;
                    let sx = (wx * win + tx + s) % w;
                    for ch in 0..c {
                        idx.push(((ch * h + sy) * w + sx) as u32);
                    }
                }
            }
        }
    }
    idx
}

fn merge_index(c: usize, layout: &WindowLayout) -> Vec<u32> {
    let (h, w, win, s) = (layout.height, layout.width, layout.window, layout.shift);
    let (_, nwx) = layout.windows();
    let tokens = win * win;
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let rr = (r + h - s % h) % h;
                let cc = (col + w - s % w) % w;
                let win_i = (rr / win) * nwx + cc / win;
                let tok = (rr % win) * win + cc % win;
                idx.push(((win_i * tokens + tok) * c + ch) as u32);
            }
        }
    }
    idx
}

/// Cuts `features [C,H,W]` into window token matrices `[nW, w*w, C]`.
/// When `shift > 0` the grid is cyclically rolled up-left by `shift` first.
pub fn partition_windows(features: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    layout.validate()?;
    let s = features.shape();
    if s.len() != 3 || s[1] != layout.height || s[2] != layout.width {
        return Err(Error::Shape(format!(
            "features {s:?} do not match layout {}x{}",
            layout.height, layout.width
        )));
    }
    let c = s[0];
    let idx = Rc::new(partition_index(c, layout));
    Ok(features.gather(idx, &[layout.window_count(), layout.tokens_per_window(), c]))
}

/// Exact inverse of [`partition_windows`], including the unroll.
pub fn merge_windows(windows: &Tensor, layout: &WindowLayout, channels: usize) -> Result<Tensor> {
    layout.validate()?;
    let s = windows.shape();
    let expect = [layout.window_count(), layout.tokens_per_window(), channels];
    if s != expect {
        return Err(Error::Shape(format!("windows {s:?}, expected {expect:?}")));
    }
    let idx = Rc::new(merge_index(channels, layout));
    Ok(windows.gather(idx, &[channels, layout.height, layout.width]))
}

/// Reflect-pads `[C,H,W]` on the bottom/right to `(new_h, new_w)`. The
/// mirror is periodic (period `2n - 2`), so any pad amount is valid; an
/// extent of 1 replicates.
pub fn reflect_pad_chw(x: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(new_h >= h && new_w >= w);
    let mirror = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let t = i % (2 * n - 2);
        if t < n {
            t
        } else {
            2 * n - 2 - t
        }
    };
    let mut idx = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        for r in 0..new_h {
            let ry = mirror(r, h);
            for col in 0..new_w {
                let cx = mirror(col, w);
                idx.push(((ch * h + ry) * w + cx) as u32);
            }
        }
    }
    x.gather(Rc::new(idx), &[c, new_h, new_w])
}

pub fn crop_chw(x: &Tensor, new_h: usize, new_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(new_h <= h && new_w <= w);
    let mut idx = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        for r in 0..new_h {
            for col in 0..new_w {
                idx.push(((ch * h + r) * w + col) as u32);
            }
        }
    }
    x.gather(Rc::new(idx), &[c, new_h, new_w])
}

/// `[C,H,W] -> [H*W, C]` token matrix.
pub fn chw_to_tokens(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut idx = Vec::with_capacity(c * h * w);
    for t in 0..h * w {
        for ch in 0..c {
            idx.push((ch * h * w + t) as u32);
        }
    }
    x.gather(Rc::new(idx), &[h * w, c])
}

/// `[H*W, C] -> [C,H,W]`.
pub fn tokens_to_chw(t: &Tensor, h: usize, w: usize) -> Tensor {
    let c = t.shape()[1];
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for tok in 0..h * w {
            idx.push((tok * c + ch) as u32);
        }
    }
    t.gather(Rc::new(idx), &[c, h, w])
}

/// `[B, S, d] -> [B*heads, S, d/heads]`
fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(d % heads, 0, "dim not divisible by head count");
    let dh = d / heads;
    let mut idx = Vec::with_capacity(b * s * d);
    for bi in 0..b {
        for hi in 0..heads {
            for si in 0..s {
                for j in 0..dh {
                    idx.push(((bi * s + si) * d + hi * dh + j) as u32);
                }
            }
        }
    }
    x.gather(Rc::new(idx), &[b * heads, s, dh])
}

/// `[B*heads, S, d/heads] -> [B, S, d]`
fn merge_heads(x: &Tensor, heads: usize) -> Tensor {
    let (bh, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = bh / heads;
    let d = dh * heads;
    let mut idx = Vec::with_capacity(bh * s * dh);
    for bi in 0..b {
        for si in 0..s {
            for hi in 0..heads {
                for j in 0..dh {
                    idx.push((((bi * heads + hi) * s + si) * dh + j) as u32);
                }
            }
        }
    }
    x.gather(Rc::new(idx), &[b, s, d])
}

/// Image and prompt tokens of one attention window.
pub struct TokenSet {
    /// `[S_I, d]`
    pub image: Tensor,
    /// `[S_P, d]`; `None` (or zero rows) selects the plain path
    pub prompt: Option<Tensor>,
}

impl TokenSet {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let s = self.image.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("image tokens must be [S,d], got {s:?}")));
        }
        let (s_i, d) = (s[0], s[1]);
        let s_p = match &self.prompt {
            None => 0,
            Some(p) => {
                if p.shape().len() != 2 || p.shape()[1] != d {
                    return Err(Error::Shape(format!(
                        "prompt tokens {:?} do not share dim {d}",
                        p.shape()
                    )));
                }
                p.shape()[0]
            }
        };
        Ok((s_i, s_p, d))
    }
}

/// Projections and bias of one attention layer (single window view).
pub struct AttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// `[heads, S_I, S_I + S_P]`
    pub bias: Option<Tensor>,
    pub heads: usize,
}

/// Scaled dot-product over pre-projected tensors:
/// `q [B, S_q, d]`, `k`/`v` `[B, S_kv, d]`, optional bias `[heads, S_q, S_kv]`
/// shared by all batch entries. When `probs_out` is given the softmax matrix
/// `[B*heads, S_q, S_kv]` is copied out.
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    heads: usize,
    probs_out: Option<&mut Vec<f64>>,
) -> Tensor {
    let d = q.shape()[2];
    let dh = d / heads;
    let qh = split_heads(q, heads);
    let kh = split_heads(k, heads);
    let vh = split_heads(v, heads);
    let mut scores = qh.bmm_nt(&kh).mul_scalar(1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        scores = scores.add_batch_bias(b);
    }
    let probs = scores.softmax_last();
    if let Some(out) = probs_out {
        *out = probs.to_vec();
    }
    merge_heads(&probs.bmm(&vh), heads)
}

/// Attention of one window per Eq-style prompting: queries from image tokens
/// only, keys/values from the image tokens concatenated with the prompt
/// tokens. Returns `[S_I, d]`; prompt tokens emit no output row.
pub fn prompted_attention(tokens: &TokenSet, weights: &AttentionWeights) -> Result<Tensor> {
    let (s_i, s_p, d) = tokens.dims()?;
    if d % weights.heads != 0 {
        return Err(Error::Shape(format!(
            "token dim {d} not divisible by head count {}",
            weights.heads
        )));
    }
    if let Some(b) = &weights.bias {
        let expect = [weights.heads, s_i, s_i + s_p];
        if b.shape() != expect {
            return Err(Error::Shape(format!(
                "bias {:?}, expected {expect:?}",
                b.shape()
            )));
        }
    }
    let img = tokens.image.reshape(&[1, s_i, d]);
    let kv_src = match &tokens.prompt {
        Some(p) if s_p > 0 => Tensor::concat(&[img.clone(), p.reshape(&[1, s_p, d])], 1),
        _ => img.clone(),
    };
    let q = weights.wq.forward(&img);
    let k = weights.wk.forward(&kv_src);
    let v = weights.wv.forward(&kv_src);
    let out = attention_core(&q, &k, &v, weights.bias.as_ref(), weights.heads, None);
    Ok(out.reshape(&[s_i, d]))
}

/// Expands learned bias tables into the additive attention bias
/// `[heads, S_I, S_I + S_P]`.
///
/// Image-image entries use the usual relative-offset lookup
/// `table[(dy + wt - 1) * (2*wt - 1) + (dx + wt - 1)]` where `wt` is the
/// table window (>= the working window). Image-prompt columns read a separate
/// per-head table indexed by the prompt token's position inside its
/// `(wt/2) x (wt/2)` grid; they are independent of the query position.
pub fn build_relative_bias(
    img_table: &Tensor,
    prompt_table: Option<&Tensor>,
    table_window: usize,
    window: usize,
    heads: usize,
) -> Tensor {
    assert!(window <= table_window);
    let span = 2 * table_window - 1;
    assert_eq!(img_table.shape(), [heads, span * span]);
    let s_i = window * window;
    let mut idx = Vec::with_capacity(heads * s_i * s_i);
    for h in 0..heads {
        for i in 0..s_i {
            let (iy, ix) = (i / window, i % window);
            for j in 0..s_i {
                let (jy, jx) = (j / window, j % window);
                let dy = iy as isize - jy as isize + table_window as isize - 1;
                let dx = ix as isize - jx as isize + table_window as isize - 1;
                idx.push((h * span * span + dy as usize * span + dx as usize) as u32);
            }
        }
    }
    let img_bias = img_table.gather(Rc::new(idx), &[heads, s_i, s_i]);
    let Some(pt) = prompt_table else {
        return img_bias;
    };
    let pw_table = table_window / 2;
    let pw = window / 2;
    assert_eq!(pt.shape(), [heads, pw_table * pw_table]);
    let s_p = pw * pw;
    let mut pidx = Vec::with_capacity(heads * s_i * s_p);
    for h in 0..heads {
        for _i in 0..s_i {
            for p in 0..s_p {
                let (py, px) = (p / pw, p % pw);
                pidx.push((h * pw_table * pw_table + py * pw_table + px) as u32);
            }
        }
    }
    let prompt_bias = pt.gather(Rc::new(pidx), &[heads, s_i, s_p]);
    Tensor::concat(&[img_bias, prompt_bias], 2)
}

/// Softmax probabilities of one attention pass, with enough layout to map
/// token rows back onto the spatial grid.
pub struct AttnRecord {
    /// `[nW*heads, S_I, S_kv]`
    pub probs: Vec<f64>,
    pub heads: usize,
    pub s_i: usize,
    pub s_kv: usize,
    pub layout: WindowLayout,
    /// grid size before padding-for-divisibility
    pub orig_grid: (usize, usize),
}

/// One pre-norm Swin layer: windowed (optionally prompted) attention and a
/// GELU MLP, both residual.
pub struct SwinLayer {
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    /// `[heads, (2w-1)^2]` relative-position bias table
    pub bias_img: Tensor,
    /// `[heads, (w/2)^2]` prompt-column bias table (zero-initialized)
    pub bias_prompt: Tensor,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    /// window the bias tables were sized for
    pub table_window: usize,
}

impl SwinLayer {
    pub fn new(rng: &mut Prng, dim: usize, heads: usize, table_window: usize) -> Self {
        assert_eq!(dim % heads, 0);
        assert_eq!(table_window % 2, 0, "window must be even");
        let span = 2 * table_window - 1;
        let pw = table_window / 2;
        SwinLayer {
            norm1: LayerNorm::new(dim),
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            proj: Linear::new(rng, dim, dim),
            bias_img: Tensor::param(
                &[heads, span * span],
                (0..heads * span * span)
                    .map(|_| rng.normal_with(0.0, 0.02))
                    .collect(),
            ),
            bias_prompt: Tensor::param(&[heads, pw * pw], vec![0.0; heads * pw * pw]),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * 2),
            heads,
            table_window,
        }
    }

    /// `x [C,G_h,G_w]`, prompt map `[C, G_h/2, G_w/2]` when prompted.
    /// `window`/`shift` describe this layer's partition; the prompt grid uses
    /// `window/2` and `shift/2`.
    pub fn forward(
        &self,
        x: &Tensor,
        prompt_map: Option<&Tensor>,
        window: usize,
        shift: usize,
        capture: Option<&mut Vec<AttnRecord>>,
    ) -> Result<Tensor> {
        let (c, gh, gw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let orig = (gh, gw);
        // pad for divisibility, crop after merge
        let ph = gh.div_ceil(window) * window;
        let pw_grid = gw.div_ceil(window) * window;
        let x_pad = if (ph, pw_grid) != (gh, gw) {
            reflect_pad_chw(x, ph, pw_grid)
        } else {
            x.clone()
        };
        let layout = WindowLayout::new(ph, pw_grid, window, shift)?;
        let windows = partition_windows(&x_pad, &layout)?;
        let normed = self.norm1.forward(&windows);

        let prompt_windows = match prompt_map {
            Some(pm) => {
                if window % 2 != 0 || shift % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "prompted window {window}/shift {shift} must be even"
                    )));
                }
                let (pc, pgh, pgw) = (pm.shape()[0], pm.shape()[1], pm.shape()[2]);
                if pc != c || pgh * 2 != gh || pgw * 2 != gw {
                    return Err(Error::Shape(format!(
                        "prompt map [{pc},{pgh},{pgw}] does not halve image grid [{c},{gh},{gw}]"
                    )));
                }
                let pm_pad = if (ph, pw_grid) != (gh, gw) {
                    reflect_pad_chw(pm, ph / 2, pw_grid / 2)
                } else {
                    pm.clone()
                };
                let playout = WindowLayout::new(ph / 2, pw_grid / 2, window / 2, shift / 2)?;
                let pwin = partition_windows(&pm_pad, &playout)?;
                Some(self.norm1.forward(&pwin))
            }
            None => None,
        };

        let kv_src = match &prompt_windows {
            Some(p) => Tensor::concat(&[normed.clone(), p.clone()], 1),
            None => normed.clone(),
        };
        let q = self.wq.forward(&normed);
        let k = self.wk.forward(&kv_src);
        let v = self.wv.forward(&kv_src);
        let bias = build_relative_bias(
            &self.bias_img,
            prompt_windows.as_ref().map(|_| &self.bias_prompt),
            self.table_window,
            window,
            self.heads,
        );
        let mut probs_buf = capture.as_ref().map(|_| Vec::new());
        let attn = attention_core(&q, &k, &v, Some(&bias), self.heads, probs_buf.as_mut());
        if let (Some(cap), Some(probs)) = (capture, probs_buf) {
            cap.push(AttnRecord {
                probs,
                heads: self.heads,
                s_i: layout.tokens_per_window(),
                s_kv: kv_src.shape()[1],
                layout,
                orig_grid: orig,
            });
        }
        let attn_out = self.proj.forward(&attn);
        let merged = merge_windows(&attn_out, &layout, c)?;
        let merged = if (ph, pw_grid) != (gh, gw) {
            crop_chw(&merged, gh, gw)
        } else {
            merged
        };
        let x = x.add(&merged);

        // position-wise MLP with pre-norm
        let tokens = chw_to_tokens(&x);
        let mlp_out = self.mlp.forward(&self.norm2.forward(&tokens));
        Ok(x.add(&tokens_to_chw(&mlp_out, gh, gw)))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.bias_img"), self.bias_img.clone()));
        out.push((format!("{prefix}.bias_prompt"), self.bias_prompt.clone()));
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}

/// Resolution change at the head of a block.
pub enum Resample {
    /// strided conv, halves the grid
    Down(Conv2d),
    /// transposed conv, doubles the grid
    Up(ConvT2d),
}

impl Resample {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Resample::Down(c) => c.forward(x),
            Resample::Up(c) => c.forward(x),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Resample::Down(c) => c.out_channels(),
            Resample::Up(c) => c.out_channels(),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        match self {
            Resample::Down(c) => c.collect_params(prefix, out),
            Resample::Up(c) => c.collect_params(prefix, out),
        }
    }
}

/// How a block turns a prompt feature map into prompt tokens: one extra
/// convolution landing on half the image-token grid.
pub struct PromptWiring {
    /// channels of the incoming prompt feature map
    pub in_channels: usize,
    /// spatial stride of the extra conv (4 on the encoder side, where the
    /// pyramid sits at the stage input resolution; 1 on the decoder side,
    /// where it already sits at half the token grid)
    pub stride: usize,
    /// distinct prompt tokens per Swin layer instead of one shared set
    pub per_layer: bool,
}

/// Swin-transformer block: a resolution-changing convolution followed by `L`
/// window-attention layers alternating shift `0` and `w/2`. With prompt
/// wiring it is the prompted variant; without prompt features at call time it
/// degrades to the plain block.
pub struct Stb {
    pub resample: Resample,
    pub layers: Vec<SwinLayer>,
    pub prompt_convs: Vec<Conv2d>,
    pub window: usize,
}

impl Stb {
    pub fn new(
        rng: &mut Prng,
        resample: Resample,
        depth: usize,
        heads: usize,
        window: usize,
        prompt: Option<&PromptWiring>,
    ) -> Self {
        let dim = resample.out_channels();
        let layers = (0..depth)
            .map(|_| SwinLayer::new(rng, dim, heads, window))
            .collect();
        let prompt_convs = match prompt {
            None => Vec::new(),
            Some(p) => {
                let n = if p.per_layer { depth } else { 1 };
                (0..n)
                    .map(|_| {
                        if p.stride == 1 {
                            Conv2d::new(rng, p.in_channels, dim, 3, 1, 1)
                        } else {
                            Conv2d::new(rng, p.in_channels, dim, p.stride, p.stride, 0)
                        }
                    })
                    .collect()
            }
        };
        Stb {
            resample,
            layers,
            prompt_convs,
            window,
        }
    }

    pub fn dim(&self) -> usize {
        self.resample.out_channels()
    }

    /// `x` at the stage input resolution; `prompt_feat` at the resolution the
    /// block's prompt conv expects. Passing `None` runs the plain path.
    pub fn forward(
        &self,
        x: &Tensor,
        prompt_feat: Option<&Tensor>,
        mut capture: Option<&mut Vec<AttnRecord>>,
    ) -> Result<Tensor> {
        let mut x = self.resample.forward(x);
        let (gh, gw) = (x.shape()[1], x.shape()[2]);
        let window = effective_window(gh.min(gw), self.window);

        let prompt_maps: Vec<Tensor> = match prompt_feat {
            Some(feat) if !self.prompt_convs.is_empty() => self
                .prompt_convs
                .iter()
                .map(|conv| conv.forward(feat))
                .collect(),
            _ => Vec::new(),
        };
        if let Some(pm) = prompt_maps.first() {
            let (pgh, pgw) = (pm.shape()[1], pm.shape()[2]);
            if pgh * 2 != gh || pgw * 2 != gw {
                return Err(Error::Shape(format!(
                    "prompt grid {pgh}x{pgw} is not half the image grid {gh}x{gw}"
                )));
            }
        }

        for (i, layer) in self.layers.iter().enumerate() {
            let shift = if i % 2 == 1 { window / 2 } else { 0 };
            let pm = match prompt_maps.len() {
                0 => None,
                1 => prompt_maps.first(),
                _ => prompt_maps.get(i),
            };
            x = layer.forward(&x, pm, window, shift, capture.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Per-window token counts `(S_I, S_P)` this block would use on the given
    /// post-resample grid.
    pub fn prompt_token_counts(&self, grid: usize) -> (usize, usize) {
        let w = effective_window(grid, self.window);
        let s_i = w * w;
        let s_p = if self.prompt_convs.is_empty() {
            0
        } else {
            (w / 2) * (w / 2)
        };
        (s_i, s_p)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.resample.collect_params(&format!("{prefix}.resample"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.layer{i}"), out);
        }
        for (i, c) in self.prompt_convs.iter().enumerate() {
            c.collect_params(&format!("{prefix}.prompt_conv{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rngv(rng: &mut Prng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn partition_4x4_w2_and_merge_inverse() {
        let x = Tensor::leaf(&[1, 4, 4], (0..16).map(|i| i as f64).collect());
        let layout = WindowLayout::new(4, 4, 2, 0).unwrap();
        let win = partition_windows(&x, &layout).unwrap();
        assert_eq!(win.shape(), [4, 4, 1]);
        assert_eq!(win.to_vec()[0..4], [0.0, 1.0, 4.0, 5.0]);
        let back = merge_windows(&win, &layout, 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn partition_constant_map_stays_constant() {
        let x = Tensor::full(&[2, 6, 6], 3.25);
        let layout = WindowLayout::new(6, 6, 2, 1).unwrap();
        let win = partition_windows(&x, &layout).unwrap();
        assert!(win.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn partition_matches_coordinate_oracle_with_shift() {
        let mut rng = Prng::new(21);
        let (c, h, w, win, s) = (3usize, 8usize, 8usize, 4usize, 2usize);
        let x = Tensor::leaf(&[c, h, w], rngv(&mut rng, c * h * w));
        let layout = WindowLayout::new(h, w, win, s).unwrap();
        let got = partition_windows(&x, &layout).unwrap();
        let xd = x.data();
        let gd = got.data();
        // independent index arithmetic for each output token's source coord
        let nwx = w / win;
        for wy in 0..h / win {
            for wx in 0..nwx {
                for ty in 0..win {
                    for tx in 0..win {
                        for ch in 0..c {
                            let sy = (wy * win + ty + s) % h;
                            let sx = (wx * win + tx + s) % w;
                            let out_i = (((wy * nwx + wx) * win * win) + ty * win + tx) * c + ch;
                            assert_eq!(gd[out_i], xd[(ch * h + sy) * w + sx]);
                        }
                    }
                }
            }
        }
        drop(xd);
        drop(gd);
        let back = merge_windows(&got, &layout, c).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn partition_rejects_indivisible_grid() {
        let x = Tensor::zeros(&[1, 5, 4]);
        assert!(WindowLayout::new(5, 4, 2, 0).is_err());
        let layout = WindowLayout {
            height: 5,
            width: 4,
            window: 2,
            shift: 0,
        };
        assert!(partition_windows(&x, &layout).is_err());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let mut rng = Prng::new(3);
        let x = Tensor::leaf(&[2, 5, 7], rngv(&mut rng, 70));
        let padded = reflect_pad_chw(&x, 8, 8);
        assert_eq!(padded.shape(), [2, 8, 8]);
        let back = crop_chw(&padded, 5, 7);
        assert_eq!(back.to_vec(), x.to_vec());
        // mirrored values: row 5 reflects row 3
        let pd = padded.data();
        let xd = x.data();
        assert_eq!(pd[5 * 8], xd[3 * 7]);
    }

    #[test]
    fn token_layout_round_trip() {
        let mut rng = Prng::new(4);
        let x = Tensor::leaf(&[3, 4, 5], rngv(&mut rng, 60));
        let t = chw_to_tokens(&x);
        assert_eq!(t.shape(), [20, 3]);
        let back = tokens_to_chw(&t, 4, 5);
        assert_eq!(back.to_vec(), x.to_vec());
    }

    fn mk_weights(rng: &mut Prng, d: usize, heads: usize, bias: Option<Tensor>) -> AttentionWeights {
        AttentionWeights {
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            bias,
            heads,
        }
    }

    #[test]
    fn empty_prompt_reduces_to_plain_attention_bitwise() {
        let mut rng = Prng::new(7);
        for _ in 0..20 {
            let (s_i, d, heads) = (4 + rng.below(8), 8, 2);
            let weights = mk_weights(&mut rng, d, heads, None);
            let img = Tensor::leaf(&[s_i, d], rngv(&mut rng, s_i * d));
            let plain = prompted_attention(
                &TokenSet {
                    image: img.clone(),
                    prompt: None,
                },
                &weights,
            )
            .unwrap();
            let empty = prompted_attention(
                &TokenSet {
                    image: img.clone(),
                    prompt: Some(Tensor::zeros(&[0, d])),
                },
                &weights,
            )
            .unwrap();
            assert_eq!(plain.to_vec(), empty.to_vec());
        }
    }

    #[test]
    fn symmetric_zero_scores_average_the_values() {
        // zero scores over two value rows [2] and [4] -> softmax 0.5/0.5 -> 3
        let q = Tensor::leaf(&[1, 1, 1], vec![0.0]);
        let k = Tensor::leaf(&[1, 2, 1], vec![0.0, 0.0]);
        let v = Tensor::leaf(&[1, 2, 1], vec![2.0, 4.0]);
        let out = attention_core(&q, &k, &v, None, 1, None);
        assert_eq!(out.to_vec(), vec![3.0]);
    }

    /// Explicit loops over heads, queries and keys; shares nothing with the
    /// vectorized path.
    #[allow(clippy::too_many_arguments)]
    fn loop_oracle(
        img: &[f64],
        s_i: usize,
        prm: &[f64],
        s_p: usize,
        d: usize,
        heads: usize,
        w: &AttentionWeights,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let s_kv = s_i + s_p;
        let token = |t: usize, j: usize| -> f64 {
            if t < s_i {
                img[t * d + j]
            } else {
                prm[(t - s_i) * d + j]
            }
        };
        let proj = |lin: &Linear, row: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let wd = lin.w.data();
            let bd = lin.b.data();
            (0..d)
                .map(|o| {
                    let mut acc = bd[o];
                    for i in 0..d {
                        acc += row(i) * wd[i * d + o];
                    }
                    acc
                })
                .collect()
        };
        let q: Vec<Vec<f64>> = (0..s_i)
            .map(|t| proj(&w.wq, &|j| img[t * d + j]))
            .collect();
        let k: Vec<Vec<f64>> = (0..s_kv).map(|t| proj(&w.wk, &|j| token(t, j))).collect();
        let v: Vec<Vec<f64>> = (0..s_kv).map(|t| proj(&w.wv, &|j| token(t, j))).collect();
        let dh = d / heads;
        let mut out = vec![0.0; s_i * d];
        for h in 0..heads {
            for qi in 0..s_i {
                let mut scores = Vec::with_capacity(s_kv);
                for ki in 0..s_kv {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += q[qi][h * dh + j] * k[ki][h * dh + j];
                    }
                    let mut s = dot / (dh as f64).sqrt();
                    if let Some(b) = bias {
                        s += b[(h * s_i + qi) * s_kv + ki];
                    }
                    scores.push(s);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..dh {
                    let mut acc = 0.0;
                    for ki in 0..s_kv {
                        acc += exps[ki] / z * v[ki][h * dh + j];
                    }
                    out[qi * d + h * dh + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn vectorized_attention_matches_loop_oracle() {
        let mut rng = Prng::new(12);
        let (s_i, s_p, d, heads) = (4usize, 1usize, 8usize, 2usize);
        let bias = Tensor::leaf(&[heads, s_i, s_i + s_p], rngv(&mut rng, heads * s_i * (s_i + s_p)));
        let weights = mk_weights(&mut rng, d, heads, Some(bias.clone()));
        let img = Tensor::leaf(&[s_i, d], rngv(&mut rng, s_i * d));
        let prm = Tensor::leaf(&[s_p, d], rngv(&mut rng, s_p * d));
        let got = prompted_attention(
            &TokenSet {
                image: img.clone(),
                prompt: Some(prm.clone()),
            },
            &weights,
        )
        .unwrap();
        let want = loop_oracle(
            &img.data(),
            s_i,
            &prm.data(),
            s_p,
            d,
            heads,
            &weights,
            Some(&bias.data()),
        );
        let gd = got.data();
        let max_diff = gd
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = Prng::new(31);
        let (s_i, s_p, d, heads) = (9, 4, 6, 3);
        let q = Tensor::leaf(&[2, s_i, d], rngv(&mut rng, 2 * s_i * d));
        let k = Tensor::leaf(&[2, s_i + s_p, d], rngv(&mut rng, 2 * (s_i + s_p) * d));
        let v = Tensor::leaf(&[2, s_i + s_p, d], rngv(&mut rng, 2 * (s_i + s_p) * d));
        let mut probs = Vec::new();
        let _ = attention_core(&q, &k, &v, None, heads, Some(&mut probs));
        assert_eq!(probs.len(), 2 * heads * s_i * (s_i + s_p));
        for row in probs.chunks(s_i + s_p) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn bias_lookup_follows_the_offset_table() {
        // w = 2, single head: B[i][j] = table[(dy+1)*3 + (dx+1)]
        let table: Vec<f64> = (0..9).map(|i| i as f64 * 10.0).collect();
        let t = Tensor::leaf(&[1, 9], table.clone());
        let b = build_relative_bias(&t, None, 2, 2, 1);
        assert_eq!(b.shape(), [1, 4, 4]);
        let bd = b.data();
        let coords = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for (i, &(iy, ix)) in coords.iter().enumerate() {
            for (j, &(jy, jx)) in coords.iter().enumerate() {
                let off = (iy as isize - jy as isize + 1) * 3 + (ix as isize - jx as isize + 1);
                assert_eq!(bd[i * 4 + j], table[off as usize]);
            }
        }
    }

    #[test]
    fn zero_tables_give_zero_bias() {
        let t = Tensor::zeros(&[2, 49]);
        let p = Tensor::zeros(&[2, 4]);
        let b = build_relative_bias(&t, Some(&p), 4, 4, 2);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prompt_bias_columns_audit() {
        // w = 4, S_P = 4: output is [h, 16, 20], columns 16.. drawn from the
        // prompt table at the prompt token's grid position
        let heads = 2;
        let img_t = Tensor::leaf(&[heads, 49], (0..98).map(|i| i as f64).collect());
        let prm_t = Tensor::leaf(
            &[heads, 4],
            vec![100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0],
        );
        let b = build_relative_bias(&img_t, Some(&prm_t), 4, 4, heads);
        assert_eq!(b.shape(), [heads, 16, 20]);
        let bd = b.data();
        for h in 0..heads {
            for i in 0..16 {
                for p in 0..4 {
                    let got = bd[(h * 16 + i) * 20 + 16 + p];
                    let want = ((h * 4 + p) as f64 + 1.0) * 100.0;
                    assert_eq!(got, want, "head {h} row {i} prompt {p}");
                }
            }
        }
        // hand enumeration of one image-image entry: i=(1,2), j=(0,3)
        // dy=1, dx=-1 -> (1+3)*7 + (-1+3) = 30
        let i = 6; // 1*4 + 2
        let j = 3; // 0*4 + 3
        assert_eq!(bd[(0 * 16 + i) * 20 + j], 30.0);
    }

    #[test]
    fn prompted_attention_gradcheck_against_finite_differences() {
        let mut rng = Prng::new(77);
        for instance in 0..5 {
            let s_i = 2 + rng.below(15); // <= 16
            let s_p = 1 + rng.below(4); // <= 4
            let heads = [1, 2][rng.below(2)];
            let d = heads * (1 + rng.below(8 / heads)); // <= 8
            let img = Tensor::param(&[s_i, d], rngv(&mut rng, s_i * d));
            let prm = Tensor::param(&[s_p, d], rngv(&mut rng, s_p * d));
            let weights = mk_weights(&mut rng, d, heads, None);
            let probe = Tensor::leaf(&[s_i, d], rngv(&mut rng, s_i * d));
            let build = || {
                prompted_attention(
                    &TokenSet {
                        image: img.clone(),
                        prompt: Some(prm.clone()),
                    },
                    &weights,
                )
                .unwrap()
                .mul(&probe)
                .sum_all()
            };
            let loss = build();
            loss.backward();
            let leaves = [&img, &prm, &weights.wq.w, &weights.wk.w, &weights.wv.w];
            let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap()).collect();
            let h = 1e-4;
            for (li, leaf) in leaves.iter().enumerate() {
                let base = leaf.to_vec();
                for i in 0..base.len() {
                    let mut p = base.clone();
                    p[i] = base[i] + h;
                    leaf.set_data(&p);
                    let up = build().item();
                    p[i] = base[i] - h;
                    leaf.set_data(&p);
                    let down = build().item();
                    leaf.set_data(&base);
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[li][i];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        ((fd - an) / denom).abs() <= 1e-4,
                        "instance {instance} leaf {li} elem {i}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn prompt_permutation_with_matching_bias_columns_is_invariant() {
        let mut rng = Prng::new(55);
        let (s_i, s_p, d, heads) = (4usize, 3usize, 4usize, 2usize);
        let bias_data = rngv(&mut rng, heads * s_i * (s_i + s_p));
        let weights = mk_weights(&mut rng, d, heads, Some(Tensor::leaf(&[heads, s_i, s_i + s_p], bias_data.clone())));
        let img = Tensor::leaf(&[s_i, d], rngv(&mut rng, s_i * d));
        let prm_data = rngv(&mut rng, s_p * d);
        let out = prompted_attention(
            &TokenSet {
                image: img.clone(),
                prompt: Some(Tensor::leaf(&[s_p, d], prm_data.clone())),
            },
            &weights,
        )
        .unwrap();

        // rotate prompt rows by one and the bias prompt columns identically
        let perm = [2usize, 0, 1];
        let mut prm_perm = vec![0.0; s_p * d];
        for (dst, &src) in perm.iter().enumerate() {
            prm_perm[dst * d..(dst + 1) * d].copy_from_slice(&prm_data[src * d..(src + 1) * d]);
        }
        let s_kv = s_i + s_p;
        let mut bias_perm = bias_data.clone();
        for h in 0..heads {
            for i in 0..s_i {
                for (dst, &src) in perm.iter().enumerate() {
                    bias_perm[(h * s_i + i) * s_kv + s_i + dst] =
                        bias_data[(h * s_i + i) * s_kv + s_i + src];
                }
            }
        }
        let weights2 = AttentionWeights {
            bias: Some(Tensor::leaf(&[heads, s_i, s_kv], bias_perm)),
            ..weights
        };
        let out2 = prompted_attention(
            &TokenSet {
                image: img,
                prompt: Some(Tensor::leaf(&[s_p, d], prm_perm)),
            },
            &weights2,
        )
        .unwrap();
        let max_diff = out
            .data()
            .iter()
            .zip(out2.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "permutation changed output by {max_diff}");
    }

    fn mk_stb(rng: &mut Prng, prompted: bool) -> Stb {
        let down = Resample::Down(Conv2d::new(rng, 3, 8, 3, 2, 1));
        let wiring = PromptWiring {
            in_channels: 4,
            stride: 4,
            per_layer: false,
        };
        Stb::new(rng, down, 2, 2, 4, prompted.then_some(&wiring))
    }

    #[test]
    fn stb_without_prompt_features_is_plain() {
        let mut rng = Prng::new(91);
        let stb = mk_stb(&mut rng, true);
        let x = Tensor::leaf(&[3, 16, 16], rngv(&mut rng, 3 * 256));
        let plain = stb.forward(&x, None, None).unwrap();
        assert_eq!(plain.shape(), [8, 8, 8]);
        let feat = Tensor::leaf(&[4, 16, 16], rngv(&mut rng, 4 * 256));
        let prompted = stb.forward(&x, Some(&feat), None).unwrap();
        // conditioning is live: outputs differ somewhere
        let diff: f64 = plain
            .data()
            .iter()
            .zip(prompted.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn stb_identity_layers_reduce_to_convolution_only() {
        let mut rng = Prng::new(92);
        let stb = mk_stb(&mut rng, true);
        for layer in &stb.layers {
            layer.proj.w.set_data(&vec![0.0; layer.proj.w.numel()]);
            layer.proj.b.set_data(&vec![0.0; layer.proj.b.numel()]);
            layer.mlp.fc2.w.set_data(&vec![0.0; layer.mlp.fc2.w.numel()]);
            layer.mlp.fc2.b.set_data(&vec![0.0; layer.mlp.fc2.b.numel()]);
        }
        let x = Tensor::leaf(&[3, 16, 16], rngv(&mut rng, 3 * 256));
        let feat = Tensor::leaf(&[4, 16, 16], rngv(&mut rng, 4 * 256));
        let out = stb.forward(&x, Some(&feat), None).unwrap();
        let conv_only = match &stb.resample {
            Resample::Down(c) => c.forward(&x),
            Resample::Up(c) => c.forward(&x),
        };
        let max_diff = out
            .data()
            .iter()
            .zip(conv_only.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn prompt_tokens_are_one_fourth_of_image_tokens() {
        let mut rng = Prng::new(93);
        let stb = mk_stb(&mut rng, true);
        // 32x32 input, stride-2 resample -> 16x16 grid, w = 4
        let (s_i, s_p) = stb.prompt_token_counts(16);
        assert_eq!((s_i, s_p), (16, 4));
        assert_eq!(s_p * 4, s_i);
        let x = Tensor::leaf(&[3, 32, 32], rngv(&mut rng, 3 * 1024));
        let feat = Tensor::leaf(&[4, 32, 32], rngv(&mut rng, 4 * 1024));
        let mut records = Vec::new();
        let _ = stb.forward(&x, Some(&feat), Some(&mut records)).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert_eq!(r.s_i, 16);
            assert_eq!(r.s_kv - r.s_i, 4);
        }
    }

    #[test]
    fn shifted_layers_keep_window_partition_consistent() {
        // merge(partition) identity under every shift, via a full layer pass
        // with zeroed residual branches
        let mut rng = Prng::new(94);
        let layer = SwinLayer::new(&mut rng, 4, 2, 4);
        layer.proj.w.set_data(&vec![0.0; layer.proj.w.numel()]);
        layer.proj.b.set_data(&vec![0.0; 4]);
        layer.mlp.fc2.w.set_data(&vec![0.0; layer.mlp.fc2.w.numel()]);
        layer.mlp.fc2.b.set_data(&vec![0.0; 4]);
        let x = Tensor::leaf(&[4, 12, 12], rngv(&mut rng, 4 * 144));
        for shift in [0, 2] {
            let y = layer.forward(&x, None, 4, shift, None).unwrap();
            let max_diff = y
                .data()
                .iter()
                .zip(x.data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-12, "shift {shift}");
        }
    }
}
