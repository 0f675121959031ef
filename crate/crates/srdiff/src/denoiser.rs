//! Noise-prediction U-Net with flaw-map-modulated self-attention.
//!
//! The backbone is a small residual U-Net: conv stem, per-level residual
//! blocks with sinusoidal time conditioning, 2x pooling between levels, a
//! middle block, and a mirrored up path with skip concatenation. Attention
//! blocks sit at the configured spatial resolutions. During refinement
//! training the mean flaw map is pooled to each attention grid and scales
//! the key/value rows: `K_sr = K * (1 + lambda * m)`, `V_sr = V * (1 +
//! lambda * m)`, steering attention toward regions the highlighter flags.
//! Sampling never supplies a map, so generation runs the plain network.

use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ensure_finite, Arr, Scalar, Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::fam::Fam;

/// Architecture of the denoiser.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Square input size in pixels.
    pub image_size: usize,
    /// Image channels (1 for the toy faces).
    pub in_channels: usize,
    /// Channels at the first level.
    pub base_channels: usize,
    /// Per-level channel multipliers; level `i` runs at `image_size / 2^i`.
    pub channel_multipliers: Vec<usize>,
    /// Spatial sizes at which self-attention blocks are inserted.
    pub attention_resolutions: Vec<usize>,
    /// Width of the sinusoidal time embedding and its MLP.
    pub time_embed_dim: usize,
    /// Attention heads (must divide the channel count at attention levels).
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_heads() -> usize {
    1
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            in_channels: 1,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![8],
            time_embed_dim: 32,
            heads: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config(
                "channel_multipliers must be non-empty and positive".into(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and >= 2".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        let levels = self.channel_multipliers.len();
        if self.image_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible across {levels} levels",
                self.image_size
            )));
        }
        let level_sizes: Vec<usize> = (0..levels).map(|i| self.image_size >> i).collect();
        if self.attention_resolutions.is_empty() {
            return Err(Error::Config(
                "at least one attention resolution is required".into(),
            ));
        }
        for &r in &self.attention_resolutions {
            if !level_sizes.contains(&r) {
                return Err(Error::Config(format!(
                    "attention resolution {r} is not one of the level sizes {level_sizes:?}"
                )));
            }
        }
        for (i, &m) in self.channel_multipliers.iter().enumerate() {
            let ch = self.base_channels * m;
            if level_sizes[i] <= 32 && self.attention_resolutions.contains(&level_sizes[i]) {
                if ch % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "channels {ch} at attention level {i} not divisible by {} heads",
                        self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }
}

/// Sinusoidal timestep features: `[sin(t f_0).., cos(t f_0)..]` with
/// geometrically spaced frequencies. `dim` must be even.
pub fn timestep_embedding<F: Scalar>(t: usize, dim: usize) -> Result<Vec<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let tf = t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    for &f in &freqs {
        out.push(F::from_f64((tf * f).sin()));
    }
    for &f in &freqs {
        out.push(F::from_f64((tf * f).cos()));
    }
    Ok(out)
}

/// Pool a flaw map down to an attention grid and flatten row-major, one
/// value per spatial token. Values stay in `[0, 1]`.
pub fn embed_mfam(mfam: &Fam, target_h: usize, target_w: usize) -> Result<Array1<f32>> {
    let (h, w) = (mfam.height(), mfam.width());
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::InvalidArgument(format!(
            "attention grid {target_h}x{target_w} incompatible with {h}x{w} flaw map"
        )));
    }
    if h % target_h != 0 || w % target_w != 0 {
        return Err(Error::InvalidArgument(format!(
            "flaw map {h}x{w} does not pool evenly onto {target_h}x{target_w}"
        )));
    }
    // both factors must agree or pooling would be anisotropic beyond what
    // square attention grids expect; enforce per-axis factors independently
    let fy = h / target_h;
    let fx = w / target_w;
    let mut out = Array1::<f32>::zeros(target_h * target_w);
    for i in 0..target_h {
        for j in 0..target_w {
            let mut s = 0.0f32;
            for di in 0..fy {
                for dj in 0..fx {
                    s += mfam.data()[[i * fy + di, j * fx + dj]];
                }
            }
            out[i * target_w + j] = s / (fy * fx) as f32;
        }
    }
    Ok(out)
}

/// Scaled-dot-product attention with optional key/value modulation.
///
/// `q`, `k`, `v` are `[B, N, D]` token stacks. With a modulation embedding
/// `m` (one `[0,1]` value per token) and weight `lambda`, the key and value
/// rows are scaled by `1 + lambda * m[i]` before standard attention. An
/// absent embedding or `lambda == 0` short-circuits to plain attention.
pub fn modulated_attention<F: Scalar>(
    q: &Arr<F>,
    k: &Arr<F>,
    v: &Arr<F>,
    m_emb: Option<&[F]>,
    lambda: F,
) -> Result<Arr<F>> {
    if q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "attention expects [B, N, D] tokens, got q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = q.shape()[1];
    if let Some(m) = m_emb {
        if m.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "modulation embedding has {} entries for {n} tokens",
                m.len()
            )));
        }
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let out = attend(&mut tape, qv, kv, vv, m_emb, lambda);
    Ok(tape.value(out).clone())
}

/// Tape-level attention shared by the standalone entry point and the model.
fn attend<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    m_emb: Option<&[F]>,
    lambda: F,
) -> Var {
    let n = tape.value(q).shape()[1];
    let d = tape.value(q).shape()[2];
    let (k, v) = match m_emb {
        Some(m) if lambda != F::zero() => {
            let factor = Arr::from_shape_fn(IxDyn(&[1, n, 1]), |ix| {
                F::one() + lambda * m[ix[1]]
            });
            let fv = tape.constant(factor);
            (tape.mul(k, fv), tape.mul(v, fv))
        }
        _ => (k, v),
    };
    let logits = tape.bmm(q, k, true);
    let scaled = tape.scale(logits, F::from_f64(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax_last(scaled);
    tape.bmm(attn, v, false)
}

/// Named parameter storage; construction order fixes checkpoint order.
pub struct ParamBank<F: Scalar> {
    names: Vec<String>,
    values: Vec<Arr<F>>,
}

impl<F: Scalar> ParamBank<F> {
    pub(crate) fn new() -> Self {
        ParamBank {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: String, value: Arr<F>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arr<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arr<F>] {
        &mut self.values
    }

    /// Mutable access to a parameter by its registered name.
    pub fn value_mut_by_name(&mut self, name: &str) -> Option<&mut Arr<F>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.values[i])
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Push every parameter onto a tape, in bank order.
    pub fn push_all(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

pub(crate) fn he_normal<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Arr<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| {
        F::from_f64(rng.sample::<f64, _>(StandardNormal) * std)
    })
}

#[derive(Clone, Copy)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn init<F: Scalar, R: Rng>(
        bank: &mut ParamBank<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = bank.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = bank.add(format!("{name}.bias"), Arr::zeros(IxDyn(&[cout])));
        Conv { w, b, pad: k / 2 }
    }

    pub(crate) fn apply<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Var {
        let y = tape.conv2d(x, p[self.w], 1, self.pad);
        let cout = tape.value(p[self.b]).len();
        let bias = tape.reshape(p[self.b], &[1, cout, 1, 1]);
        tape.add(y, bias)
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Linear {
    pub(crate) w: usize,
    pub(crate) b: usize,
}

impl Linear {
    pub(crate) fn init<F: Scalar, R: Rng>(
        bank: &mut ParamBank<F>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let w = bank.add(
            format!("{name}.weight"),
            he_normal(&[din, dout], din, rng),
        );
        let b = bank.add(format!("{name}.bias"), Arr::zeros(IxDyn(&[1, dout])));
        Linear { w, b }
    }

    /// Apply to `[M, din]`.
    pub(crate) fn apply<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        tape.add(y, p[self.b])
    }
}

#[derive(Clone, Copy)]
struct GroupNorm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

/// Largest group count <= 4 dividing the channel count.
fn gn_groups(ch: usize) -> usize {
    (1..=ch.min(4)).rev().find(|g| ch % g == 0).unwrap_or(1)
}

impl GroupNorm {
    fn init<F: Scalar>(bank: &mut ParamBank<F>, name: &str, ch: usize) -> Self {
        let gamma = bank.add(
            format!("{name}.gamma"),
            Arr::from_elem(IxDyn(&[1, ch, 1, 1]), F::one()),
        );
        let beta = bank.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[1, ch, 1, 1])));
        GroupNorm {
            gamma,
            beta,
            groups: gn_groups(ch),
        }
    }

    fn apply<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups;
        let grouped = tape.reshape(x, &[b, g, c / g, h, w]);
        let mean = tape.mean_axes(grouped, &[2, 3, 4]);
        let centered = tape.sub(grouped, mean);
        let sq = tape.mul(centered, centered);
        let var = tape.mean_axes(sq, &[2, 3, 4]);
        let inv_std = tape.rsqrt(var, F::from_f64(1e-5));
        let normed = tape.mul(centered, inv_std);
        let back = tape.reshape(normed, &[b, c, h, w]);
        let scaled = tape.mul(back, p[self.gamma]);
        tape.add(scaled, p[self.beta])
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    time: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

impl ResBlock {
    fn init<F: Scalar, R: Rng>(
        bank: &mut ParamBank<F>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::init(bank, &format!("{name}.gn1"), cin),
            conv1: Conv::init(bank, &format!("{name}.conv1"), cin, cout, 3, rng),
            time: Linear::init(bank, &format!("{name}.time"), time_dim, cout, rng),
            gn2: GroupNorm::init(bank, &format!("{name}.gn2"), cout),
            conv2: Conv::init(bank, &format!("{name}.conv2"), cout, cout, 3, rng),
            skip: if cin != cout {
                Some(Conv::init(bank, &format!("{name}.skip"), cin, cout, 1, rng))
            } else {
                None
            },
            cout,
        }
    }

    fn apply<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var, t_emb: Var) -> Var {
        let h = self.gn1.apply(tape, p, x);
        let h = tape.silu(h);
        let h = self.conv1.apply(tape, p, h);
        // per-sample channel bias from the time embedding
        let bias = self.time.apply(tape, p, t_emb);
        let b = tape.value(bias).shape()[0];
        let bias = tape.reshape(bias, &[b, self.cout, 1, 1]);
        let h = tape.add(h, bias);
        let h = self.gn2.apply(tape, p, h);
        let h = tape.silu(h);
        let h = self.conv2.apply(tape, p, h);
        let shortcut = match &self.skip {
            Some(conv) => conv.apply(tape, p, x),
            None => x,
        };
        tape.add(h, shortcut)
    }
}

struct AttnBlock {
    gn: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
}

impl AttnBlock {
    fn init<F: Scalar, R: Rng>(
        bank: &mut ParamBank<F>,
        name: &str,
        ch: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        AttnBlock {
            gn: GroupNorm::init(bank, &format!("{name}.gn"), ch),
            q: Linear::init(bank, &format!("{name}.q"), ch, ch, rng),
            k: Linear::init(bank, &format!("{name}.k"), ch, ch, rng),
            v: Linear::init(bank, &format!("{name}.v"), ch, ch, rng),
            proj: Linear::init(bank, &format!("{name}.proj"), ch, ch, rng),
            heads,
        }
    }

    fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        x: Var,
        modulation: Option<(&Fam, F)>,
    ) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let normed = self.gn.apply(tape, p, x);
        let tokens = tape.permute(normed, &[0, 2, 3, 1]);
        let flat = tape.reshape(tokens, &[b * n, c]);
        let to_heads = |tape: &mut Tape<F>, lin: &Linear| -> Var {
            let y = lin.apply(tape, p, flat);
            let y = tape.reshape(y, &[b, n, self.heads, c / self.heads]);
            let y = tape.permute(y, &[0, 2, 1, 3]);
            tape.reshape(y, &[b * self.heads, n, c / self.heads])
        };
        let q = to_heads(tape, &self.q);
        let k = to_heads(tape, &self.k);
        let v = to_heads(tape, &self.v);
        let m_emb: Option<Vec<F>> = modulation.and_then(|(fam, lambda)| {
            if lambda == F::zero() {
                None
            } else {
                let emb = embed_mfam(fam, h, w).expect("flaw map pools onto attention grid");
                Some(emb.iter().map(|&x| F::from_f64(x as f64)).collect())
            }
        });
        let lambda = modulation.map(|(_, l)| l).unwrap_or_else(F::zero);
        let out = attend(tape, q, k, v, m_emb.as_deref(), lambda);
        let out = tape.reshape(out, &[b, self.heads, n, c / self.heads]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[b * n, c]);
        let out = self.proj.apply(tape, p, out);
        let out = tape.reshape(out, &[b, h, w, c]);
        let out = tape.permute(out, &[0, 3, 1, 2]);
        tape.add(out, x)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

/// The noise-prediction network.
pub struct Denoiser<F: Scalar> {
    pub cfg: DenoiserConfig,
    bank: ParamBank<F>,
    time_mlp: (Linear, Linear),
    conv_in: Conv,
    downs: Vec<Level>,
    mid: (ResBlock, Option<AttnBlock>, ResBlock),
    ups: Vec<Level>,
    out_gn: GroupNorm,
    conv_out: Conv,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new<R: Rng>(cfg: DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut bank = ParamBank::new();
        let td = cfg.time_embed_dim;
        let time_mlp = (
            Linear::init(&mut bank, "time_mlp.0", td, td, rng),
            Linear::init(&mut bank, "time_mlp.1", td, td, rng),
        );
        let conv_in = Conv::init(
            &mut bank,
            "conv_in",
            cfg.in_channels,
            cfg.base_channels,
            3,
            rng,
        );
        let levels = cfg.channel_multipliers.len();
        let wants_attn =
            |size: usize| -> bool { cfg.attention_resolutions.contains(&size) };
        let mut downs = Vec::new();
        let mut ch = cfg.base_channels;
        let mut down_ch = Vec::new();
        for i in 0..levels {
            let cout = cfg.level_channels(i);
            let size = cfg.level_size(i);
            let res = ResBlock::init(&mut bank, &format!("down.{i}.res"), ch, cout, td, rng);
            let attn = wants_attn(size).then(|| {
                AttnBlock::init(&mut bank, &format!("down.{i}.attn"), cout, cfg.heads, rng)
            });
            downs.push(Level { res, attn });
            down_ch.push(cout);
            ch = cout;
        }
        let coarsest = cfg.level_size(levels - 1);
        let mid = (
            ResBlock::init(&mut bank, "mid.res1", ch, ch, td, rng),
            wants_attn(coarsest).then(|| {
                AttnBlock::init(&mut bank, "mid.attn", ch, cfg.heads, rng)
            }),
            ResBlock::init(&mut bank, "mid.res2", ch, ch, td, rng),
        );
        let mut ups = Vec::new();
        for i in (0..levels).rev() {
            let cout = cfg.level_channels(i);
            let size = cfg.level_size(i);
            let cin = ch + down_ch[i];
            let res = ResBlock::init(&mut bank, &format!("up.{i}.res"), cin, cout, td, rng);
            let attn = wants_attn(size).then(|| {
                AttnBlock::init(&mut bank, &format!("up.{i}.attn"), cout, cfg.heads, rng)
            });
            ups.push(Level { res, attn });
            ch = cout;
        }
        let out_gn = GroupNorm::init(&mut bank, "out_gn", ch);
        let conv_out = Conv::init(&mut bank, "conv_out", ch, cfg.in_channels, 3, rng);
        Ok(Denoiser {
            cfg,
            bank,
            time_mlp,
            conv_in,
            downs,
            mid,
            ups,
            out_gn,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &ParamBank<F> {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut ParamBank<F> {
        &mut self.bank
    }

    /// Record a full forward pass on `tape`, returning the parameter vars
    /// (bank order) and the output var. `ts` gives the timestep of each
    /// batch element; `modulation` carries the mean flaw map and the
    /// reverse-process weight when refinement is active.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        x: &Arr<F>,
        ts: &[usize],
        modulation: Option<(&Fam, F)>,
    ) -> Result<(Vec<Var>, Var)> {
        if x.ndim() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects [B, C, H, W], got {:?}",
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.cfg.in_channels || h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match configured {}x{}x{}",
                x.shape(),
                self.cfg.in_channels,
                self.cfg.image_size,
                self.cfg.image_size
            )));
        }
        if ts.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} timesteps for batch of {b}",
                ts.len()
            )));
        }
        if let Some((fam, _)) = modulation {
            if fam.height() != h || fam.width() != w {
                return Err(Error::ShapeMismatch(format!(
                    "flaw map {}x{} vs image {h}x{w}",
                    fam.height(),
                    fam.width()
                )));
            }
        }
        let p = self.bank.push_all(tape);

        // time conditioning, one embedding row per batch element
        let td = self.cfg.time_embed_dim;
        let mut sin = Array2::<F>::zeros((b, td));
        for (i, &t) in ts.iter().enumerate() {
            let emb = timestep_embedding::<F>(t, td)?;
            for (j, &e) in emb.iter().enumerate() {
                sin[[i, j]] = e;
            }
        }
        let sin = tape.constant(sin.into_dyn());
        let t0 = self.time_mlp.0.apply(tape, &p, sin);
        let t0 = tape.silu(t0);
        let t_emb = self.time_mlp.1.apply(tape, &p, t0);

        let xin = tape.constant(x.clone());
        let mut cur = self.conv_in.apply(tape, &p, xin);
        let mut skips = Vec::with_capacity(self.downs.len());
        let levels = self.downs.len();
        for (i, level) in self.downs.iter().enumerate() {
            cur = level.res.apply(tape, &p, cur, t_emb);
            if let Some(attn) = &level.attn {
                cur = attn.apply(tape, &p, cur, modulation);
            }
            skips.push(cur);
            if i < levels - 1 {
                cur = tape.avg_pool2(cur);
            }
        }
        cur = self.mid.0.apply(tape, &p, cur, t_emb);
        if let Some(attn) = &self.mid.1 {
            cur = attn.apply(tape, &p, cur, modulation);
        }
        cur = self.mid.2.apply(tape, &p, cur, t_emb);
        for (j, level) in self.ups.iter().enumerate() {
            let i = levels - 1 - j;
            let skip = skips[i];
            cur = tape.concat_c(cur, skip);
            cur = level.res.apply(tape, &p, cur, t_emb);
            if let Some(attn) = &level.attn {
                cur = attn.apply(tape, &p, cur, modulation);
            }
            if i > 0 {
                cur = tape.upsample2x(cur);
            }
        }
        cur = self.out_gn.apply(tape, &p, cur);
        cur = tape.silu(cur);
        cur = self.conv_out.apply(tape, &p, cur);
        Ok((p, cur))
    }

    /// Plain inference: predict the noise in `x_t`, optionally with
    /// flaw-map modulation (training-time refinement only).
    pub fn predict(
        &self,
        x_t: &Arr<F>,
        t: usize,
        modulation: Option<(&Fam, F)>,
    ) -> Result<Arr<F>> {
        let mut tape = Tape::new();
        let ts = vec![t; x_t.shape()[0]];
        let (_, out) = self.forward(&mut tape, x_t, &ts, modulation)?;
        let val = tape.value(out).clone();
        ensure_finite(&val, "denoiser output")?;
        Ok(val)
    }
}

impl<F: Scalar> NoisePredictor<F> for Denoiser<F> {
    fn predict_noise(&self, x_t: &Arr<F>, t: usize) -> Arr<F> {
        self.predict(x_t, t, None)
            .expect("denoiser inference failed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::randn;
    use ndarray::Array2 as NdArray2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            in_channels: 1,
            base_channels: 2,
            channel_multipliers: vec![1],
            attention_resolutions: vec![8],
            time_embed_dim: 4,
            heads: 1,
        }
    }

    #[test]
    fn time_embedding_basics() {
        let e0 = timestep_embedding::<f64>(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e0[i], 0.0);
            assert_eq!(e0[4 + i], 1.0);
        }
        assert_eq!(
            timestep_embedding::<f64>(17, 8).unwrap(),
            timestep_embedding::<f64>(17, 8).unwrap()
        );
        assert!(timestep_embedding::<f64>(3, 7).is_err());
        // all timesteps of a 200-step chain are distinguishable at dim 8
        let embs: Vec<Vec<f64>> = (0..200)
            .map(|t| timestep_embedding::<f64>(t, 8).unwrap())
            .collect();
        for a in 0..200 {
            for b in a + 1..200 {
                let d2: f64 = embs[a]
                    .iter()
                    .zip(embs[b].iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d2 > 1e-12, "t={a} and t={b} collide");
            }
        }
    }

    #[test]
    fn embed_mfam_examples() {
        // constant map stays constant at any grid
        let c = Fam::new(NdArray2::from_elem((8, 8), 0.3f32)).unwrap();
        for target in [8usize, 4, 2, 1] {
            let e = embed_mfam(&c, target, target).unwrap();
            assert_eq!(e.len(), target * target);
            assert!(e.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
        // quadrant constants pool to exactly those constants
        let mut q = NdArray2::<f32>::zeros((4, 4));
        for i in 0..2 {
            for j in 0..2 {
                q[[i, j]] = 0.0;
                q[[i, j + 2]] = 0.2;
                q[[i + 2, j]] = 0.6;
                q[[i + 2, j + 2]] = 1.0;
            }
        }
        let e = embed_mfam(&Fam::new(q).unwrap(), 2, 2).unwrap();
        assert_eq!(e.to_vec(), vec![0.0, 0.2, 0.6, 1.0]);
        // identity flatten at source size
        let m = Fam::new(NdArray2::from_shape_fn((2, 3), |(i, j)| {
            (i * 3 + j) as f32 / 5.0
        }))
        .unwrap();
        let e = embed_mfam(&m, 2, 3).unwrap();
        assert_eq!(e.to_vec(), m.data().iter().cloned().collect::<Vec<_>>());
        // a larger target than the source is rejected
        assert!(embed_mfam(&m, 4, 6).is_err());
        assert!(embed_mfam(&m, 2, 2).is_err()); // 3 does not pool onto 2
    }

    #[test]
    fn attention_identity_without_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = randn::<f64, _>(&[2, 5, 4], &mut rng);
        let k = randn::<f64, _>(&[2, 5, 4], &mut rng);
        let v = randn::<f64, _>(&[2, 5, 4], &mut rng);
        let base = modulated_attention(&q, &k, &v, None, 0.5).unwrap();
        let zeros = vec![0.0f64; 5];
        let with_zero_map = modulated_attention(&q, &k, &v, Some(&zeros), 0.5).unwrap();
        let with_zero_lambda =
            modulated_attention(&q, &k, &v, Some(&[1.0; 5]), 0.0).unwrap();
        for ((a, b), c) in base.iter().zip(with_zero_map.iter()).zip(with_zero_lambda.iter()) {
            assert!((a - b).abs() < 1e-6);
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_single_token_closed_form() {
        let one = Arr::from_elem(IxDyn(&[1, 1, 1]), 1.0f64);
        let out = modulated_attention(&one, &one, &one, Some(&[1.0]), 0.1).unwrap();
        assert!((out[[0, 0, 0]] - 1.1).abs() < 1e-9);
    }

    #[test]
    fn attention_output_is_convex_combination_of_modulated_values() {
        // with V = ones, every output is an attention-weighted mean of
        // (1 + lambda m_j), hence bounded by the extremes of that factor
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randn::<f64, _>(&[1, 6, 3], &mut rng);
        let k = randn::<f64, _>(&[1, 6, 3], &mut rng);
        let v = Arr::from_elem(IxDyn(&[1, 6, 3]), 1.0f64);
        let m: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let lambda = 0.3;
        let out = modulated_attention(&q, &k, &v, Some(&m), lambda).unwrap();
        for &o in out.iter() {
            assert!(o >= 1.0 - 1e-9 && o <= 1.0 + lambda + 1e-9, "o = {o}");
        }
        // and with lambda = 0 it is exactly 1 (softmax rows sum to one)
        let plain = modulated_attention(&q, &k, &v, None, 0.0).unwrap();
        for &o in plain.iter() {
            assert!((o - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_token_mismatch() {
        let q = Arr::<f64>::zeros(IxDyn(&[1, 4, 2]));
        assert!(modulated_attention(&q, &q, &q, Some(&[0.0; 3]), 0.1).is_err());
        let k = Arr::<f64>::zeros(IxDyn(&[1, 5, 2]));
        assert!(modulated_attention(&q, &k, &q, None, 0.1).is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        for cfg in [tiny_cfg(), DenoiserConfig::default()] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model = Denoiser::<f32>::new(cfg.clone(), &mut rng).unwrap();
            let mut drng = ChaCha8Rng::seed_from_u64(6);
            let x = randn::<f32, _>(&[2, cfg.in_channels, cfg.image_size, cfg.image_size], &mut drng);
            let y1 = model.predict(&x, 3, None).unwrap();
            let y2 = model.predict(&x, 3, None).unwrap();
            assert_eq!(y1.shape(), x.shape());
            assert_eq!(y1, y2);
            // same seed, same params
            let mut rng2 = ChaCha8Rng::seed_from_u64(5);
            let model2 = Denoiser::<f32>::new(cfg.clone(), &mut rng2).unwrap();
            assert_eq!(model.predict(&x, 3, None).unwrap(), model2.predict(&x, 3, None).unwrap());
        }
    }

    #[test]
    fn absent_and_zero_modulation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let x = randn::<f64, _>(&[1, 1, 8, 8], &mut rng);
        let plain = model.predict(&x, 2, None).unwrap();
        let zero_fam = Fam::zeros(8, 8);
        let with_zero_map = model.predict(&x, 2, Some((&zero_fam, 0.5))).unwrap();
        let hot_fam = Fam::new(NdArray2::from_elem((8, 8), 1.0f32)).unwrap();
        let with_zero_lambda = model.predict(&x, 2, Some((&hot_fam, 0.0))).unwrap();
        for ((a, b), c) in plain.iter().zip(with_zero_map.iter()).zip(with_zero_lambda.iter()) {
            assert!((a - b).abs() < 1e-6);
            assert!((a - c).abs() < 1e-6);
        }
        // nonzero modulation must actually change the output
        let with_mod = model.predict(&x, 2, Some((&hot_fam, 0.5))).unwrap();
        let diff: f64 = plain
            .iter()
            .zip(with_mod.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn pooling_invariant_map_perturbation_leaves_output_unchanged() {
        // the attention grid equals the image here, so pool factor is 1 at
        // level 0; use the default 16px config where attention sits at 8px:
        // moving mass within one 2x2 pooling cell keeps the embedding equal
        let cfg = DenoiserConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Denoiser::<f64>::new(cfg, &mut rng).unwrap();
        let x = randn::<f64, _>(&[1, 1, 16, 16], &mut rng);
        let mut a = NdArray2::<f32>::zeros((16, 16));
        a[[0, 0]] = 0.8; // cell (0,0) holds all the mass in one corner
        let mut b = NdArray2::<f32>::zeros((16, 16));
        b[[0, 0]] = 0.2; // same cell mean, different arrangement
        b[[0, 1]] = 0.2;
        b[[1, 0]] = 0.2;
        b[[1, 1]] = 0.2;
        let fam_a = Fam::new(a).unwrap();
        let fam_b = Fam::new(b).unwrap();
        let ya = model.predict(&x, 4, Some((&fam_a, 0.1))).unwrap();
        let yb = model.predict(&x, 4, Some((&fam_b, 0.1))).unwrap();
        assert_eq!(ya, yb, "embedding-equal maps must give identical outputs");
        // but moving the mass across cells changes the result
        let mut c = NdArray2::<f32>::zeros((16, 16));
        c[[8, 8]] = 0.8;
        let fam_c = Fam::new(c).unwrap();
        let yc = model.predict(&x, 4, Some((&fam_c, 0.1))).unwrap();
        assert_ne!(ya, yc);
    }

    #[test]
    fn gradients_reach_attention_projections_under_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let x = randn::<f64, _>(&[1, 1, 8, 8], &mut rng);
        let fam = Fam::new(NdArray2::from_elem((8, 8), 0.7f32)).unwrap();
        let mut tape = Tape::new();
        let (pvars, out) = model.forward(&mut tape, &x, &[3], Some((&fam, 0.05))).unwrap();
        let sq = tape.mul(out, out);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let mut checked = 0;
        for (i, name) in model.bank().names().iter().enumerate() {
            if name.contains(".q.") || name.contains(".k.") || name.contains(".v.") {
                let g = grads
                    .get(pvars[i])
                    .unwrap_or_else(|| panic!("no gradient for {name}"));
                let norm: f64 = g.iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "zero gradient for {name}");
                checked += 1;
            }
        }
        assert!(checked >= 6, "expected several attention projections");
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let mut bad = tiny_cfg();
        bad.attention_resolutions = vec![];
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.attention_resolutions = vec![5];
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.time_embed_dim = 5;
        assert!(bad.validate().is_err());
        let mut bad = DenoiserConfig::default();
        bad.channel_multipliers = vec![1, 2, 3, 4, 5, 6];
        assert!(bad.validate().is_err()); // 16px cannot halve five times evenly
    }
}
