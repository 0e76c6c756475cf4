//! Single-stage displacement network.
//!
//! Encoder: two weight-shared branches over the pre and post frames plus a
//! mid branch over their channel concatenation, which also absorbs the pre and
//! post features at every level. Bottleneck: three pairwise token attentions
//! projected to a channel gate on the mid features. Decoder: per level,
//! attention-gated skip fusion with learned and bilinear upsampling, then a
//! ConvLSTM whose state carries across the frames of a sequence, then a
//! 2-channel displacement head. Head outputs are rescaled to full-resolution
//! pixels, upsampled and summed.
//!
//! Ablations: without `use_cacff` the encoder is a single stream over the
//! concatenated frames; without `use_tca` the bottleneck is a 1x1 convolution
//! over the stream concatenation; without `use_caf` the decoder concatenates
//! `h_prev` with the mid skip and applies the learned upsampling only.

pub mod layers;
pub mod params;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::diff::{grid_to_tensor, lsqse_strain, tensor_to_grid, upsample_half_pixel, warp_upsampled};
use crate::fieldops::{self, DisplacementField, LsqseConfig, StrainMap};
use crate::rfdata::{read_json, write_json, RfFrame, RfSequence};
use layers::{act, conv, sigmoid, softmax, tconv, Builder};
pub use params::{ParamSet, ParamShape};

/// Initial scale of the displacement heads relative to the hidden layers.
pub const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_cacff: bool,
    pub use_tca: bool,
    pub use_caf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_cacff: true,
            use_tca: true,
            use_caf: true,
        }
    }
}

impl Ablation {
    pub const BASELINE: Self = Self {
        use_cacff: false,
        use_tca: false,
        use_caf: false,
    };
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    /// Hidden channels of the ConvLSTM at decoder levels `0..levels`
    /// (level 0 is full resolution).
    pub lstm_hidden: Vec<usize>,
    pub upsample_factor: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_true")]
    pub normalize_input: bool,
    #[serde(default)]
    pub lsqse: LsqseConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::new(4, 8, 3)
    }
}

impl NetworkConfig {
    pub fn new(levels: usize, base_channels: usize, frames: usize) -> Self {
        Self {
            levels,
            base_channels,
            frames,
            lstm_hidden: (0..levels)
                .map(|j| base_channels << (j.max(1) - 1))
                .collect(),
            upsample_factor: 4,
            ablation: Ablation::default(),
            normalize_input: true,
            lsqse: LsqseConfig::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Configuration("network needs at least 2 levels".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Configuration("base channels must be >= 4".into()));
        }
        if self.frames == 0 {
            return Err(Error::Configuration("T must be >= 1".into()));
        }
        if self.lstm_hidden.len() != self.levels || self.lstm_hidden.contains(&0) {
            return Err(Error::Configuration(format!(
                "lstm_hidden {:?} must list {} positive widths",
                self.lstm_hidden, self.levels
            )));
        }
        if self.upsample_factor == 0 {
            return Err(Error::Configuration("upsample factor must be >= 1".into()));
        }
        if self.ablation.use_tca && !self.ablation.use_cacff {
            return Err(Error::Configuration(
                "the attention bottleneck needs the three-stream encoder".into(),
            ));
        }
        Ok(())
    }

    /// Encoder channels at level `l >= 1`.
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by {div}"
            )));
        }
        if self.lsqse.window > h {
            return Err(Error::Shape(format!(
                "LSQSE window {} longer than {h} rows",
                self.lsqse.window
            )));
        }
        Ok(())
    }

    fn streams(&self) -> usize {
        if self.ablation.use_cacff {
            3
        } else {
            1
        }
    }

    /// Decoder input channels (`h_prev`) for output level `j`.
    fn h_prev_channels(&self, j: usize) -> usize {
        if j + 1 == self.levels {
            self.channels(self.levels)
        } else {
            self.lstm_hidden[j + 1]
        }
    }
}

/// Encoder outputs; index `l - 1` holds level `l`. `pre` and `post` are empty
/// for the single-stream encoder.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
    pub mid: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LevelState {
    pub h: Tensor,
    pub c: Tensor,
}

/// ConvLSTM state per decoder level, created as zeros on first use.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    pub levels: Vec<Option<LevelState>>,
}

impl DecoderState {
    pub fn new(levels: usize) -> Self {
        Self {
            levels: vec![None; levels],
        }
    }
}

/// Differentiable result for one time step; maps are `(H, W)`.
#[derive(Debug, Clone)]
pub struct StepTensors {
    pub d_y: Tensor,
    pub d_x: Tensor,
    pub strain: Tensor,
    /// The network-input post frame warped by `(d_y, d_x)`.
    pub warped: Tensor,
    /// Per decoder level `(1, 2, H/2^j, W/2^j)` heads, in level pixels.
    pub increments: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub displacement: DisplacementField,
    pub strain: StrainMap,
    pub warped: RfFrame,
    /// Full-resolution contributions of each decoder level, summing to
    /// `displacement`.
    pub increments: Vec<DisplacementField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub steps: Vec<StepResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchFile {
    config: NetworkConfig,
    params: Vec<ParamShape>,
}

#[derive(Debug, Clone)]
pub struct UsseNet {
    cfg: NetworkConfig,
    params: ParamSet,
    dtype: DType,
    device: Device,
}

fn enc_block_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.conv1"),
        format!("{prefix}.conv2"),
        format!("{prefix}.skip"),
    ]
}

fn res_block(b: &mut Builder<'_>, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    let [c1, c2, sk] = enc_block_names(prefix);
    b.conv(&c1, cin, cout, 3, true, 1.0)?;
    b.conv(&c2, cout, cout, 3, true, 1.0)?;
    b.conv(&sk, cin, cout, 1, true, 1.0)
}

impl UsseNet {
    pub fn new(cfg: NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            seed,
            dtype,
            device,
        };
        let l_max = cfg.levels;
        for l in 1..=l_max {
            let cout = cfg.channels(l);
            let mid_in = if l == 1 { 2 } else { cfg.channels(l - 1) };
            if cfg.ablation.use_cacff {
                let pp_in = if l == 1 { 1 } else { cfg.channels(l - 1) };
                res_block(&mut b, &format!("enc.pp.l{l}"), pp_in, cout)?;
            }
            res_block(&mut b, &format!("enc.mid.l{l}"), mid_in, cout)?;
        }
        let cb = cfg.channels(l_max);
        if cfg.ablation.use_tca {
            b.conv("bottleneck.tca.proj", 3 * cb, cb, 1, true, 0.5)?;
        } else {
            b.conv("bottleneck.proj", cfg.streams() * cb, cb, 1, true, 1.0)?;
        }
        for j in (0..l_max).rev() {
            let l = j + 1;
            let cl = cfg.channels(l);
            let hp = cfg.h_prev_channels(j);
            let hd = cfg.lstm_hidden[j];
            let fused_in = hp + cl;
            if cfg.ablation.use_caf {
                b.conv(&format!("dec.j{j}.gate"), cfg.streams() * cl, cfg.streams(), 1, true, 0.5)?;
                b.conv(&format!("dec.j{j}.bilinear"), fused_in, hd, 1, false, 1.0)?;
            }
            b.tconv(&format!("dec.j{j}.up"), fused_in, hd)?;
            b.conv(&format!("dec.j{j}.lstm"), 2 * hd, 4 * hd, 3, true, 0.5)?;
            b.conv(&format!("head.j{j}"), hd, 2, 3, true, HEAD_GAIN)?;
        }
        Ok(Self {
            cfg,
            params,
            dtype,
            device: device.clone(),
        })
    }

    /// Wraps existing parameters after checking them against the layout
    /// implied by `cfg`.
    pub fn from_params(cfg: NetworkConfig, params: ParamSet) -> Result<Self> {
        let expected = Self::expected_shapes(&cfg)?;
        let got = params.shapes();
        if expected != got {
            return Err(Error::IncompatibleCheckpoint(describe_mismatch(&expected, &got)));
        }
        let first = params
            .iter()
            .next()
            .map(|(_, v)| (v.dtype(), v.device().clone()))
            .ok_or_else(|| Error::IncompatibleCheckpoint("no parameters".into()))?;
        Ok(Self {
            cfg,
            params,
            dtype: first.0,
            device: first.1,
        })
    }

    pub fn expected_shapes(cfg: &NetworkConfig) -> Result<Vec<ParamShape>> {
        Ok(Self::new(cfg.clone(), 0, DType::F32, &Device::Cpu)?.params.shapes())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn res_down(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let [c1, c2, sk] = enc_block_names(prefix);
        let p = &self.params;
        let main = conv(p, &c2, &act(&conv(p, &c1, x, 2)?)?, 1)?;
        let skip = conv(p, &sk, x, 2)?;
        act(&(main + skip)?)
    }

    /// `pre`, `post`: `(1, 1, H, W)` network inputs.
    pub fn encode(&self, pre: &Tensor, post: &Tensor) -> Result<EncoderFeatures> {
        let (_, _, h, w) = pre.dims4()?;
        if post.dims() != pre.dims() {
            return Err(Error::Shape(format!("pre {:?} vs post {:?}", pre.dims(), post.dims())));
        }
        self.cfg.check_input(h, w)?;
        let mut feats = EncoderFeatures {
            pre: Vec::new(),
            post: Vec::new(),
            mid: Vec::new(),
        };
        let mut x_mid = Tensor::cat(&[pre, post], 1)?;
        let (mut x_pre, mut x_post) = (pre.clone(), post.clone());
        for l in 1..=self.cfg.levels {
            let mut m = self.res_down(&format!("enc.mid.l{l}"), &x_mid)?;
            if self.cfg.ablation.use_cacff {
                let name = format!("enc.pp.l{l}");
                x_pre = self.res_down(&name, &x_pre)?;
                x_post = self.res_down(&name, &x_post)?;
                m = ((m + &x_pre)? + &x_post)?;
                feats.pre.push(x_pre.clone());
                feats.post.push(x_post.clone());
            }
            feats.mid.push(m.clone());
            x_mid = m;
        }
        Ok(feats)
    }

    /// Cross-stream attention gate on `f_mid`. All inputs `(1, C, h, w)`.
    pub fn tca(&self, f_pre: &Tensor, f_post: &Tensor, f_mid: &Tensor) -> Result<Tensor> {
        let scores = self.tca_scores(f_pre, f_post, f_mid)?;
        Ok((scores * f_mid)?)
    }

    /// Channel-softmax attention scores of the bottleneck.
    pub fn tca_scores(&self, f_pre: &Tensor, f_post: &Tensor, f_mid: &Tensor) -> Result<Tensor> {
        let dims = f_mid.dims();
        if f_pre.dims() != dims || f_post.dims() != dims {
            return Err(Error::Shape(format!(
                "bottleneck shapes {:?}, {:?}, {:?}",
                f_pre.dims(),
                f_post.dims(),
                dims
            )));
        }
        let (_, c, h, w) = f_mid.dims4()?;
        let tokens = |x: &Tensor| -> Result<Tensor> { Ok(x.reshape((c, h * w))?.t()?) };
        let scale = 1.0 / (c as f64).sqrt();
        let attend = |q: &Tensor, k: &Tensor| -> Result<Tensor> {
            let (q, k) = (tokens(q)?, tokens(k)?);
            let a = softmax(&q.matmul(&k.t()?)?.affine(scale, 0.0)?, 1)?;
            Ok(a.matmul(&k)?.t()?.reshape((1, c, h, w))?)
        };
        let pairs = Tensor::cat(
            &[
                attend(f_pre, f_post)?,
                attend(f_pre, f_mid)?,
                attend(f_post, f_mid)?,
            ],
            1,
        )?;
        softmax(&conv(&self.params, "bottleneck.tca.proj", &pairs, 1)?, 1)
    }

    fn streams_at(&self, feats: &EncoderFeatures, l: usize, bottleneck: &Tensor) -> Vec<Tensor> {
        let mid = if l == self.cfg.levels {
            bottleneck.clone()
        } else {
            feats.mid[l - 1].clone()
        };
        if self.cfg.ablation.use_cacff {
            vec![feats.pre[l - 1].clone(), feats.post[l - 1].clone(), mid]
        } else {
            vec![mid]
        }
    }

    pub fn bottleneck(&self, feats: &EncoderFeatures) -> Result<Tensor> {
        let l = self.cfg.levels;
        if self.cfg.ablation.use_tca {
            self.tca(&feats.pre[l - 1], &feats.post[l - 1], &feats.mid[l - 1])
        } else {
            let mut s = Vec::new();
            if self.cfg.ablation.use_cacff {
                s.push(feats.pre[l - 1].clone());
                s.push(feats.post[l - 1].clone());
            }
            s.push(feats.mid[l - 1].clone());
            conv(&self.params, "bottleneck.proj", &Tensor::cat(&s, 1)?, 1)
        }
    }

    /// Skip gate of decoder level `j`: one sigmoid weight per stream.
    pub fn caf_gate(&self, j: usize, skips: &[Tensor]) -> Result<Tensor> {
        sigmoid(&conv(&self.params, &format!("dec.j{j}.gate"), &Tensor::cat(skips, 1)?, 1)?)
    }

    /// Fuses `h_prev` with the level skips and upsamples by 2.
    pub fn caf(&self, j: usize, h_prev: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        let (_, _, h, w) = h_prev.dims4()?;
        if let Some(bad) = skips.iter().find(|s| s.dims().len() != 4 || s.dims()[2..] != [h, w]) {
            return Err(Error::Shape(format!(
                "skip {:?} does not match h_prev {:?}",
                bad.dims(),
                h_prev.dims()
            )));
        }
        let p = &self.params;
        if !self.cfg.ablation.use_caf {
            let mid = skips.last().ok_or_else(|| Error::Shape("no skips".into()))?;
            return tconv(p, &format!("dec.j{j}.up"), &Tensor::cat(&[h_prev, mid], 1)?);
        }
        let gate = self.caf_gate(j, skips)?;
        let mut weighted = None;
        for (k, s) in skips.iter().enumerate() {
            let term = gate.narrow(1, k, 1)?.broadcast_mul(s)?;
            weighted = Some(match weighted {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let combined = Tensor::cat(&[h_prev, &weighted.expect("non-empty skips")], 1)?;
        let learned = tconv(p, &format!("dec.j{j}.up"), &combined)?;
        let bilinear = conv(p, &format!("dec.j{j}.bilinear"), &upsample_half_pixel(&combined, 2)?, 1)?;
        Ok((learned + bilinear)?)
    }

    pub fn lstm_step(&self, j: usize, x: &Tensor, state: Option<&LevelState>) -> Result<LevelState> {
        let hd = self.cfg.lstm_hidden[j];
        let (_, cx, h, w) = x.dims4()?;
        if cx != hd {
            return Err(Error::Shape(format!("ConvLSTM level {j} expects {hd} channels, got {cx}")));
        }
        let zero;
        let state = match state {
            Some(s) => {
                if s.h.dims() != x.dims() || s.c.dims() != x.dims() {
                    return Err(Error::Shape(format!(
                        "state {:?} vs input {:?}",
                        s.h.dims(),
                        x.dims()
                    )));
                }
                s
            }
            None => {
                let z = Tensor::zeros((1, hd, h, w), x.dtype(), x.device())?;
                zero = LevelState { h: z.clone(), c: z };
                &zero
            }
        };
        let gates = conv(&self.params, &format!("dec.j{j}.lstm"), &Tensor::cat(&[x, &state.h], 1)?, 1)?;
        let i = sigmoid(&gates.narrow(1, 0, hd)?)?;
        let f = sigmoid(&gates.narrow(1, hd, hd)?)?;
        let o = sigmoid(&gates.narrow(1, 2 * hd, hd)?)?;
        let g = gates.narrow(1, 3 * hd, hd)?.tanh()?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LevelState { h, c })
    }

    /// One time step. Returns the `(1, 2, H, W)` displacement and the raw
    /// per-level heads. `shapes` collects labelled intermediate shapes.
    fn step(
        &self,
        pre: &Tensor,
        post: &Tensor,
        state: &mut DecoderState,
        shapes: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let feats = self.encode(pre, post)?;
        for (l, m) in feats.mid.iter().enumerate() {
            shapes.push((format!("enc.mid.l{}", l + 1), m.dims().to_vec()));
        }
        for (l, m) in feats.pre.iter().enumerate() {
            shapes.push((format!("enc.pre.l{}", l + 1), m.dims().to_vec()));
        }
        let bottleneck = self.bottleneck(&feats)?;
        shapes.push(("bottleneck".into(), bottleneck.dims().to_vec()));
        if state.levels.len() != self.cfg.levels {
            *state = DecoderState::new(self.cfg.levels);
        }
        let mut h_prev = bottleneck.clone();
        let mut heads = vec![None; self.cfg.levels];
        let mut total: Option<Tensor> = None;
        for j in (0..self.cfg.levels).rev() {
            let skips = self.streams_at(&feats, j + 1, &bottleneck);
            let fused = self.caf(j, &h_prev, &skips)?;
            shapes.push((format!("dec.fused.j{j}"), fused.dims().to_vec()));
            let next = self.lstm_step(j, &fused, state.levels[j].as_ref())?;
            shapes.push((format!("dec.h.j{j}"), next.h.dims().to_vec()));
            let head = conv(&self.params, &format!("head.j{j}"), &next.h, 1)?;
            shapes.push((format!("head.j{j}"), head.dims().to_vec()));
            let scale = (1usize << j) as f64;
            let full = if j == 0 {
                head.clone()
            } else {
                upsample_half_pixel(&head.affine(scale, 0.0)?, 1 << j)?
            };
            total = Some(match total {
                None => full,
                Some(acc) => (acc + full)?,
            });
            h_prev = next.h.clone();
            state.levels[j] = Some(next);
            heads[j] = Some(head);
        }
        let total = total.expect("at least two levels");
        shapes.push(("displacement".into(), total.dims().to_vec()));
        Ok((total, heads.into_iter().map(|h| h.expect("all levels run")).collect()))
    }

    /// Casts to the network dtype and, when configured, scales by the inverse
    /// max-abs value.
    pub fn prepare(&self, frame: &Tensor) -> Result<Tensor> {
        let frame = frame.to_dtype(self.dtype)?;
        if !self.cfg.normalize_input {
            return Ok(frame);
        }
        let m = frame.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if m > 0.0 {
            Ok(frame.affine(1.0 / m, 0.0)?)
        } else {
            Ok(frame)
        }
    }

    /// Differentiable forward over `(H, W)` frames with fresh decoder state.
    pub fn forward_tensors(&self, pre: &Tensor, posts: &[Tensor]) -> Result<Vec<StepTensors>> {
        self.forward_traced(pre, posts, &mut Vec::new())
    }

    /// As [`Self::forward_tensors`], recording every intermediate shape.
    pub fn forward_traced(
        &self,
        pre: &Tensor,
        posts: &[Tensor],
        shapes: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Vec<StepTensors>> {
        let (h, w) = pre.dims2()?;
        self.cfg.check_input(h, w)?;
        let pre_n = self.prepare(pre)?;
        let pre4 = pre_n.reshape((1, 1, h, w))?;
        let mut state = DecoderState::new(self.cfg.levels);
        let mut out = Vec::with_capacity(posts.len());
        for post in posts {
            if post.dims() != pre.dims() {
                return Err(Error::Shape(format!("post {:?} vs pre {:?}", post.dims(), pre.dims())));
            }
            let post_n = self.prepare(post)?;
            let (disp, increments) = self.step(&pre4, &post_n.reshape((1, 1, h, w))?, &mut state, shapes)?;
            let d_y = disp.get(0)?.get(0)?;
            let d_x = disp.get(0)?.get(1)?;
            let warped = warp_upsampled(&post_n, &d_y, &d_x, self.cfg.upsample_factor)?;
            let strain = lsqse_strain(&d_y, self.cfg.lsqse)?;
            out.push(StepTensors {
                d_y,
                d_x,
                strain,
                warped,
                increments,
            });
        }
        Ok(out)
    }

    pub fn frame_tensor(&self, frame: &RfFrame) -> Result<Tensor> {
        grid_to_tensor(&frame.samples, self.dtype, &self.device)
    }

    /// Inference on a sequence. The returned warped frames are the original
    /// post frames warped by the estimated displacement.
    pub fn forward(&self, seq: &RfSequence) -> Result<ForwardOutput> {
        seq.validate()?;
        let pre = self.frame_tensor(&seq.pre)?;
        let posts = seq
            .posts
            .iter()
            .map(|p| self.frame_tensor(p))
            .collect::<Result<Vec<_>>>()?;
        let steps = self.forward_tensors(&pre, &posts)?;
        let (h, w) = seq.shape();
        steps
            .iter()
            .zip(&seq.posts)
            .map(|(s, post)| {
                let displacement = DisplacementField {
                    d_y: tensor_to_grid(&s.d_y)?,
                    d_x: tensor_to_grid(&s.d_x)?,
                };
                let increments = s
                    .increments
                    .iter()
                    .enumerate()
                    .map(|(j, inc)| {
                        let full = if j == 0 {
                            inc.clone()
                        } else {
                            upsample_half_pixel(&inc.affine((1usize << j) as f64, 0.0)?, 1 << j)?
                        };
                        let full = full.to_dtype(DType::F64)?;
                        Ok(DisplacementField {
                            d_y: tensor_to_grid(&full.get(0)?.get(0)?)?,
                            d_x: tensor_to_grid(&full.get(0)?.get(1)?)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                debug_assert_eq!(displacement.shape(), (h, w));
                Ok(StepResult {
                    strain: fieldops::lsqse_strain(&displacement.d_y, self.cfg.lsqse)?,
                    warped: fieldops::warp_upsampled(post, &displacement, self.cfg.upsample_factor)?,
                    displacement,
                    increments,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(|steps| ForwardOutput { steps })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("arch.json"),
            &ArchFile {
                config: self.cfg.clone(),
                params: self.params.shapes(),
            },
        )?;
        self.params.save_blobs(dir)
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let arch_path = dir.join("arch.json");
        if !arch_path.is_file() {
            return Err(Error::Checkpoint(format!("missing {}", arch_path.display())));
        }
        let arch: ArchFile = read_json(&arch_path)?;
        arch.config.validate()?;
        let expected = Self::expected_shapes(&arch.config)?;
        if expected != arch.params {
            return Err(Error::IncompatibleCheckpoint(describe_mismatch(&expected, &arch.params)));
        }
        let params = ParamSet::load_blobs(dir, &arch.params, dtype, device)?;
        Self::from_params(arch.config, params)
    }
}

fn describe_mismatch(expected: &[ParamShape], got: &[ParamShape]) -> String {
    for e in expected {
        match got.iter().find(|g| g.name == e.name) {
            None => return format!("missing parameter {}", e.name),
            Some(g) if g.shape != e.shape => {
                return format!("{}: expected {:?}, found {:?}", e.name, e.shape, g.shape)
            }
            _ => {}
        }
    }
    match got.iter().find(|g| !expected.iter().any(|e| e.name == g.name)) {
        Some(extra) => format!("unexpected parameter {}", extra.name),
        None => "parameter table differs".into(),
    }
}

/// Shapes every labelled intermediate takes for an `h x w` input, derived
/// from the configuration alone (one time step).
pub fn shape_walk(cfg: &NetworkConfig, h: usize, w: usize) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let mut out = Vec::new();
    let at = |l: usize| (h >> l, w >> l);
    for l in 1..=cfg.levels {
        let (hh, ww) = at(l);
        out.push((format!("enc.mid.l{l}"), vec![1, cfg.channels(l), hh, ww]));
    }
    if cfg.ablation.use_cacff {
        for l in 1..=cfg.levels {
            let (hh, ww) = at(l);
            out.push((format!("enc.pre.l{l}"), vec![1, cfg.channels(l), hh, ww]));
        }
    }
    let (hb, wb) = at(cfg.levels);
    out.push(("bottleneck".into(), vec![1, cfg.channels(cfg.levels), hb, wb]));
    for j in (0..cfg.levels).rev() {
        let (hh, ww) = at(j);
        let hd = cfg.lstm_hidden[j];
        out.push((format!("dec.fused.j{j}"), vec![1, hd, hh, ww]));
        out.push((format!("dec.h.j{j}"), vec![1, hd, hh, ww]));
        out.push((format!("head.j{j}"), vec![1, 2, hh, ww]));
    }
    out.push(("displacement".into(), vec![1, 2, h, w]));
    Ok(out)
}
