//! Encoder-decoder depth network with scene-understanding (SU) fusion and
//! per-scale scale-transform (ST) skips, plus an FFP-style comparison head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_geometry::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Norm, NormKind, ParamStore, Tensor, Var};

pub const NUM_STAGES: usize = 5;

/// Factor applied to the He-uniform init of the output convolution.
pub const HEAD_INIT_SCALE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub su_compress_channels: usize,
    pub su_out_channels: usize,
    /// Width of the 5x5 fusion convolution inside SU.
    pub su_fusion_mid_channels: usize,
    pub st_mid_channels: usize,
    /// Channels of the pre-attention feature inside ST.
    pub st_feature_channels: usize,
    pub fusion_target_stage: usize,
    pub decoder_channels: Vec<usize>,
    /// `[height, width]`, multiples of 32.
    pub input_size: [usize; 2],
    pub norm: NormKind,
    /// Output depth of the untrained network, in meters.
    pub init_depth: f64,
    /// Depth is `output_scale * softplus(head)`.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128, 256],
            su_compress_channels: 64,
            su_out_channels: 128,
            su_fusion_mid_channels: 128,
            st_mid_channels: 32,
            st_feature_channels: 64,
            fusion_target_stage: 1,
            decoder_channels: vec![128, 64, 32, 16, 16],
            input_size: [64, 64],
            norm: NormKind::Batch,
            init_depth: 3.0,
            output_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES || self.decoder_channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "stage_channels and decoder_channels need {NUM_STAGES} entries, got {} and {}",
                self.stage_channels.len(),
                self.decoder_channels.len()
            )));
        }
        let widths = [
            self.su_compress_channels,
            self.su_out_channels,
            self.su_fusion_mid_channels,
            self.st_mid_channels,
            self.st_feature_channels,
        ];
        if self.stage_channels.iter().chain(&self.decoder_channels).chain(&widths).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.fusion_target_stage >= NUM_STAGES {
            return Err(Error::InvalidScale(self.fusion_target_stage));
        }
        if !(self.init_depth.is_finite() && self.init_depth > 0.0) {
            return Err(Error::Config(format!("init_depth must be positive, got {}", self.init_depth)));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config(format!("output_scale must be positive, got {}", self.output_scale)));
        }
        check_size(self.input_size[0], self.input_size[1])
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::SizeNotDivisible { height: h, width: w });
    }
    Ok(())
}

/// How decoder skips are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Plain encoder-stage skips, no SU or ST.
    EncoderSkips,
    /// Encoder skips plus the SU output resampled straight to each scale.
    SuDirect,
    /// Encoder skips plus the SU output through one ST module per scale.
    #[default]
    SuSt,
}

/// Encoder stages, finest first; stage `i` is at 1/2^(i+1) of the input.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Var>,
}

/// SU output at the fusion target resolution.
#[derive(Debug, Clone, Copy)]
pub struct GlobalSceneFeature {
    pub feature: Var,
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: Norm,
}

impl ConvNorm {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, kind: NormKind, rng: &mut ChaCha8Rng) -> Self {
        Self::with_kernel(store, name, cin, cout, 3, stride, kind, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_kernel(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, kind: NormKind, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, rng),
            norm: Norm::new(store, &format!("{name}.norm"), cout, kind),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.conv2d(x, &self.conv)?;
        let y = g.norm(y, &self.norm)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
struct SceneUnderstanding {
    compress: Vec<[ConvNorm; 2]>,
    fuse5: ConvNorm,
    fuse3: ConvNorm,
}

#[derive(Debug, Clone)]
struct ScaleTransform {
    feature: Conv2d,
    squeeze: Conv2d,
    excite: Conv2d,
    expand: Conv2d,
}

/// The depth network; parameters live in `store`.
#[derive(Debug, Clone)]
pub struct DepthNet {
    pub cfg: ModelConfig,
    pub fusion: FusionMode,
    pub store: ParamStore,
    encoder: Vec<[ConvNorm; 2]>,
    su: Option<SceneUnderstanding>,
    st: Vec<ScaleTransform>,
    decoder: Vec<[ConvNorm; 2]>,
    head: Conv2d,
}

/// Output of [`DepthNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub input: Var,
    /// `[n, 1, H, W]`, strictly positive.
    pub depth: Var,
    /// Resampling operations spent on fusion (SU and ST), excluding decoder upsampling.
    pub fusion_resamples: usize,
}

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl DepthNet {
    pub fn new(cfg: &ModelConfig, fusion: FusionMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let kind = cfg.norm;
        let ch = &cfg.stage_channels;

        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push([
                ConvNorm::new(&mut store, &format!("enc{i}.a"), cin, c, 2, kind, &mut rng),
                ConvNorm::new(&mut store, &format!("enc{i}.b"), c, c, 1, kind, &mut rng),
            ]);
            cin = c;
        }

        let (su, st) = if fusion == FusionMode::EncoderSkips {
            (None, Vec::new())
        } else {
            let m = cfg.su_compress_channels;
            let compress = ch
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    [
                        ConvNorm::new(&mut store, &format!("su.compress{i}.a"), c, m, 1, kind, &mut rng),
                        ConvNorm::new(&mut store, &format!("su.compress{i}.b"), m, m, 1, kind, &mut rng),
                    ]
                })
                .collect();
            let fuse5 = ConvNorm::with_kernel(&mut store, "su.fuse5", NUM_STAGES * m, cfg.su_fusion_mid_channels, 5, 1, kind, &mut rng);
            let fuse3 = ConvNorm::new(&mut store, "su.fuse3", cfg.su_fusion_mid_channels, cfg.su_out_channels, 1, kind, &mut rng);
            let su = SceneUnderstanding { compress, fuse5, fuse3 };
            let st = if fusion == FusionMode::SuSt {
                (0..NUM_STAGES)
                    .map(|s| {
                        let (o, f, r) = (cfg.su_out_channels, cfg.st_feature_channels, cfg.st_mid_channels);
                        ScaleTransform {
                            feature: Conv2d::new(&mut store, &format!("st{s}.feature"), o, f, 3, 1, &mut rng),
                            squeeze: Conv2d::new(&mut store, &format!("st{s}.squeeze"), f, r, 1, 1, &mut rng),
                            excite: Conv2d::new(&mut store, &format!("st{s}.excite"), r, f, 1, 1, &mut rng),
                            expand: Conv2d::new(&mut store, &format!("st{s}.expand"), f, o, 1, 1, &mut rng),
                        }
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (Some(su), st)
        };

        let mut decoder = Vec::with_capacity(NUM_STAGES);
        let mut x_ch = ch[NUM_STAGES - 1];
        for (j, &c) in cfg.decoder_channels.iter().enumerate() {
            let s = NUM_STAGES - 1 - j;
            let skip = skip_channels(cfg, fusion, s);
            decoder.push([
                ConvNorm::new(&mut store, &format!("dec{j}.a"), x_ch + skip, c, 1, kind, &mut rng),
                ConvNorm::new(&mut store, &format!("dec{j}.b"), c, c, 1, kind, &mut rng),
            ]);
            x_ch = c;
        }
        let head = Conv2d::new(&mut store, "head", x_ch, 1, 1, 1, &mut rng);
        // Small head weights keep the untrained output near `init_depth`,
        // away from the flat region of softplus.
        store.value_mut(head.weight).iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
        if let Some(b) = head.bias {
            store.value_mut(b)[0] = softplus_inverse(cfg.init_depth / cfg.output_scale) as f32;
        }

        Ok(Self {
            cfg: cfg.clone(),
            fusion,
            store,
            encoder,
            su,
            st,
            decoder,
            head,
        })
    }

    /// Trainable scalar count of the whole network.
    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.store)
    }

    /// Trainable scalars in SU and all ST modules.
    pub fn fusion_parameter_count(&self) -> usize {
        self.store.count_trainable_with_prefix("su.")
            + (0..NUM_STAGES)
                .map(|s| self.store.count_trainable_with_prefix(&format!("st{s}.")))
                .sum::<usize>()
    }

    pub fn encoder_forward(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = g.shape(image);
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected a 3-channel image, got {c} channels")));
        }
        check_size(h, w)?;
        let mut x = image;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for [a, b] in &self.encoder {
            x = a.forward(g, x)?;
            x = b.forward(g, x)?;
            stages.push(x);
        }
        Ok(FeaturePyramid { stages })
    }

    pub fn su_forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<GlobalSceneFeature> {
        let su = self.su.as_ref().ok_or_else(|| Error::Config("model was built without SU".into()))?;
        self.check_pyramid(g, pyramid)?;
        let [_, _, th, tw] = g.shape(pyramid.stages[self.cfg.fusion_target_stage]);
        let mut parts = Vec::with_capacity(NUM_STAGES);
        for (&x, [a, b]) in pyramid.stages.iter().zip(&su.compress) {
            let y = a.forward(g, x)?;
            let y = b.forward(g, y)?;
            parts.push(g.resize(y, th, tw));
        }
        let cat = g.concat(&parts)?;
        let y = su.fuse5.forward(g, cat)?;
        Ok(GlobalSceneFeature { feature: su.fuse3.forward(g, y)? })
    }

    /// ST output (`su_out_channels` maps) at the resolution of `target_scale`.
    pub fn st_forward(&self, g: &mut Graph, global: &GlobalSceneFeature, target_scale: usize, target_hw: (usize, usize)) -> Result<Var> {
        let st = self.st.get(target_scale).ok_or(Error::InvalidScale(target_scale))?;
        let x = self.resample_to(g, global.feature, target_hw);
        let f = g.conv2d(x, &st.feature)?;
        let p = g.global_avg_pool(f);
        let s = g.conv2d(p, &st.squeeze)?;
        let s = g.relu(s);
        let e = g.conv2d(s, &st.excite)?;
        let a = g.sigmoid(e);
        g.mark_attention(a);
        let y = g.channel_mul(f, a)?;
        g.conv2d(y, &st.expand)
    }

    fn resample_to(&self, g: &mut Graph, x: Var, (h, w): (usize, usize)) -> Var {
        let [_, _, xh, xw] = g.shape(x);
        if (xh, xw) == (h, w) {
            x
        } else {
            g.resize(x, h, w)
        }
    }

    fn check_pyramid(&self, g: &Graph, pyramid: &FeaturePyramid) -> Result<()> {
        if pyramid.stages.len() != NUM_STAGES {
            return Err(Error::ShapeMismatch(format!("pyramid has {} stages", pyramid.stages.len())));
        }
        for (i, (&v, &c)) in pyramid.stages.iter().zip(&self.cfg.stage_channels).enumerate() {
            let got = g.shape(v)[1];
            if got != c {
                return Err(Error::ShapeMismatch(format!("stage {i} has {got} channels, expected {c}")));
            }
        }
        Ok(())
    }

    /// Skip features for every scale, finest first. Encoder stages feed
    /// every phase but the deepest; SU modes add the fused feature everywhere.
    pub fn skip_features(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Vec<Vec<Var>>> {
        self.check_pyramid(g, pyramid)?;
        let mut skips: Vec<Vec<Var>> = (0..NUM_STAGES)
            .map(|s| if s < NUM_STAGES - 1 { vec![pyramid.stages[s]] } else { Vec::new() })
            .collect();
        if self.fusion == FusionMode::EncoderSkips {
            return Ok(skips);
        }
        let global = self.su_forward(g, pyramid)?;
        for (s, list) in skips.iter_mut().enumerate() {
            let [_, _, h, w] = g.shape(pyramid.stages[s]);
            let fused = match self.fusion {
                FusionMode::SuDirect => self.resample_to(g, global.feature, (h, w)),
                _ => self.st_forward(g, &global, s, (h, w))?,
            };
            list.push(fused);
        }
        Ok(skips)
    }

    /// Deepest stage first: concatenate the skip at the current scale,
    /// upsample x2, then two conv blocks; a 1x1 head and softplus finish.
    pub fn decoder_forward(&self, g: &mut Graph, pyramid: &FeaturePyramid, skips: &[Vec<Var>]) -> Result<Var> {
        if skips.len() != NUM_STAGES {
            return Err(Error::ShapeMismatch(format!("{} skip features", skips.len())));
        }
        let mut x = pyramid.stages[NUM_STAGES - 1];
        for (j, [a, b]) in self.decoder.iter().enumerate() {
            let s = NUM_STAGES - 1 - j;
            if !skips[s].is_empty() {
                let mut parts = vec![x];
                parts.extend_from_slice(&skips[s]);
                x = g.concat(&parts)?;
            }
            let [_, _, h, w] = g.shape(x);
            x = g.resize(x, 2 * h, 2 * w);
            x = a.forward(g, x)?;
            x = b.forward(g, x)?;
        }
        let y = g.conv2d(x, &self.head)?;
        let y = g.softplus(y);
        Ok(if self.cfg.output_scale == 1.0 { y } else { g.scale(y, self.cfg.output_scale as f32) })
    }

    /// Full pass on `[n, 3, H, W]` images in [0, 1].
    pub fn forward(&self, g: &mut Graph, images: Tensor) -> Result<Forward> {
        let mut centered = images;
        centered.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let input = g.input(centered);
        let pyramid = self.encoder_forward(g, input)?;
        let before = g.resample_count();
        let skips = self.skip_features(g, &pyramid)?;
        let fusion_resamples = g.resample_count() - before;
        let depth = self.decoder_forward(g, &pyramid, &skips)?;
        Ok(Forward {
            input,
            depth,
            fusion_resamples,
        })
    }

    /// Evaluation-mode prediction, one depth map per batch item.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<DepthMap>> {
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, images.clone())?;
        tensor_to_depths(g.value(out.depth))
    }
}

fn skip_channels(cfg: &ModelConfig, fusion: FusionMode, s: usize) -> usize {
    let encoder = if s < NUM_STAGES - 1 { cfg.stage_channels[s] } else { 0 };
    match fusion {
        FusionMode::EncoderSkips => encoder,
        FusionMode::SuDirect | FusionMode::SuSt => encoder + cfg.su_out_channels,
    }
}

/// Splits a `[n, 1, H, W]` tensor into depth maps.
pub fn tensor_to_depths(t: &Tensor) -> Result<Vec<DepthMap>> {
    let [n, c, h, w] = t.shape();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("depth tensor has {c} channels")));
    }
    (0..n)
        .map(|i| DepthMap::from_values(w, h, t.item(i).iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Trainable scalar count.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_trainable()
}

/// Fused-feature-pyramid head: every stage resampled to every scale, one
/// 3x3 fusion convolution per scale.
#[derive(Debug, Clone)]
pub struct FfpHead {
    pub store: ParamStore,
    stage_channels: Vec<usize>,
    fuse: Vec<Conv2d>,
}

impl FfpHead {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let total: usize = cfg.stage_channels.iter().sum();
        let fuse = (0..NUM_STAGES)
            .map(|s| Conv2d::new(&mut store, &format!("ffp{s}"), total, cfg.su_out_channels, 3, 1, &mut rng))
            .collect();
        Ok(Self {
            store,
            stage_channels: cfg.stage_channels.clone(),
            fuse,
        })
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.store)
    }

    /// `g` must be built over this head's store; `pyramid` may come from
    /// another graph's values re-entered as inputs.
    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        if pyramid.stages.len() != NUM_STAGES {
            return Err(Error::ShapeMismatch(format!("pyramid has {} stages", pyramid.stages.len())));
        }
        for (i, (&v, &c)) in pyramid.stages.iter().zip(&self.stage_channels).enumerate() {
            if g.shape(v)[1] != c {
                return Err(Error::ShapeMismatch(format!("stage {i} has {} channels, expected {c}", g.shape(v)[1])));
            }
        }
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (s, conv) in self.fuse.iter().enumerate() {
            let [_, _, h, w] = g.shape(pyramid.stages[s]);
            let parts: Vec<Var> = pyramid.stages.iter().map(|&x| g.resize(x, h, w)).collect();
            let cat = g.concat(&parts)?;
            out.push(g.conv2d(cat, conv)?);
        }
        Ok(out)
    }
}
