//! The full encoder–decoder network: four encoder stages with optional
//! MKDC, a bottleneck with optional affinity attention, four decoder
//! stages with weighted skip fusion (APF on the first two), and a sigmoid
//! head.

use indexmap::IndexMap;

use crate::autograd::{Tape, Var};
use crate::blocks::{
    affinity_attention_forward, apf_forward, conv_block_forward, mkdc_forward, udff_fuse,
    validate_dilations, AffinityParams, ApfParams, ConvBlockParams, FusionMode, FusionWeights,
    MkdcParams, DEFAULT_DILATIONS, DEFAULT_REDUCTION,
};
use crate::error::{shape_err, Error, Result};
use crate::params::{Initializer, ParamStore, Session};
use crate::tensor::{ConvSpec, NormMode, PoolMode, Scalar, Tensor4};

/// Four 2× poolings.
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub bottleneck: usize,
    pub dilations: [usize; 4],
    pub fusion: FusionMode,
    pub use_mkdc: bool,
    pub use_attention: bool,
    pub use_apf: bool,
    pub threshold: f64,
    pub reduction: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: [64, 128, 256, 512],
            bottleneck: 1024,
            dilations: DEFAULT_DILATIONS,
            fusion: FusionMode::Fixed,
            use_mkdc: true,
            use_attention: true,
            use_apf: true,
            threshold: 0.5,
            reduction: DEFAULT_REDUCTION,
        }
    }
}

impl NetworkConfig {
    /// Same topology with every width divided by `factor`.
    pub fn narrowed(&self, factor: usize) -> Self {
        let mut c = self.clone();
        c.channels = self.channels.map(|v| (v / factor).max(1));
        c.bottleneck = (self.bottleneck / factor).max(1);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "channel schedule must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.bottleneck <= self.channels[3] {
            return Err(Error::Config(format!(
                "bottleneck width {} must exceed the last stage width {}",
                self.bottleneck, self.channels[3]
            )));
        }
        validate_dilations(&self.dilations)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0,1), got {}", self.threshold)));
        }
        Network::new(self).map(|_| ())
    }
}

struct EncoderStage {
    block: ConvBlockParams,
    mkdc: Option<MkdcParams>,
}

struct DecoderStage {
    up_prefix: String,
    in_ch: usize,
    out_ch: usize,
    fuse: FusionWeights,
    block: ConvBlockParams,
    apf: Option<ApfParams>,
}

/// Parameter layout of a configured network.
pub struct Network {
    cfg: NetworkConfig,
    encoders: Vec<EncoderStage>,
    bottleneck: ConvBlockParams,
    attention: Option<AffinityParams>,
    decoders: Vec<DecoderStage>,
}

/// Pre-sigmoid logits and probabilities, both (n,1,H,W).
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub prob: Var,
}

impl Network {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        let mut encoders = Vec::with_capacity(4);
        let mut prev = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let n = i + 1;
            encoders.push(EncoderStage {
                block: ConvBlockParams::new(format!("enc{n}.block"), prev, c),
                mkdc: if cfg.use_mkdc {
                    Some(MkdcParams::new(format!("enc{n}.mkdc"), c, cfg.dilations)?)
                } else {
                    None
                },
            });
            prev = c;
        }
        let bottleneck = ConvBlockParams::new("bottleneck", cfg.channels[3], cfg.bottleneck);
        let attention = if cfg.use_attention {
            Some(AffinityParams::new("attention", cfg.bottleneck, cfg.reduction)?)
        } else {
            None
        };
        let mut decoders = Vec::with_capacity(4);
        let mut prev = cfg.bottleneck;
        for j in 1..=4 {
            let c = cfg.channels[4 - j];
            decoders.push(DecoderStage {
                up_prefix: format!("dec{j}.up"),
                in_ch: prev,
                out_ch: c,
                fuse: FusionWeights::new(format!("dec{j}.fuse"), cfg.fusion, c),
                block: ConvBlockParams::new(format!("dec{j}.block"), c, c),
                apf: if cfg.use_apf && j <= 2 {
                    Some(ApfParams::new(format!("dec{j}.apf"), c, cfg.reduction)?)
                } else {
                    None
                },
            });
            prev = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoders,
            bottleneck,
            attention,
            decoders,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Names of the attention scalars, if attention is enabled.
    pub fn attention_gammas(&self) -> Vec<String> {
        self.attention
            .as_ref()
            .map(|a| a.gamma_names().to_vec())
            .unwrap_or_default()
    }

    fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        for e in &self.encoders {
            e.block.declare(store, init)?;
            if let Some(m) = &e.mkdc {
                m.declare(store, init)?;
            }
        }
        self.bottleneck.declare(store, init)?;
        if let Some(a) = &self.attention {
            a.declare(store, init)?;
        }
        for d in &self.decoders {
            init.conv_transpose(store, &d.up_prefix, d.in_ch, d.out_ch, 2, 2)?;
            d.fuse.declare(store)?;
            d.block.declare(store, init)?;
            if let Some(a) = &d.apf {
                a.declare(store, init)?;
            }
        }
        init.conv(store, "head", 1, self.cfg.channels[0], 1, 1)
    }

    /// Stage `i` (1-based): conv block, optional MKDC, then 2×2 max pool.
    /// Returns (skip, pooled).
    pub fn encoder_stage_forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        i: usize,
    ) -> Result<(Var, Var)> {
        let stage = stage_ref(&self.encoders, i, "encoder")?;
        let shape = s.tape.value(x).shape();
        if shape.h % 2 != 0 || shape.w % 2 != 0 {
            return Err(shape_err!("encoder stage {i} needs even spatial dims, got {}x{}", shape.h, shape.w));
        }
        let mut h = conv_block_forward(s, x, &stage.block)?;
        if let Some(m) = &stage.mkdc {
            h = mkdc_forward(s, h, m)?;
        }
        let pooled = s.tape.pool2d(h, PoolMode::Max, 2, 2)?;
        Ok((h, pooled))
    }

    /// Stage `j` (1-based): 2× transposed conv, fusion with the skip,
    /// conv block, and APF on stages 1–2 when enabled.
    pub fn decoder_stage_forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        j: usize,
        skip: Var,
    ) -> Result<Var> {
        let stage = stage_ref(&self.decoders, j, "decoder")?;
        let (xs, ss) = (s.tape.value(x).shape(), s.tape.value(skip).shape());
        if xs.c != stage.in_ch || ss.c != stage.out_ch || ss.h != 2 * xs.h || ss.w != 2 * xs.w || ss.n != xs.n {
            return Err(shape_err!(
                "decoder stage {j} expects input (n,{},h,w) and skip (n,{},2h,2w), got {xs} and {ss}",
                stage.in_ch,
                stage.out_ch
            ));
        }
        let u = s.conv_transpose(x, &stage.up_prefix, 2)?;
        let f = udff_fuse(s, skip, u, &stage.fuse)?;
        let mut y = conv_block_forward(s, f, &stage.block)?;
        if let Some(a) = &stage.apf {
            y = apf_forward(s, y, a)?;
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, image: Var) -> Result<ForwardOutput> {
        let shape = s.tape.value(image).shape();
        if shape.h % SPATIAL_MULTIPLE != 0 || shape.w % SPATIAL_MULTIPLE != 0 {
            return Err(shape_err!(
                "spatial dims must be divisible by {SPATIAL_MULTIPLE}, got {}x{}",
                shape.h,
                shape.w
            ));
        }
        if shape.c != self.cfg.in_channels {
            return Err(shape_err!("network expects {} input channels, got {}", self.cfg.in_channels, shape.c));
        }
        let mut skips = Vec::with_capacity(4);
        let mut h = image;
        for i in 1..=4 {
            let (skip, pooled) = self.encoder_stage_forward(s, h, i)?;
            skips.push(skip);
            h = pooled;
        }
        h = conv_block_forward(s, h, &self.bottleneck)?;
        if let Some(a) = &self.attention {
            h = affinity_attention_forward(s, h, a)?;
        }
        for j in 1..=4 {
            h = self.decoder_stage_forward(s, h, j, skips[4 - j])?;
        }
        let logits = s.conv(h, "head", ConvSpec::new(1, 0, 1))?;
        let prob = s.tape.sigmoid(logits)?;
        Ok(ForwardOutput { logits, prob })
    }

    /// Eval-mode probability map for a batch.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, NormMode::Eval);
        let x = s.input(image.clone());
        let out = self.forward(&mut s, x)?;
        Ok(s.tape.value(out.prob).clone())
    }

    /// One optimisation step on a batch: train-mode forward, mean BCE,
    /// backward, running-stat update and Adam. Returns the loss and the
    /// probabilities computed in the forward pass.
    pub fn train_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        images: &Tensor4<T>,
        masks: &Tensor4<T>,
    ) -> Result<(f64, Tensor4<T>)> {
        let (loss, prob, grads, stats) = {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, store, NormMode::Train);
            let x = s.input(images.clone());
            let out = self.forward(&mut s, x)?;
            let loss = s.tape.bce_with_logits(out.logits, masks)?;
            let value = s.tape.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value}")));
            }
            let mut g = s.tape.backward(loss)?;
            let grads = s.param_grads(&mut g);
            let prob = s.tape.value(out.prob).clone();
            (value, prob, grads, s.into_stat_updates())
        };
        store.apply_stat_updates(stats)?;
        store.adam_step(&grads)?;
        Ok((loss, prob))
    }
}

fn stage_ref<'a, S>(stages: &'a [S], i: usize, what: &str) -> Result<&'a S> {
    if !(1..=stages.len()).contains(&i) {
        return Err(Error::InvalidArgument(format!("{what} stage {i} out of range 1..={}", stages.len())));
    }
    Ok(&stages[i - 1])
}

/// Deterministic initial parameters: Kaiming-uniform weights from a seeded
/// ChaCha8 stream, zero biases, identity batch norm, zero attention scalars.
pub fn init_params<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let net = Network::new(cfg)?;
    let mut store = ParamStore::new();
    net.declare(&mut store, &mut Initializer::new(seed))?;
    store.reset_optimizer(store.adam.config)?;
    Ok(store)
}

/// Sets every attention scalar to `value`.
pub fn set_attention_gammas<T: Scalar>(net: &Network, store: &mut ParamStore<T>, value: f64) -> Result<()> {
    for name in net.attention_gammas() {
        *store.param_mut(&name)? = Tensor4::scalar(T::of(value));
    }
    Ok(())
}

/// Names of the parameters a configuration declares, with their element counts.
pub fn parameter_layout(cfg: &NetworkConfig) -> Result<IndexMap<String, usize>> {
    let store = init_params::<f32>(cfg, 0)?;
    Ok(store.params.iter().map(|(k, v)| (k.clone(), v.numel())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            channels: [8, 16, 32, 64],
            bottleneck: 128,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn tiny_forward_shape_and_range() {
        let cfg = tiny();
        let store = init_params::<f32>(&cfg, 3).unwrap();
        let net = Network::new(&cfg).unwrap();
        let x = Tensor4::from_fn([2, 3, 32, 48], |n, c, h, w| ((n + c + h * w) % 7) as f32 / 7.0).unwrap();
        let p = net.predict(&store, &x).unwrap();
        assert_eq!(p.shape().dims(), [2, 1, 32, 48]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let cfg = tiny();
        let store = init_params::<f32>(&cfg, 3).unwrap();
        let net = Network::new(&cfg).unwrap();
        let x = Tensor4::zeros([1, 3, 50, 64]).unwrap();
        let err = net.predict(&store, &x).unwrap_err().to_string();
        assert!(err.contains("spatial dims must be divisible by 16"), "{err}");
    }

    #[test]
    fn init_is_deterministic_and_gammas_zero() {
        let cfg = tiny();
        let a = init_params::<f32>(&cfg, 11).unwrap();
        let b = init_params::<f32>(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(&cfg, 12).unwrap());
        assert_eq!(a.params["attention.gamma_s"].data(), &[0.0]);
        assert_eq!(a.params["attention.gamma_c"].data(), &[0.0]);
    }

    #[test]
    fn bad_schedules_rejected() {
        let mut cfg = tiny();
        cfg.channels = [8, 8, 32, 64];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.bottleneck = 64;
        assert!(cfg.validate().is_err());
    }
}
