//! Composite blocks. Each block is described by a small layout struct
//! (name prefix and channel counts) that can declare its parameters into a
//! [`ParamStore`] and run its forward pass on a [`Session`].

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::params::{Initializer, ParamStore, Session};
use crate::tensor::{ConvSpec, PoolMode, Scalar, Tensor4};

fn same3() -> ConvSpec {
    ConvSpec::new(1, 1, 1)
}

fn pointwise() -> ConvSpec {
    ConvSpec::new(1, 0, 1)
}

fn check_channels<T: Scalar>(s: &Session<'_, T>, x: Var, expect: usize, block: &str) -> Result<()> {
    let shape = s.tape.value(x).shape();
    if shape.c != expect {
        return Err(shape_err!("{block} expects {expect} input channels, got {}", shape.c));
    }
    Ok(())
}

/// (3×3 conv → BN → ReLU) twice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlockParams {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvBlockParams {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_ch,
            out_ch,
        }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        let p = &self.prefix;
        init.conv(store, &format!("{p}.conv1"), self.out_ch, self.in_ch, 3, 3)?;
        init.batch_norm(store, &format!("{p}.bn1"), self.out_ch)?;
        init.conv(store, &format!("{p}.conv2"), self.out_ch, self.out_ch, 3, 3)?;
        init.batch_norm(store, &format!("{p}.bn2"), self.out_ch)
    }
}

pub fn conv_block_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &ConvBlockParams) -> Result<Var> {
    check_channels(s, x, p.in_ch, "conv block")?;
    let pre = &p.prefix;
    let mut h = x;
    for i in 1..=2 {
        h = s.conv(h, &format!("{pre}.conv{i}"), same3())?;
        h = s.batch_norm(h, &format!("{pre}.bn{i}"))?;
        h = s.tape.relu(h)?;
    }
    Ok(h)
}

pub const DEFAULT_DILATIONS: [usize; 4] = [1, 3, 7, 11];

/// Four parallel dilated 3×3 branches, concatenated, fused by a 1×1 conv,
/// added back to the input and rectified.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MkdcParams {
    pub prefix: String,
    pub channels: usize,
    pub dilations: [usize; 4],
}

impl MkdcParams {
    pub fn new(prefix: impl Into<String>, channels: usize, dilations: [usize; 4]) -> Result<Self> {
        validate_dilations(&dilations)?;
        Ok(Self {
            prefix: prefix.into(),
            channels,
            dilations,
        })
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        let c = self.channels;
        for i in 0..4 {
            init.conv(store, &format!("{}.branch{i}", self.prefix), c, c, 3, 3)?;
        }
        init.conv(store, &format!("{}.fuse", self.prefix), c, 4 * c, 1, 1)
    }
}

pub fn validate_dilations(d: &[usize]) -> Result<()> {
    if d.len() != 4 {
        return Err(Error::Config(format!("dilation set needs exactly 4 entries, got {}", d.len())));
    }
    if d[0] == 0 || d.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "dilation set must be strictly increasing positive integers, got {d:?}"
        )));
    }
    Ok(())
}

pub fn mkdc_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &MkdcParams) -> Result<Var> {
    check_channels(s, x, p.channels, "MKDC")?;
    let mut cat: Option<Var> = None;
    for (i, &d) in p.dilations.iter().enumerate() {
        let b = s.conv(x, &format!("{}.branch{i}", p.prefix), ConvSpec::new(1, d, d))?;
        cat = Some(match cat {
            None => b,
            Some(acc) => s.tape.concat_channels(acc, b)?,
        });
    }
    let cat = cat.expect("four branches");
    let fused = s.conv(cat, &format!("{}.fuse", p.prefix), pointwise())?;
    let res = s.tape.add(fused, x)?;
    s.tape.relu(res)
}

/// Squeeze-and-excitation: per-channel gates from globally pooled
/// features. The two FC layers are 1×1 convolutions on the (n,C,1,1) pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeParams {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

pub const DEFAULT_REDUCTION: usize = 16;

impl SeParams {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        init.conv(store, &format!("{}.fc1", self.prefix), self.hidden(), self.channels, 1, 1)?;
        init.conv(store, &format!("{}.fc2", self.prefix), self.channels, self.hidden(), 1, 1)
    }
}

/// Channel gates `sigmoid(FC2(relu(FC1(GAP(x)))))` of shape (n,C,1,1).
fn channel_gates<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &SeParams) -> Result<Var> {
    let g = s.tape.global_avg_pool(x)?;
    let h = s.conv(g, &format!("{}.fc1", p.prefix), pointwise())?;
    let h = s.tape.relu(h)?;
    let h = s.conv(h, &format!("{}.fc2", p.prefix), pointwise())?;
    s.tape.sigmoid(h)
}

pub fn se_block_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &SeParams) -> Result<Var> {
    check_channels(s, x, p.channels, "SE block")?;
    let w = channel_gates(s, x, p)?;
    s.tape.mul(x, w)
}

/// Channel attention block. Same computation as [`se_block_forward`].
pub fn cab_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &SeParams) -> Result<Var> {
    check_channels(s, x, p.channels, "channel attention")?;
    let w = channel_gates(s, x, p)?;
    s.tape.mul(x, w)
}

/// Spatial attention: 1×3 query and 3×1 key projections to C/8 channels,
/// a 1×1 value projection, and attention over all H·W positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SabParams {
    pub prefix: String,
    pub channels: usize,
}

impl SabParams {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Result<Self> {
        if channels % 8 != 0 {
            return Err(Error::Config(format!(
                "spatial attention needs channels divisible by 8, got {channels}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
        })
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        let (c, c8) = (self.channels, self.channels / 8);
        init.conv(store, &format!("{}.query", self.prefix), c8, c, 1, 3)?;
        init.conv(store, &format!("{}.key", self.prefix), c8, c, 3, 1)?;
        init.conv(store, &format!("{}.value", self.prefix), c, c, 1, 1)
    }
}

pub fn sab_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &SabParams) -> Result<Var> {
    let shape = s.tape.value(x).shape();
    if shape.c % 8 != 0 {
        return Err(shape_err!("spatial attention needs channels divisible by 8, got {}", shape.c));
    }
    check_channels(s, x, p.channels, "spatial attention")?;
    let (n, c, hw) = (shape.n, shape.c, shape.plane());
    let c8 = c / 8;
    let q = s.conv(x, &format!("{}.query", p.prefix), ConvSpec::new(1, 0, 1).with_padding(0, 1))?;
    let k = s.conv(x, &format!("{}.key", p.prefix), ConvSpec::new(1, 0, 1).with_padding(1, 0))?;
    let v = s.conv(x, &format!("{}.value", p.prefix), pointwise())?;
    let q = s.tape.reshape(q, [n, 1, c8, hw])?;
    let k = s.tape.reshape(k, [n, 1, c8, hw])?;
    let v = s.tape.reshape(v, [n, 1, c, hw])?;
    let qt = s.tape.transpose(q)?;
    let logits = s.tape.matmul(qt, k)?;
    let a = s.tape.softmax_rows(logits)?;
    let at = s.tape.transpose(a)?;
    let out = s.tape.matmul(v, at)?;
    s.tape.reshape(out, shape)
}

/// `x + γ_s·SAB(x) + γ_c·CAB(x)` with learnable scalars γ, initialised to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffinityParams {
    pub prefix: String,
    pub sab: SabParams,
    pub cab: SeParams,
}

impl AffinityParams {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            sab: SabParams::new(format!("{prefix}.sab"), channels)?,
            cab: SeParams::new(format!("{prefix}.cab"), channels, reduction)?,
            prefix,
        })
    }

    pub fn gamma_names(&self) -> [String; 2] {
        [format!("{}.gamma_s", self.prefix), format!("{}.gamma_c", self.prefix)]
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        self.sab.declare(store, init)?;
        self.cab.declare(store, init)?;
        for name in self.gamma_names() {
            store.insert_param(name, Tensor4::scalar(T::zero()))?;
        }
        Ok(())
    }
}

pub fn affinity_attention_forward<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    p: &AffinityParams,
) -> Result<Var> {
    let [gs_name, gc_name] = p.gamma_names();
    let sa = sab_forward(s, x, &p.sab)?;
    let ca = cab_forward(s, x, &p.cab)?;
    let gs = s.param(&gs_name)?;
    let gc = s.param(&gc_name)?;
    let sa = s.tape.mul(sa, gs)?;
    let ca = s.tape.mul(ca, gc)?;
    let out = s.tape.add(x, sa)?;
    s.tape.add(out, ca)
}

/// SE gating, ×2 bilinear upsampling, 3×3 conv, then a 1:1 blend of 2×2
/// max and average pooling back to the input size, concatenated with the
/// input and projected by a 1×1 conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApfParams {
    pub prefix: String,
    pub se: SeParams,
    pub channels: usize,
}

impl ApfParams {
    pub fn new(prefix: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self {
            se: SeParams::new(format!("{prefix}.se"), channels, reduction)?,
            prefix,
            channels,
        })
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<()> {
        let c = self.channels;
        self.se.declare(store, init)?;
        init.conv(store, &format!("{}.psi2", self.prefix), c, c, 3, 3)?;
        init.conv(store, &format!("{}.phi", self.prefix), c, 2 * c, 1, 1)
    }
}

pub fn apf_forward<T: Scalar>(s: &mut Session<'_, T>, x: Var, p: &ApfParams) -> Result<Var> {
    let shape = s.tape.value(x).shape();
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(shape_err!("APF needs even spatial dims, got {}x{}", shape.h, shape.w));
    }
    let se = se_block_forward(s, x, &p.se)?;
    let up = s.tape.bilinear_resize(se, 2 * shape.h, 2 * shape.w)?;
    let l = s.conv(up, &format!("{}.psi2", p.prefix), same3())?;
    let mx = s.tape.pool2d(l, PoolMode::Max, 2, 2)?;
    let av = s.tape.pool2d(l, PoolMode::Avg, 2, 2)?;
    let sum = s.tape.add(mx, av)?;
    let pooled = s.tape.scale(sum, T::of(0.5))?;
    let cat = s.tape.concat_channels(x, pooled)?;
    s.conv(cat, &format!("{}.phi", p.prefix), pointwise())
}

pub const LOW_WEIGHT: f64 = 0.7;
pub const HIGH_WEIGHT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Fixed,
    Learned,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown fusion mode {other:?} (fixed|learned)"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Learned => "learned",
        })
    }
}

/// Weighted skip fusion `α·low + β·high` with α + β = 1. Fixed mode uses
/// α = 0.7; learned mode predicts (α, β) per sample with a small
/// weight-learning head over the pooled concatenation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub prefix: String,
    pub mode: FusionMode,
    pub channels: usize,
}

impl FusionWeights {
    pub fn new(prefix: impl Into<String>, mode: FusionMode, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            mode,
            channels,
        }
    }

    /// The learned head starts with zero weights and bias (ln 0.7, ln 0.3),
    /// i.e. exactly at the fixed split.
    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.mode == FusionMode::Learned {
            let name = format!("{}.wlm", self.prefix);
            store.insert_param(
                format!("{name}.weight"),
                Tensor4::zeros([2, 2 * self.channels, 1, 1])?,
            )?;
            store.insert_param(
                format!("{name}.bias"),
                Tensor4::from_vec([1, 2, 1, 1], vec![T::of(LOW_WEIGHT.ln()), T::of(HIGH_WEIGHT.ln())])?,
            )?;
        }
        Ok(())
    }
}

/// Computed as `low + β·(high − low)`, which equals `α·low + β·high` when
/// α + β = 1 and returns `low` exactly when the two inputs agree.
pub fn udff_fuse<T: Scalar>(s: &mut Session<'_, T>, f_low: Var, f_high: Var, w: &FusionWeights) -> Result<Var> {
    let (ls, hs) = (s.tape.value(f_low).shape(), s.tape.value(f_high).shape());
    if ls != hs {
        return Err(shape_err!("fusion inputs differ: low {ls}, high {hs}"));
    }
    let neg_low = s.tape.scale(f_low, T::of(-1.0))?;
    let diff = s.tape.add(f_high, neg_low)?;
    let scaled = match w.mode {
        FusionMode::Fixed => s.tape.scale(diff, T::of(HIGH_WEIGHT))?,
        FusionMode::Learned => {
            let beta = learned_high_weight(s, f_low, f_high, w)?;
            s.tape.mul(diff, beta)?
        }
    };
    s.tape.add(f_low, scaled)
}

/// β of shape (n,1,1,1) from softmax over the two WLM logits.
fn learned_high_weight<T: Scalar>(
    s: &mut Session<'_, T>,
    f_low: Var,
    f_high: Var,
    w: &FusionWeights,
) -> Result<Var> {
    let n = s.tape.value(f_low).shape().n;
    let cat = s.tape.concat_channels(f_low, f_high)?;
    let pooled = s.tape.global_avg_pool(cat)?;
    let act = s.tape.relu(pooled)?;
    let logits = s.conv(act, &format!("{}.wlm", w.prefix), pointwise())?;
    let rows = s.tape.reshape(logits, [n, 1, 1, 2])?;
    let ab = s.tape.softmax_rows(rows)?;
    let ab = s.tape.reshape(ab, [n, 2, 1, 1])?;
    s.tape.slice_channels(ab, 1, 1)
}

/// Fusion weights (α, β) for each sample, as the forward pass would use them.
pub fn fusion_weights<T: Scalar>(
    s: &mut Session<'_, T>,
    f_low: Var,
    f_high: Var,
    w: &FusionWeights,
) -> Result<Vec<(f64, f64)>> {
    let n = s.tape.value(f_low).shape().n;
    match w.mode {
        FusionMode::Fixed => Ok(vec![(LOW_WEIGHT, HIGH_WEIGHT); n]),
        FusionMode::Learned => {
            let beta = learned_high_weight(s, f_low, f_high, w)?;
            Ok(s.tape
                .value(beta)
                .data()
                .iter()
                .map(|b| (1.0 - b.as_f64(), b.as_f64()))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::NormMode;

    fn ramp(shape: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |n, c, h, w| ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 * 0.1 - 0.4).unwrap()
    }

    #[test]
    fn conv_block_shape_and_range() {
        let p = ConvBlockParams::new("b", 3, 8);
        let mut store = ParamStore::<f64>::new();
        p.declare(&mut store, &mut Initializer::new(1)).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, NormMode::Train);
        let x = s.input(ramp([2, 3, 6, 6]));
        let y = conv_block_forward(&mut s, x, &p).unwrap();
        let out = s.tape.value(y);
        assert_eq!(out.shape().dims(), [2, 8, 6, 6]);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        let bad = s.input(ramp([1, 4, 6, 6]));
        assert!(conv_block_forward(&mut s, bad, &p).is_err());
    }

    #[test]
    fn se_zero_params_halves() {
        let p = SeParams::new("se", 16, 16).unwrap();
        let mut store = ParamStore::<f64>::new();
        p.declare(&mut store, &mut Initializer::new(1)).unwrap();
        for v in store.params.values_mut() {
            *v = v.map(|_| 0.0);
        }
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, NormMode::Eval);
        let xt = ramp([1, 16, 3, 3]);
        let x = s.input(xt.clone());
        let y = se_block_forward(&mut s, x, &p).unwrap();
        assert_eq!(s.tape.value(y), &xt.map(|v| 0.5 * v));
    }

    #[test]
    fn config_errors() {
        assert!(SeParams::new("s", 24, 16).is_err());
        assert!(SabParams::new("s", 12).is_err());
        assert!(MkdcParams::new("m", 4, [1, 3, 3, 7]).is_err());
        assert!(MkdcParams::new("m", 4, [0, 3, 5, 7]).is_err());
        assert!("other".parse::<FusionMode>().is_err());
    }

    #[test]
    fn fixed_fusion_hand_value() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, NormMode::Eval);
        let lo = s.input(Tensor4::scalar(10.0));
        let hi = s.input(Tensor4::scalar(20.0));
        let w = FusionWeights::new("f", FusionMode::Fixed, 1);
        let y = udff_fuse(&mut s, lo, hi, &w).unwrap();
        assert!((s.tape.value(y).data()[0] - 13.0).abs() < 1e-12);
    }

    #[test]
    fn learned_fusion_starts_at_fixed_split() {
        let w = FusionWeights::new("f", FusionMode::Learned, 2);
        let mut store = ParamStore::<f64>::new();
        w.declare(&mut store).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, NormMode::Eval);
        let lo = s.input(ramp([2, 2, 2, 2]));
        let hi = s.input(ramp([2, 2, 2, 2]).map(|v| v * 3.0 + 1.0));
        let ab = fusion_weights(&mut s, lo, hi, &w).unwrap();
        for (a, b) in ab {
            assert!((a - 0.7).abs() < 1e-12 && (b - 0.3).abs() < 1e-12);
        }
    }
}
