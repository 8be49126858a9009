//! Central-difference checks of every differentiable primitive, every
//! block and the assembled network, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, grad_check_at, GradCheckReport, Tape, Var};
use crate::blocks::{
    affinity_attention_forward, apf_forward, cab_forward, conv_block_forward, mkdc_forward,
    sab_forward, se_block_forward, udff_fuse, AffinityParams, ApfParams, ConvBlockParams,
    FusionMode, FusionWeights, MkdcParams, SabParams, SeParams, DEFAULT_DILATIONS,
};
use crate::error::Result;
use crate::network::{init_params, set_attention_gammas, Network, NetworkConfig};
use crate::params::{Initializer, ParamStore, Session};
use crate::tensor::{ConvSpec, NormMode, PoolMode, Shape4, Tensor4};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Minimum distance from 0 for values fed directly into a ReLU.
pub const RELU_MARGIN: f64 = 1e-3;

/// Parameter tensors whose analytic gradient stays below this everywhere are
/// not compared by relative error: at step 1e-5 a loss of order 1 resolves
/// gradients only to about 1e-11, so 1e-4 relative agreement needs roughly
/// 1e-7 and above. Such tensors (for instance a bias feeding train-mode batch
/// norm, which cancels it exactly) must instead show a negligible numeric
/// gradient too.
pub const SIGNIFICANT_GRADIENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CaseKind {
    /// Relative error over the checked coordinates.
    Compared,
    /// Largest |analytic| or |numeric| seen on a tensor with no significant
    /// analytic gradient.
    Negligible { max_abs: f64 },
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
    pub kind: CaseKind,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        match self.kind {
            CaseKind::Compared => self.report.checked > 0 && self.report.max_rel_error < GRAD_TOLERANCE,
            CaseKind::Negligible { max_abs } => max_abs < SIGNIFICANT_GRADIENT,
        }
    }
}

impl std::fmt::Display for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        if let CaseKind::Negligible { max_abs } = self.kind {
            return write!(
                f,
                "{:<44} negligible gradient, max magnitude {:.3e} ({} checked, {} skipped) {}",
                self.name, max_abs, self.report.checked, self.report.skipped, verdict
            );
        }
        write!(
            f,
            "{:<44} max_rel_err={:.3e} at {} (analytic {:.6e}, numeric {:.6e}, {} checked, {} skipped) {}",
            self.name,
            self.report.max_rel_error,
            self.report.worst_index,
            self.report.analytic,
            self.report.numeric,
            self.report.checked,
            self.report.skipped,
            verdict
        )
    }
}

pub fn uniform(shape: impl Into<Shape4>, lo: f64, hi: f64, seed: u64) -> Tensor4<f64> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).expect("valid shape")
}

/// Moves values closer than [`RELU_MARGIN`] to 0 out to ±margin.
pub fn relu_safe(t: &Tensor4<f64>) -> Tensor4<f64> {
    t.map(|v| {
        if v.abs() >= RELU_MARGIN {
            v
        } else if v < 0.0 {
            -RELU_MARGIN
        } else {
            RELU_MARGIN
        }
    })
}

/// `Σ y ⊙ R` for a fixed random R, so every output element carries a
/// distinct weight in the checked scalar.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.leaf(uniform(tape.value(y).shape(), -1.0, 1.0, seed ^ 0x5eed));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn case<F>(name: &str, point: &Tensor4<f64>, f: F) -> Result<GradCase>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    Ok(GradCase {
        name: name.to_string(),
        report: grad_check(f, point, GRAD_STEP)?,
        kind: CaseKind::Compared,
    })
}

/// Coordinates sampled without replacement, all of them if `k >= len`.
fn sample_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, len, k).into_vec()
}

/// One check per differentiable tape operation and operand.
pub fn primitive_checks() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let x = uniform([2, 3, 6, 7], -1.0, 1.0, 1);
    let w = uniform([4, 3, 3, 3], -0.5, 0.5, 2);
    let b = uniform([1, 4, 1, 1], -0.5, 0.5, 3);

    let specs = [
        ("conv2d", ConvSpec::new(1, 1, 1)),
        ("conv2d stride 2", ConvSpec::new(2, 1, 1)),
        ("conv2d dilation 2", ConvSpec::new(1, 2, 2)),
        ("conv2d asymmetric padding", ConvSpec::new(1, 0, 1).with_padding(0, 1)),
    ];
    for (name, spec) in specs {
        let (wc, bc) = (w.clone(), b.clone());
        out.push(case(&format!("{name} wrt input"), &x, move |t, v| {
            let (wv, bv) = (t.leaf(wc.clone()), t.leaf(bc.clone()));
            let y = t.conv2d(v, wv, Some(bv), spec)?;
            weighted_sum(t, y, 10)
        })?);
    }
    {
        let xc = x.clone();
        let bc = b.clone();
        out.push(case("conv2d wrt weight", &w, move |t, v| {
            let (xv, bv) = (t.leaf(xc.clone()), t.leaf(bc.clone()));
            let y = t.conv2d(xv, v, Some(bv), ConvSpec::new(1, 1, 2))?;
            weighted_sum(t, y, 11)
        })?);
        let (xc, wc) = (x.clone(), w.clone());
        out.push(case("conv2d wrt bias", &b, move |t, v| {
            let (xv, wv) = (t.leaf(xc.clone()), t.leaf(wc.clone()));
            let y = t.conv2d(xv, wv, Some(v), ConvSpec::new(1, 1, 1))?;
            weighted_sum(t, y, 12)
        })?);
    }

    let xt = uniform([2, 4, 3, 4], -1.0, 1.0, 4);
    let wt = uniform([4, 3, 2, 2], -0.5, 0.5, 5);
    let bt = uniform([1, 3, 1, 1], -0.5, 0.5, 6);
    {
        let (wc, bc) = (wt.clone(), bt.clone());
        out.push(case("conv_transpose2d wrt input", &xt, move |t, v| {
            let (wv, bv) = (t.leaf(wc.clone()), t.leaf(bc.clone()));
            let y = t.conv_transpose2d(v, wv, Some(bv), 2)?;
            weighted_sum(t, y, 13)
        })?);
        let (xc, bc) = (xt.clone(), bt.clone());
        out.push(case("conv_transpose2d wrt weight", &wt, move |t, v| {
            let (xv, bv) = (t.leaf(xc.clone()), t.leaf(bc.clone()));
            let y = t.conv_transpose2d(xv, v, Some(bv), 2)?;
            weighted_sum(t, y, 14)
        })?);
        let (xc, wc) = (xt.clone(), wt.clone());
        out.push(case("conv_transpose2d wrt bias", &bt, move |t, v| {
            let (xv, wv) = (t.leaf(xc.clone()), t.leaf(wc.clone()));
            let y = t.conv_transpose2d(xv, wv, Some(v), 2)?;
            weighted_sum(t, y, 15)
        })?);
    }

    let xp = uniform([2, 2, 6, 8], -1.0, 1.0, 7);
    for (name, mode, k, s) in [
        ("max pool 2x2", PoolMode::Max, 2, 2),
        ("avg pool 2x2", PoolMode::Avg, 2, 2),
        ("max pool 3x3 stride 1", PoolMode::Max, 3, 1),
    ] {
        out.push(case(name, &xp, move |t, v| {
            let y = t.pool2d(v, mode, k, s)?;
            weighted_sum(t, y, 16)
        })?);
    }
    out.push(case("global average pool", &xp, |t, v| {
        let y = t.global_avg_pool(v)?;
        weighted_sum(t, y, 17)
    })?);
    for (name, h, w) in [("bilinear x2", 12, 16), ("bilinear to 5x11", 5, 11)] {
        out.push(case(name, &xp, move |t, v| {
            let y = t.bilinear_resize(v, h, w)?;
            weighted_sum(t, y, 18)
        })?);
    }

    let xb = uniform([3, 2, 3, 3], -1.0, 2.0, 8);
    let gb = uniform([1, 2, 1, 1], 0.5, 1.5, 9);
    let bb = uniform([1, 2, 1, 1], -0.5, 0.5, 10);
    let rm = [0.1, -0.2];
    let rv = [0.8, 1.3];
    for (label, mode) in [("train", NormMode::Train), ("eval", NormMode::Eval)] {
        let (gc, bc) = (gb.clone(), bb.clone());
        out.push(case(&format!("batch norm {label} wrt input"), &xb, move |t, v| {
            let (g, be) = (t.leaf(gc.clone()), t.leaf(bc.clone()));
            let (y, _) = t.batch_norm(v, g, be, mode, &rm, &rv)?;
            weighted_sum(t, y, 19)
        })?);
        let (xc, bc) = (xb.clone(), bb.clone());
        out.push(case(&format!("batch norm {label} wrt gamma"), &gb, move |t, v| {
            let (xv, be) = (t.leaf(xc.clone()), t.leaf(bc.clone()));
            let (y, _) = t.batch_norm(xv, v, be, mode, &rm, &rv)?;
            weighted_sum(t, y, 20)
        })?);
        let (xc, gc) = (xb.clone(), gb.clone());
        out.push(case(&format!("batch norm {label} wrt beta"), &bb, move |t, v| {
            let (xv, g) = (t.leaf(xc.clone()), t.leaf(gc.clone()));
            let (y, _) = t.batch_norm(xv, g, v, mode, &rm, &rv)?;
            weighted_sum(t, y, 21)
        })?);
    }

    let xe = uniform([2, 3, 4, 5], -2.0, 2.0, 11);
    out.push(case("relu", &relu_safe(&xe), |t, v| {
        let y = t.relu(v)?;
        weighted_sum(t, y, 22)
    })?);
    out.push(case("sigmoid", &xe, |t, v| {
        let y = t.sigmoid(v)?;
        weighted_sum(t, y, 23)
    })?);
    out.push(case("softmax rows", &xe, |t, v| {
        let y = t.softmax_rows(v)?;
        weighted_sum(t, y, 24)
    })?);
    out.push(case("transpose", &xe, |t, v| {
        let y = t.transpose(v)?;
        weighted_sum(t, y, 25)
    })?);
    out.push(case("reshape", &xe, |t, v| {
        let y = t.reshape(v, [1, 6, 5, 4])?;
        weighted_sum(t, y, 26)
    })?);
    out.push(case("scale", &xe, |t, v| {
        let y = t.scale(v, -1.75)?;
        weighted_sum(t, y, 27)
    })?);
    out.push(case("sum", &xe, |t, v| {
        let sq = t.mul(v, v)?;
        t.sum(sq)
    })?);
    out.push(case("slice channels", &xe, |t, v| {
        let y = t.slice_channels(v, 1, 2)?;
        weighted_sum(t, y, 28)
    })?);

    let other = uniform([2, 2, 4, 5], -1.0, 1.0, 12);
    {
        let oc = other.clone();
        out.push(case("concat channels wrt first", &xe, move |t, v| {
            let o = t.leaf(oc.clone());
            let y = t.concat_channels(v, o)?;
            weighted_sum(t, y, 29)
        })?);
        let xc = xe.clone();
        out.push(case("concat channels wrt second", &other, move |t, v| {
            let a = t.leaf(xc.clone());
            let y = t.concat_channels(a, v)?;
            weighted_sum(t, y, 30)
        })?);
    }

    let ma = uniform([2, 1, 3, 4], -1.0, 1.0, 13);
    let mb = uniform([2, 1, 4, 5], -1.0, 1.0, 14);
    {
        let bc = mb.clone();
        out.push(case("matmul wrt left", &ma, move |t, v| {
            let r = t.leaf(bc.clone());
            let y = t.matmul(v, r)?;
            weighted_sum(t, y, 31)
        })?);
        let ac = ma.clone();
        out.push(case("matmul wrt right", &mb, move |t, v| {
            let l = t.leaf(ac.clone());
            let y = t.matmul(l, v)?;
            weighted_sum(t, y, 32)
        })?);
    }

    let gate = uniform([2, 3, 1, 1], -1.0, 1.0, 15);
    for (label, is_mul) in [("add", false), ("mul", true)] {
        let gc = gate.clone();
        out.push(case(&format!("{label} broadcast wrt left"), &xe, move |t, v| {
            let g = t.leaf(gc.clone());
            let y = if is_mul { t.mul(v, g)? } else { t.add(v, g)? };
            weighted_sum(t, y, 33)
        })?);
        let xc = xe.clone();
        out.push(case(&format!("{label} broadcast wrt right"), &gate, move |t, v| {
            let a = t.leaf(xc.clone());
            let y = if is_mul { t.mul(a, v)? } else { t.add(a, v)? };
            weighted_sum(t, y, 34)
        })?);
    }

    let target = uniform([2, 1, 3, 3], 0.0, 1.0, 16).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let z = uniform([2, 1, 3, 3], -4.0, 4.0, 17);
    out.push(case("bce with logits", &z, move |t, v| t.bce_with_logits(v, &target))?);
    Ok(out)
}

/// Input gradient in full, plus a sample of coordinates of every parameter.
fn block_cases(
    name: &str,
    store: &ParamStore<f64>,
    input: &Tensor4<f64>,
    mode: NormMode,
    forward: &dyn Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
    per_param: usize,
) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    out.push(case(&format!("{name} wrt input"), input, |t, v| {
        let mut s = Session::new(t, store, mode);
        let y = forward(&mut s, v)?;
        weighted_sum(s.tape, y, 40)
    })?);
    out.extend(param_cases(name, store, mode, per_param, 41, &|s| {
        let x = s.tape.leaf(input.clone());
        let y = forward(s, x)?;
        weighted_sum(s.tape, y, 40)
    })?);
    Ok(out)
}

/// Per-parameter checks. Coordinates are the largest analytic entry plus a
/// random sample among the significant ones; tensors with no significant
/// entry get a [`CaseKind::Negligible`] check on random coordinates.
fn param_cases(
    label: &str,
    store: &ParamStore<f64>,
    mode: NormMode,
    per_param: usize,
    seed: u64,
    loss: &dyn Fn(&mut Session<'_, f64>) -> Result<Var>,
) -> Result<Vec<GradCase>> {
    let analytic = {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, mode);
        for name in store.params.keys() {
            s.param(name)?;
        }
        let y = loss(&mut s)?;
        let mut grads = s.tape.backward(y)?;
        s.param_grads(&mut grads)
    };
    let mut out = Vec::new();
    for (k, (pname, value)) in store.params.iter().enumerate() {
        let f = |t: &mut Tape<f64>, v: Var| {
            let mut s = Session::new(t, store, mode);
            s.bind_param(pname, v)?;
            loss(&mut s)
        };
        let zeros = Tensor4::zeros(value.shape())?;
        let g = analytic.get(pname).unwrap_or(&zeros).data();
        let significant: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= SIGNIFICANT_GRADIENT).collect();
        let name = format!("{label} wrt {pname}");
        if significant.is_empty() {
            let idx = sample_indices(value.numel(), per_param, seed + k as u64);
            let report = grad_check_at(&f, value, GRAD_STEP, &idx)?;
            let mut max_abs = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for &i in &idx {
                let r = grad_check_at(&f, value, GRAD_STEP, &[i])?;
                max_abs = max_abs.max(r.numeric.abs());
            }
            out.push(GradCase {
                name,
                report,
                kind: CaseKind::Negligible { max_abs },
            });
            continue;
        }
        let top = significant
            .iter()
            .copied()
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap_or(0);
        let mut idx = vec![top];
        let rest: Vec<usize> = significant.iter().copied().filter(|&i| i != top).collect();
        for j in sample_indices(rest.len(), per_param.saturating_sub(1), seed + k as u64) {
            idx.push(rest[j]);
        }
        out.push(GradCase {
            name,
            report: grad_check_at(&f, value, GRAD_STEP, &idx)?,
            kind: CaseKind::Compared,
        });
    }
    Ok(out)
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    for (k, v) in store.params.values_mut().enumerate() {
        *v = uniform(v.shape(), -0.5, 0.5, seed + k as u64);
    }
}

/// Every block on a (1,16,8,8) input with randomised parameters.
pub fn block_checks(per_param: usize) -> Result<Vec<GradCase>> {
    const C: usize = 16;
    let x = uniform([1, C, 8, 8], -1.0, 1.0, 50);
    let x_pos = uniform([1, C, 8, 8], 0.05, 1.0, 51);
    let mut out = Vec::new();
    let mut init = Initializer::new(0);

    let conv = ConvBlockParams::new("block", C, C);
    let mut store = ParamStore::new();
    conv.declare(&mut store, &mut init)?;
    randomize(&mut store, 100);
    for (k, g) in ["block.bn1.gamma", "block.bn2.gamma"].into_iter().enumerate() {
        *store.param_mut(g)? = uniform([1, C, 1, 1], 0.5, 1.5, 110 + k as u64);
    }
    out.extend(block_cases("conv block (train BN)", &store, &x, NormMode::Train, &|s, v| conv_block_forward(s, v, &conv), per_param)?);

    let mkdc = MkdcParams::new("mkdc", C, DEFAULT_DILATIONS)?;
    let mut store = ParamStore::new();
    mkdc.declare(&mut store, &mut init)?;
    randomize(&mut store, 200);
    out.extend(block_cases("mkdc", &store, &x_pos, NormMode::Eval, &|s, v| mkdc_forward(s, v, &mkdc), per_param)?);

    let se = SeParams::new("se", C, 4)?;
    let mut store = ParamStore::new();
    se.declare(&mut store, &mut init)?;
    randomize(&mut store, 300);
    out.extend(block_cases("se block", &store, &x, NormMode::Eval, &|s, v| se_block_forward(s, v, &se), per_param)?);
    out.extend(block_cases("channel attention", &store, &x, NormMode::Eval, &|s, v| cab_forward(s, v, &se), per_param)?);

    let sab = SabParams::new("sab", C)?;
    let mut store = ParamStore::new();
    sab.declare(&mut store, &mut init)?;
    randomize(&mut store, 400);
    out.extend(block_cases("spatial attention", &store, &x, NormMode::Eval, &|s, v| sab_forward(s, v, &sab), per_param)?);

    let aff = AffinityParams::new("aff", C, 4)?;
    let mut store = ParamStore::new();
    aff.declare(&mut store, &mut init)?;
    randomize(&mut store, 500);
    out.extend(block_cases("affinity attention", &store, &x, NormMode::Eval, &|s, v| affinity_attention_forward(s, v, &aff), per_param)?);

    let apf = ApfParams::new("apf", C, 4)?;
    let mut store = ParamStore::new();
    apf.declare(&mut store, &mut init)?;
    randomize(&mut store, 600);
    out.extend(block_cases("apf", &store, &x, NormMode::Eval, &|s, v| apf_forward(s, v, &apf), per_param)?);

    let high = uniform([1, C, 8, 8], -1.0, 1.0, 52);
    for mode in [FusionMode::Fixed, FusionMode::Learned] {
        let fw = FusionWeights::new("fuse", mode, C);
        let mut store = ParamStore::new();
        fw.declare(&mut store)?;
        randomize(&mut store, 700);
        let hc = high.clone();
        let name = format!("udff {mode} wrt low");
        out.extend(block_cases(&name, &store, &x, NormMode::Eval, &move |s, v| {
            let h = s.input(hc.clone());
            udff_fuse(s, v, h, &fw)
        }, per_param)?);
        let fw = FusionWeights::new("fuse", mode, C);
        let lc = x.clone();
        out.push(case(&format!("udff {mode} wrt high"), &high, |t, v| {
            let mut s = Session::new(t, &store, NormMode::Eval);
            let l = s.input(lc.clone());
            let y = udff_fuse(&mut s, l, v, &fw)?;
            weighted_sum(s.tape, y, 40)
        })?);
    }
    Ok(out)
}

/// Full network on a (1,3,16,16) input with BCE against a fixed target,
/// attention scalars at 0.1, eval-mode batch norm. Checks the whole input
/// gradient and `per_param` sampled coordinates of every parameter tensor.
pub fn network_checks(cfg: &NetworkConfig, seed: u64, per_param: usize) -> Result<Vec<GradCase>> {
    let net = Network::new(cfg)?;
    let mut store = init_params::<f64>(cfg, seed)?;
    set_attention_gammas(&net, &mut store, 0.1)?;
    let x = uniform([1, cfg.in_channels, 16, 16], 0.0, 1.0, seed + 1);
    let target = uniform([1, 1, 16, 16], 0.0, 1.0, seed + 2).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    let loss = |s: &mut Session<'_, f64>, x: Var| -> Result<Var> {
        let out = net.forward(s, x)?;
        s.tape.bce_with_logits(out.logits, &target)
    };
    let label = format!("network {:?}/{}", cfg.channels, cfg.bottleneck);
    let mut out = vec![case(&format!("{label} wrt input"), &x, |t, v| {
        let mut s = Session::new(t, &store, NormMode::Eval);
        loss(&mut s, v)
    })?];
    if per_param > 0 {
        out.extend(param_cases(&label, &store, NormMode::Eval, per_param, 900, &|s| {
            let xv = s.tape.leaf(x.clone());
            loss(s, xv)
        })?);
    }
    Ok(out)
}

/// Width used for the exhaustive network check: the default topology with
/// every channel count divided by 4.
pub fn network_check_config() -> NetworkConfig {
    NetworkConfig::default().narrowed(4)
}
