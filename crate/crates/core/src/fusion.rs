//! Fusion of low- and high-resolution tokens, plus the cross-attention block
//! shared by the object-merging variants.
//!
//! The default is the conv-gate:
//!
//! ```text
//! E_F = E_L + G(conv_l(E_L), conv_h(E_H)) ⊙ align(E_H)
//! G(a, b) = sigmoid([a ; b] · W_g + b_g)
//! ```
//!
//! `align` is a bias-free linear map `C_H → C_L` so the gated product is
//! shape-compatible with `E_L` when the two encoders disagree on width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, ParamStore, TokenConv};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[default]
    #[serde(rename = "conv_gate")]
    ConvGate,
    #[serde(rename = "channel_concat")]
    ChannelConcat,
    #[serde(rename = "f_to_b_xattn")]
    FToBXattn,
    #[serde(rename = "b_to_f_xattn")]
    BToFXattn,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::ConvGate,
        FusionStrategy::ChannelConcat,
        FusionStrategy::FToBXattn,
        FusionStrategy::BToFXattn,
    ];

    /// Token-level fusion kernel. The cross-attention strategies keep the
    /// conv-gate for the low/high fusion and differ in how object tokens merge.
    pub fn token_fusion(self) -> TokenFusion {
        match self {
            FusionStrategy::ChannelConcat => TokenFusion::ChannelConcat,
            _ => TokenFusion::ConvGate,
        }
    }

    /// Merge method forced by this strategy, if any.
    pub fn merge_override(self) -> Option<MergeMethod> {
        match self {
            FusionStrategy::FToBXattn => Some(MergeMethod::FToBXattn),
            FusionStrategy::BToFXattn => Some(MergeMethod::BToFXattn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::ConvGate => "conv_gate",
            FusionStrategy::ChannelConcat => "channel_concat",
            FusionStrategy::FToBXattn => "f_to_b_xattn",
            FusionStrategy::BToFXattn => "b_to_f_xattn",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenFusion {
    ConvGate,
    ChannelConcat,
}

/// How object tokens join the visual tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeMethod {
    #[default]
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "f_to_b_xattn")]
    FToBXattn,
    #[serde(rename = "b_to_f_xattn")]
    BToFXattn,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 3] = [
        MergeMethod::Concat,
        MergeMethod::FToBXattn,
        MergeMethod::BToFXattn,
    ];

    pub fn uses_attention(self) -> bool {
        self != MergeMethod::Concat
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Concat => "concat",
            MergeMethod::FToBXattn => "f_to_b_xattn",
            MergeMethod::BToFXattn => "b_to_f_xattn",
        }
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One gate value per token and channel.
    #[default]
    PerChannel,
    /// One gate value per token, shared across channels.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub gate: GateMode,
    pub kernel: usize,
    /// Width both streams are convolved to before gating.
    pub gate_channels: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::ConvGate,
            gate: GateMode::PerChannel,
            kernel: 1,
            gate_channels: 32,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fusion.kernel {} must be odd",
                self.kernel
            )));
        }
        if self.gate_channels == 0 {
            return Err(Error::Config("fusion.gate_channels must be positive".into()));
        }
        Ok(())
    }

    /// Width of `E_F` for the given encoder widths.
    pub fn fused_width(&self, c_low: usize, c_high: usize) -> usize {
        match self.strategy.token_fusion() {
            TokenFusion::ConvGate => c_low,
            TokenFusion::ChannelConcat => c_low + c_high,
        }
    }
}

/// Learned pieces of the conv-gate.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub conv_low: TokenConv,
    pub conv_high: TokenConv,
    pub gate: Linear,
    pub align_high: Linear,
    pub mode: GateMode,
}

impl FusionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &FusionConfig,
        c_low: usize,
        c_high: usize,
    ) -> Result<Self> {
        let cg = cfg.gate_channels;
        let conv_low = TokenConv::init(
            store,
            rng,
            "fusion.conv_low",
            Group::Fusion,
            c_low,
            cg,
            cfg.kernel,
        )?;
        let conv_high = TokenConv::init(
            store,
            rng,
            "fusion.conv_high",
            Group::Fusion,
            c_high,
            cg,
            cfg.kernel,
        )?;
        let gate_out = match cfg.gate {
            GateMode::PerChannel => c_low,
            GateMode::PerToken => 1,
        };
        let gate = Linear::init(store, rng, "fusion.gate", Group::Fusion, 2 * cg, gate_out, true);
        let align_high = Linear::init(
            store,
            rng,
            "fusion.align_high",
            Group::Fusion,
            c_high,
            c_low,
            false,
        );
        Ok(Self {
            conv_low,
            conv_high,
            gate,
            align_high,
            mode: cfg.gate,
        })
    }
}

fn check_tokens(tape: &Tape, e_low: Var, e_high: Var, op: &'static str) -> Result<(usize, usize)> {
    let (n_low, c_low) = tape.value(e_low).dims2()?;
    let (n_high, _) = tape.value(e_high).dims2()?;
    if n_low != n_high {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(e_low).to_vec(),
            rhs: tape.shape(e_high).to_vec(),
        });
    }
    Ok((n_low, c_low))
}

/// Gate values `G ∈ (0, 1)`, shaped `N × C_L` in either gate mode.
pub fn gate_values(
    tape: &mut Tape,
    params: &Bound,
    p: &FusionParams,
    e_low: Var,
    e_high: Var,
) -> Result<Var> {
    let (_, c_low) = check_tokens(tape, e_low, e_high, "conv_gate_fuse")?;
    let a = p.conv_low.forward(tape, params, e_low)?;
    let b = p.conv_high.forward(tape, params, e_high)?;
    let both = tape.concat(&[a, b], 1)?;
    let logits = p.gate.forward(tape, params, both)?;
    let g = tape.sigmoid(logits)?;
    match p.mode {
        GateMode::PerChannel => Ok(g),
        GateMode::PerToken => {
            let spread = tape.constant(Tensor::ones(vec![1, c_low]));
            tape.matmul(g, spread)
        }
    }
}

/// Conv-gate fusion, `N × C_L` in and out.
pub fn conv_gate_fuse(
    tape: &mut Tape,
    params: &Bound,
    p: &FusionParams,
    e_low: Var,
    e_high: Var,
) -> Result<Var> {
    let g = gate_values(tape, params, p, e_low, e_high)?;
    let aligned = p.align_high.forward(tape, params, e_high)?;
    let gated = tape.mul(g, aligned)?;
    tape.add(e_low, gated)
}

/// Per-token channel concatenation, `N × (C_L + C_H)`.
pub fn channel_concat_fuse(tape: &mut Tape, e_low: Var, e_high: Var) -> Result<Var> {
    check_tokens(tape, e_low, e_high, "channel_concat_fuse")?;
    tape.concat(&[e_low, e_high], 1)
}

/// Fusion module as configured: conv-gate params or parameter-free concat.
#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    ConvGate(FusionParams),
    ChannelConcat,
}

impl Fusion {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &FusionConfig,
        c_low: usize,
        c_high: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.strategy.token_fusion() {
            TokenFusion::ConvGate => Fusion::ConvGate(FusionParams::init(store, rng, cfg, c_low, c_high)?),
            TokenFusion::ChannelConcat => Fusion::ChannelConcat,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, e_low: Var, e_high: Var) -> Result<Var> {
        match self {
            Fusion::ConvGate(p) => conv_gate_fuse(tape, params, p, e_low, e_high),
            Fusion::ChannelConcat => channel_concat_fuse(tape, e_low, e_high),
        }
    }
}

/// Single-head scaled dot-product cross-attention with a residual on the
/// query stream: `out = Q_in + softmax(Q Kᵀ / √D) V`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl CrossAttention {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, group: Group, dim: usize) -> Self {
        Self {
            wq: Linear::init(store, rng, &format!("{name}.q"), group, dim, dim, false),
            wk: Linear::init(store, rng, &format!("{name}.k"), group, dim, dim, false),
            wv: Linear::init(store, rng, &format!("{name}.v"), group, dim, dim, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, query: Var, keyvalue: Var) -> Result<Var> {
        let (_, dq) = tape.value(query).dims2()?;
        let (b, dk) = tape.value(keyvalue).dims2()?;
        if b == 0 {
            return Err(Error::invalid("cross_attention", "empty key/value set"));
        }
        if dq != dk {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: tape.shape(query).to_vec(),
                rhs: tape.shape(keyvalue).to_vec(),
            });
        }
        let q = self.wq.forward(tape, params, query)?;
        let k = self.wk.forward(tape, params, keyvalue)?;
        let v = self.wv.forward(tape, params, keyvalue)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(scores, 1.0 / (dq as f64).sqrt());
        let attn = tape.softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        tape.add(query, mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FreezeMask;
    use crate::rng::{uniform, SeedTree};

    struct Setup {
        store: ParamStore,
        params: FusionParams,
        e_low: Tensor,
        e_high: Tensor,
    }

    fn setup(mode: GateMode, kernel: usize) -> Setup {
        let seeds = SeedTree::new(11);
        let mut rng = seeds.stream("fusion");
        let cfg = FusionConfig {
            gate: mode,
            kernel,
            gate_channels: 5,
            ..FusionConfig::default()
        };
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, &mut rng, &cfg, 4, 6).unwrap();
        let mut data = seeds.stream("data");
        Setup {
            store,
            params,
            e_low: uniform(&mut data, vec![7, 4], 1.0),
            e_high: uniform(&mut data, vec![7, 6], 1.0),
        }
    }

    fn fuse(s: &Setup) -> Tensor {
        let mut tape = Tape::new();
        let bound = s.store.bind(&mut tape, &FreezeMask::frozen());
        let l = tape.constant(s.e_low.clone());
        let h = tape.constant(s.e_high.clone());
        let out = conv_gate_fuse(&mut tape, &bound, &s.params, l, h).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn saturated_gates() {
        let mut s = setup(GateMode::PerChannel, 1);
        let bias = s.params.gate.b.unwrap();
        *s.store.get_mut(bias) = Tensor::full(vec![1, 4], -30.0);
        assert!(fuse(&s).max_abs_diff(&s.e_low).unwrap() < 1e-9);

        *s.store.get_mut(bias) = Tensor::full(vec![1, 4], 30.0);
        // align = identity on the first C_L channels of E_H.
        let align = Tensor::from_fn(vec![6, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        *s.store.get_mut(s.params.align_high.w) = align;
        let expect = Tensor::from_fn(vec![7, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            s.e_low.at2(r, c) + s.e_high.at2(r, c)
        });
        assert!(fuse(&s).max_abs_diff(&expect).unwrap() < 1e-9);
    }

    #[test]
    fn token_mismatch_is_an_error() {
        let s = setup(GateMode::PerChannel, 1);
        let mut tape = Tape::new();
        let bound = s.store.bind(&mut tape, &FreezeMask::frozen());
        let l = tape.constant(Tensor::zeros(vec![7, 4]));
        let h = tape.constant(Tensor::zeros(vec![8, 6]));
        assert!(conv_gate_fuse(&mut tape, &bound, &s.params, l, h).is_err());
        assert!(channel_concat_fuse(&mut tape, l, h).is_err());
    }

    #[test]
    fn per_token_gate_is_constant_across_channels() {
        let s = setup(GateMode::PerToken, 3);
        let mut tape = Tape::new();
        let bound = s.store.bind(&mut tape, &FreezeMask::frozen());
        let l = tape.constant(s.e_low.clone());
        let h = tape.constant(s.e_high.clone());
        let g = gate_values(&mut tape, &bound, &s.params, l, h).unwrap();
        for row in tape.value(g).data().chunks(4) {
            assert!(row.iter().all(|&v| v == row[0] && v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn channel_concat_layout() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_fn(vec![3, 2], |i| i as f64));
        let h = tape.constant(Tensor::from_fn(vec![3, 1], |i| 100.0 + i as f64));
        let out = channel_concat_fuse(&mut tape, l, h).unwrap();
        assert_eq!(tape.value(out).row(0), &[0.0, 1.0, 100.0]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("resampler".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn cross_attention_singleton_and_uniform() {
        let seeds = SeedTree::new(5);
        let mut rng = seeds.stream("xattn");
        let mut store = ParamStore::new();
        let xa = CrossAttention::init(&mut store, &mut rng, "merge", Group::Merge, 3);
        let q = uniform(&mut rng, vec![4, 3], 1.0);
        let kv = uniform(&mut rng, vec![1, 3], 1.0);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezeMask::frozen());
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = xa.forward(&mut tape, &bound, qv, kvv).unwrap();
        let vproj = kv.matmul(store.get(xa.wv.w)).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let want = q.at2(r, c) + vproj.at2(0, c);
                assert!((tape.value(out).at2(r, c) - want).abs() < 1e-12);
            }
        }

        // Zeroed query projection: uniform weights, output = query + mean(V).
        *store.get_mut(xa.wq.w) = Tensor::zeros(vec![3, 3]);
        let kv = uniform(&mut rng, vec![5, 3], 1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezeMask::frozen());
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = xa.forward(&mut tape, &bound, qv, kvv).unwrap();
        let v = kv.matmul(store.get(xa.wv.w)).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let mean: f64 = (0..5).map(|i| v.at2(i, c)).sum::<f64>() / 5.0;
                assert!((tape.value(out).at2(r, c) - (q.at2(r, c) + mean)).abs() < 1e-12);
            }
        }

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezeMask::frozen());
        let qv = tape.constant(q);
        let empty = tape.constant(Tensor::zeros(vec![0, 3]));
        assert!(xa.forward(&mut tape, &bound, qv, empty).is_err());
    }
}
