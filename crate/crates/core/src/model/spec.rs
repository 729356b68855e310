use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::KvMap;
use crate::error::{Error, Result};

/// Attention layer kind in every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Attention {
    None,
    Full,
    Sliding(usize),
}

impl Attention {
    /// Band width used for a sequence whose last position is `max_pos`.
    pub fn width(&self, max_pos: usize) -> usize {
        match *self {
            Attention::None => 0,
            Attention::Full => max_pos + 1,
            Attention::Sliding(k) => k,
        }
    }

    /// Number of past positions a chunk needs to see from its predecessors.
    pub fn cache_rows(&self) -> Option<usize> {
        match *self {
            Attention::None => Some(0),
            Attention::Full => None,
            Attention::Sliding(k) => Some(k - 1),
        }
    }
}

/// Which test-time training method the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Static model, no updates at test time.
    Off,
    /// Next-token TTT on the trailing MLPs, trained end to end.
    E2e,
    /// Next-token TTT on multi-head fast MLPs in every block.
    E2eAllLayersMh,
    /// Per-block key-value binding loss, output from the updated weights.
    Kvb,
    /// Key-value binding with the prediction reused as output.
    KvbSimplified,
    /// Static training, next-token TTT at test time.
    Naive,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Off,
        Variant::E2e,
        Variant::E2eAllLayersMh,
        Variant::Kvb,
        Variant::KvbSimplified,
        Variant::Naive,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Off => "off",
            Variant::E2e => "e2e",
            Variant::E2eAllLayersMh => "e2e_all_layers_mh",
            Variant::Kvb => "kvb",
            Variant::KvbSimplified => "kvb_simplified",
            Variant::Naive => "naive",
        }
    }

    /// Whether each block carries a multi-head fast MLP.
    pub fn multi_head(&self) -> bool {
        matches!(
            self,
            Variant::E2eAllLayersMh | Variant::Kvb | Variant::KvbSimplified
        )
    }

    pub fn is_kvb(&self) -> bool {
        matches!(self, Variant::Kvb | Variant::KvbSimplified)
    }

    /// Whether fast weights move at test time.
    pub fn updates_at_test_time(&self) -> bool {
        !matches!(self, Variant::Off)
    }

    /// Whether the training objective unrolls the inner loop.
    pub fn trains_end_to_end(&self) -> bool {
        !matches!(self, Variant::Off | Variant::Naive)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Share of blocks, counted from the top, whose MLPs are fast weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FastFraction {
    All,
    Half,
    Quarter,
    Eighth,
    FinalOnly,
}

impl FastFraction {
    pub const ALL: [FastFraction; 5] = [
        FastFraction::All,
        FastFraction::Half,
        FastFraction::Quarter,
        FastFraction::Eighth,
        FastFraction::FinalOnly,
    ];

    /// Number of trailing fast blocks: `floor(L * f)`, at least one.
    pub fn blocks(&self, n_blocks: usize) -> usize {
        let n = match self {
            FastFraction::All => n_blocks,
            FastFraction::Half => n_blocks / 2,
            FastFraction::Quarter => n_blocks / 4,
            FastFraction::Eighth => n_blocks / 8,
            FastFraction::FinalOnly => 1,
        };
        n.max(1).min(n_blocks)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FastFraction::All => "1",
            FastFraction::Half => "1/2",
            FastFraction::Quarter => "1/4",
            FastFraction::Eighth => "1/8",
            FastFraction::FinalOnly => "final",
        }
    }
}

impl fmt::Display for FastFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FastFraction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "all" => Ok(FastFraction::All),
            "1/2" | "half" => Ok(FastFraction::Half),
            "1/4" | "quarter" => Ok(FastFraction::Quarter),
            "1/8" | "eighth" => Ok(FastFraction::Eighth),
            "final" | "final_only" => Ok(FastFraction::FinalOnly),
            _ => Err(Error::Config(format!("unknown fast fraction {s:?}"))),
        }
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub attention: Attention,
    pub ttt_variant: Variant,
    pub fast_fraction: FastFraction,
    pub dual_mlp: bool,
    /// Hidden width of a regular MLP before any dual-MLP or variant shrink.
    pub mlp_hidden_dim: usize,
    pub qk_norm: bool,
    pub rope_theta: f64,
    /// Hidden width of each head of a multi-head fast MLP, as a multiple of
    /// the head dimension.
    pub mh_expansion: usize,
    pub norm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelSpec {
    /// Two blocks without attention, width 384 with 6 heads.
    pub fn toy() -> Self {
        Self {
            n_blocks: 2,
            embed_dim: 384,
            n_heads: 6,
            vocab_size: crate::data::VOCAB_SIZE,
            attention: Attention::None,
            ttt_variant: Variant::Off,
            fast_fraction: FastFraction::All,
            dual_mlp: false,
            mlp_hidden_dim: default_hidden(384),
            qk_norm: false,
            rope_theta: 10_000.0,
            mh_expansion: 2,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn window_k(&self) -> Option<usize> {
        match self.attention {
            Attention::Sliding(k) => Some(k),
            _ => None,
        }
    }

    /// Number of trailing blocks with fast MLPs; zero for multi-head
    /// variants, whose fast weights live in every block instead.
    pub fn n_fast_blocks(&self) -> usize {
        if self.ttt_variant.multi_head() {
            0
        } else {
            self.fast_fraction.blocks(self.n_blocks)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 {
            return fail("n_blocks must be positive".into());
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.mlp_hidden_dim == 0 {
            return fail("mlp_hidden_dim must be positive".into());
        }
        if let Attention::Sliding(0) = self.attention {
            return fail("window_k must be positive".into());
        }
        if self.attention != Attention::None && !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary embedding",
                self.head_dim()
            ));
        }
        if self.ttt_variant.multi_head() && self.mh_expansion == 0 {
            return fail("mh_expansion must be positive".into());
        }
        if !(self.rope_theta > 0.0) {
            return fail("rope_theta must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_blocks", self.n_blocks);
        kv.set("embed_dim", self.embed_dim);
        kv.set("n_heads", self.n_heads);
        kv.set("vocab_size", self.vocab_size);
        let (att, k) = match self.attention {
            Attention::None => ("none", None),
            Attention::Full => ("full", None),
            Attention::Sliding(k) => ("sliding", Some(k)),
        };
        kv.set("attention", att);
        if let Some(k) = k {
            kv.set("window_k", k);
        }
        kv.set("ttt_variant", self.ttt_variant);
        kv.set("fast_fraction", self.fast_fraction);
        kv.set("dual_mlp", self.dual_mlp);
        kv.set("mlp_hidden_dim", self.mlp_hidden_dim);
        kv.set("qk_norm", self.qk_norm);
        kv.set("rope_theta", self.rope_theta);
        kv.set("mh_expansion", self.mh_expansion);
        kv.set("norm_eps", self.norm_eps);
        kv
    }

    /// Reads keys present in `kv` on top of `base`.
    pub fn from_kv(kv: &KvMap, base: &ModelSpec) -> Result<Self> {
        kv.reject_unknown(&[
            "n_blocks",
            "embed_dim",
            "n_heads",
            "vocab_size",
            "attention",
            "window_k",
            "ttt_variant",
            "fast_fraction",
            "dual_mlp",
            "mlp_hidden_dim",
            "qk_norm",
            "rope_theta",
            "mh_expansion",
            "norm_eps",
        ])?;
        let mut s = base.clone();
        let old_default_hidden = default_hidden(s.embed_dim);
        kv.read_into("n_blocks", &mut s.n_blocks)?;
        kv.read_into("embed_dim", &mut s.embed_dim)?;
        kv.read_into("n_heads", &mut s.n_heads)?;
        kv.read_into("vocab_size", &mut s.vocab_size)?;
        if !kv.contains("mlp_hidden_dim") && s.mlp_hidden_dim == old_default_hidden {
            s.mlp_hidden_dim = default_hidden(s.embed_dim);
        }
        kv.read_into("mlp_hidden_dim", &mut s.mlp_hidden_dim)?;
        let window: Option<usize> = kv.get("window_k")?;
        if let Some(att) = kv.raw("attention") {
            s.attention = match att {
                "none" => Attention::None,
                "full" => Attention::Full,
                "sliding" => {
                    Attention::Sliding(window.or(s.window_k()).ok_or_else(|| {
                        Error::Config("attention=sliding requires window_k".into())
                    })?)
                }
                other => return Err(Error::Config(format!("unknown attention kind {other:?}"))),
            };
        } else if let (Some(k), Attention::Sliding(_)) = (window, s.attention) {
            s.attention = Attention::Sliding(k);
        }
        kv.read_into("ttt_variant", &mut s.ttt_variant)?;
        kv.read_into("fast_fraction", &mut s.fast_fraction)?;
        kv.read_into("dual_mlp", &mut s.dual_mlp)?;
        kv.read_into("qk_norm", &mut s.qk_norm)?;
        kv.read_into("rope_theta", &mut s.rope_theta)?;
        kv.read_into("mh_expansion", &mut s.mh_expansion)?;
        kv.read_into("norm_eps", &mut s.norm_eps)?;
        s.validate()?;
        Ok(s)
    }
}

/// Gated MLP hidden width giving roughly the parameter count of a `4d`
/// two-matrix MLP.
pub fn default_hidden(d: usize) -> usize {
    ((8 * d) as f64 / 3.0).round() as usize
}
