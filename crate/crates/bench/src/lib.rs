//! Shared fixtures for the criterion benchmarks.

use ttt_core::data::Corpus;
use ttt_core::model::{
    default_hidden, Attention, FastFraction, Model, ModelSpec, ParamSet, Variant,
};

/// Small two-block model with the given attention and variant.
pub fn model(attention: Attention, variant: Variant, width: usize) -> (Model, ParamSet) {
    let spec = ModelSpec {
        n_blocks: 2,
        embed_dim: width,
        n_heads: 4,
        mlp_hidden_dim: default_hidden(width),
        attention,
        ttt_variant: variant,
        fast_fraction: FastFraction::Half,
        qk_norm: true,
        ..ModelSpec::toy()
    };
    let m = Model::new(&spec).expect("valid bench spec");
    let p = m.init(0);
    (m, p)
}

/// First packed sequence of `t` bytes from the bundled corpus.
pub fn sequence(t: usize) -> Vec<u32> {
    Corpus::bundled()
        .pack(1, t, 0)
        .expect("bundled corpus packs")[0]
        .tokens
        .clone()
}
