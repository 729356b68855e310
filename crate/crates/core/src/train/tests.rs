use super::*;
use crate::data::Corpus;
use crate::model::{Attention, FastFraction, ModelSpec, Variant};

fn recipe(steps: usize) -> TrainRecipe {
    TrainRecipe {
        batch_tokens: 100,
        total_tokens: 100 * steps,
        ..TrainRecipe::default()
    }
}

#[test]
fn schedule_reference_points() {
    let r = recipe(100);
    assert_eq!(lr_at(0, &r).unwrap(), 0.0);
    assert!((lr_at(10, &r).unwrap() - 3e-3).abs() < 1e-15);
    assert!((lr_at(55, &r).unwrap() - 1.505e-3).abs() < 1e-15);
    assert!((lr_at(5, &r).unwrap() - 1.5e-3).abs() < 1e-15);
    assert!(lr_at(99, &r).unwrap() > r.min_lr);
    assert!(matches!(lr_at(100, &r), Err(Error::Index(_))));
    // Monotone decay after warmup.
    let lrs: Vec<f64> = (10..100).map(|s| lr_at(s, &r).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn finetune_budget_and_restart() {
    let pre = recipe(200);
    let ft = pre.finetune(50);
    assert_eq!(ft.total_tokens, 1000);
    assert_eq!(lr_at(0, &ft).unwrap(), 0.0);
}

#[test]
fn adamw_matches_closed_form_on_quadratic() {
    // f(w) = ½ a w², gradient a·w. Two steps by hand.
    let (a, w0, lr) = (3.0, 0.7, 0.01);
    let (b1, b2, eps, wd) = (0.9, 0.95, 1e-8, 0.1);
    let mut p = ParamSet::new();
    p.push("w", Tensor::matrix(1, 1, vec![w0]).unwrap(), false)
        .unwrap();
    let mut opt = AdamW::new(&p, b1, b2, eps, wd);
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
    for t in 1..=2 {
        let g = a * w;
        opt.step(&mut p, &[Tensor::matrix(1, 1, vec![g]).unwrap()], lr)
            .unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w = w * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        assert!((p.tensor(0).item() - w).abs() < 1e-12);
    }
    // Vectors are not decayed.
    let mut q = ParamSet::new();
    q.push("gain", Tensor::from_vec(vec![1.0]), false).unwrap();
    let mut opt = AdamW::new(&q, b1, b2, eps, wd);
    opt.step(&mut q, &[Tensor::from_vec(vec![0.0])], 0.1)
        .unwrap();
    assert_eq!(q.tensor(0).item(), 1.0);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![
        Tensor::from_vec(vec![3.0, 0.0]),
        Tensor::from_vec(vec![4.0]),
    ];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::from_vec(vec![0.1])];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data()[0], 0.1);
}

fn tiny() -> (Model, Vec<PackedSequence>) {
    let spec = ModelSpec {
        n_blocks: 1,
        embed_dim: 8,
        n_heads: 2,
        vocab_size: 257,
        attention: Attention::None,
        ttt_variant: Variant::E2e,
        fast_fraction: FastFraction::All,
        dual_mlp: false,
        mlp_hidden_dim: 16,
        qk_norm: false,
        rope_theta: 10_000.0,
        mh_expansion: 2,
        norm_eps: 1e-6,
    };
    (
        Model::new(&spec).unwrap(),
        Corpus::bundled().pack(16, 16, 0).unwrap()[..12].to_vec(),
    )
}

#[test]
fn same_seed_gives_identical_runs() {
    let (model, seqs) = tiny();
    let cfg = TttConfig {
        eta: 0.1,
        batch_b: 4,
        ..TttConfig::default()
    };
    let r = TrainRecipe {
        batch_tokens: 32,
        total_tokens: 32 * 6,
        objective: Objective::E2e,
        ..TrainRecipe::default()
    };
    let a = train_run(&model, &cfg, &r, &seqs, |_| {}).unwrap();
    let b = train_run(&model, &cfg, &r, &seqs, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
    let c = train_run(&model, &cfg, &TrainRecipe { seed: 1, ..r }, &seqs, |_| {}).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn training_reduces_loss() {
    let (model, seqs) = tiny();
    let r = TrainRecipe {
        batch_tokens: 64,
        total_tokens: 64 * 40,
        peak_lr: 1e-2,
        ..TrainRecipe::default()
    };
    let out = train_run(&model, &TttConfig::default(), &r, &seqs, |_| {}).unwrap();
    let first = out.curve[0].loss;
    let last = out.curve.last().unwrap().loss;
    assert!(last < first - 1.0, "{first} -> {last}");
}

#[test]
fn zero_step_finetune_is_identity() {
    let (model, seqs) = tiny();
    let p = model.init(3);
    let r = TrainRecipe {
        batch_tokens: 32,
        total_tokens: 0,
        ..TrainRecipe::default()
    };
    let out = finetune_run(&model, &p, &TttConfig::default(), &r, &seqs, |_| {}).unwrap();
    assert_eq!(out.params, p);
    assert!(out.curve.is_empty());
}

#[test]
fn divergence_aborts_with_step() {
    let (model, seqs) = tiny();
    let mut p = model.init(0);
    let i = p.index_of("unembed").unwrap();
    p.set(i, Tensor::full(p.tensor(i).shape(), 0.0)).unwrap();
    // A huge learning rate on the output layer blows the loss up quickly.
    let r = TrainRecipe {
        batch_tokens: 32,
        total_tokens: 32 * 30,
        peak_lr: 1e4,
        warmup_fraction: 0.0,
        ..TrainRecipe::default()
    };
    match optimize(&model, p, &TttConfig::default(), &r, &seqs, |_| {}) {
        Err(Error::Diverged { step, .. }) => assert!(step > 0 && step < 30),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.curve.len())
        ),
    }
}

#[test]
fn e2e_gradient_reaches_initial_fast_weights() {
    let (model, seqs) = tiny();
    let p = model.init(4);
    let toks = &seqs[0].tokens;
    let fast = p.fast_indices();
    let grads = |eta: f64, obj: Objective| {
        let cfg = TttConfig {
            eta,
            batch_b: 4,
            ..TttConfig::default()
        };
        loss_and_grad(&model, &p, toks, &cfg, obj, false)
            .unwrap()
            .grads
    };
    let naive = grads(0.5, Objective::Naive);
    let e2e = grads(0.5, Objective::E2e);
    assert!(fast.iter().any(|&i| naive[i].max_abs_diff(&e2e[i]) > 1e-9));
    let still = grads(0.0, Objective::E2e);
    for &i in &fast {
        assert_eq!(naive[i], still[i]);
    }
}

#[test]
fn recipe_roundtrips_and_validates() {
    let r = TrainRecipe {
        peak_lr: 5e-3,
        objective: Objective::E2e,
        checkpoint: false,
        ..recipe(7)
    };
    assert_eq!(
        TrainRecipe::from_kv(&r.to_kv(), &TrainRecipe::default()).unwrap(),
        r
    );
    assert!(TrainRecipe {
        total_tokens: 150,
        ..recipe(1)
    }
    .validate()
    .is_err());
    assert_eq!(split_seed(1, "a"), split_seed(1, "a"));
    assert_ne!(split_seed(1, "a"), split_seed(1, "b"));
}
