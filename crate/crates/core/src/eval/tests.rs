use super::*;
use crate::data::{gen_niah, Corpus};
use crate::model::{Attention, FastFraction, ModelSpec, Variant};

fn spec(attention: Attention, variant: Variant) -> ModelSpec {
    ModelSpec {
        n_blocks: 2,
        embed_dim: 8,
        n_heads: 2,
        vocab_size: 257,
        attention,
        ttt_variant: variant,
        fast_fraction: FastFraction::Half,
        dual_mlp: false,
        mlp_hidden_dim: 24,
        qk_norm: true,
        rope_theta: 10_000.0,
        mh_expansion: 2,
        norm_eps: 1e-6,
    }
}

fn seqs(n: usize, t: usize) -> Vec<PackedSequence> {
    Corpus::bundled().pack(t, t, 1).unwrap()[..n].to_vec()
}

fn cfg(eta: f64, b: usize) -> TttConfig {
    TttConfig {
        eta,
        batch_b: b,
        ..TttConfig::default()
    }
}

#[test]
fn nucleus_worked_example() {
    let kept = nucleus(&[0.5, 0.3, 0.2], 0.7);
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[0].0, 0);
    assert_eq!(kept[1].0, 1);
    assert!((kept[0].1 - 0.625).abs() < 1e-12 && (kept[1].1 - 0.375).abs() < 1e-12);
    // Ties go to the lower id.
    let tie = nucleus(&[0.25, 0.5, 0.25], 0.6);
    assert_eq!(tie.iter().map(|k| k.0).collect::<Vec<_>>(), vec![1, 0]);
}

#[test]
fn plain_sampling_keeps_the_full_distribution() {
    let cfg = SamplerConfig {
        temperature: 1.0,
        top_p: 1.0,
        repetition_penalty: 1.0,
    };
    let logits = [0.1, -1.0, 2.0, 0.5];
    let p = sampling_probs(&logits, &cfg, &[2, 2]).unwrap();
    let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
    for (pi, x) in p.iter().zip(logits) {
        assert!((pi - x.exp() / z).abs() < 1e-15);
    }
    assert_eq!(nucleus(&p, 1.0).len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = Tensor::from_vec(logits.to_vec());
    let mut counts = [0usize; 4];
    for _ in 0..20_000 {
        counts[sample_next(&t, &cfg, &[], &mut rng).unwrap() as usize] += 1;
    }
    for (c, pi) in counts.iter().zip(&p) {
        assert!((*c as f64 / 20_000.0 - pi).abs() < 0.015);
    }
}

#[test]
fn tiny_temperature_is_greedy() {
    let cfg = SamplerConfig {
        temperature: 1e-9,
        top_p: 0.95,
        repetition_penalty: 1.0,
    };
    let t = Tensor::from_vec(vec![0.3, 1.2, 1.1, -4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        assert_eq!(sample_next(&t, &cfg, &[], &mut rng).unwrap(), 1);
    }
    assert_eq!(greedy(&t), 1);
    assert_eq!(greedy(&Tensor::from_vec(vec![1.0, 3.0, 3.0])), 1);
}

#[test]
fn repetition_penalty_divides_or_multiplies() {
    let cfg = SamplerConfig {
        temperature: 1.0,
        top_p: 1.0,
        repetition_penalty: 2.0,
    };
    let p = sampling_probs(&[2.0, -1.0, 0.0], &cfg, &[0, 1]).unwrap();
    let want = [1.0f64.exp(), (-2.0f64).exp(), 1.0];
    let z: f64 = want.iter().sum();
    for (a, b) in p.iter().zip(want) {
        assert!((a - b / z).abs() < 1e-15);
    }
}

#[test]
fn sampler_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dead = Tensor::from_vec(vec![f64::NEG_INFINITY; 3]);
    assert!(sample_next(&dead, &SamplerConfig::default(), &[], &mut rng).is_err());
    let t = Tensor::from_vec(vec![0.0; 3]);
    for bad in [
        SamplerConfig {
            top_p: 0.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            repetition_penalty: 0.5,
            ..SamplerConfig::default()
        },
    ] {
        assert!(sample_next(&t, &bad, &[], &mut rng).is_err());
    }
}

#[test]
fn zero_eta_breakdown_equals_static() {
    let model = Model::new(&spec(Attention::Full, Variant::E2e)).unwrap();
    let p = model.init(2);
    let data = seqs(3, 24);
    let ttt = loss_breakdown(&model, &p, &cfg(0.0, 8), &data).unwrap();
    let stat_model = Model::new(&spec(Attention::Full, Variant::Off)).unwrap();
    let mut q = stat_model.init(0);
    for i in 0..q.len() {
        q.set(i, p.get(q.name(i)).unwrap().clone()).unwrap();
    }
    let stat = loss_breakdown(&stat_model, &q, &cfg(0.0, 8), &data).unwrap();
    assert_eq!(ttt.per_index_loss, stat.per_index_loss);
    let mean = ttt.per_index_loss.iter().sum::<f64>() / ttt.per_index_loss.len() as f64;
    assert!((ttt.aggregate - mean).abs() < 1e-12);
    assert_eq!(loss_delta(&ttt, &stat).unwrap(), 0.0);
}

#[test]
fn deltas_are_antisymmetric_and_checked() {
    let model = Model::new(&spec(Attention::Sliding(8), Variant::E2e)).unwrap();
    let p = model.init(3);
    let data = seqs(2, 16);
    let a = loss_breakdown(&model, &p, &cfg(0.5, 4), &data).unwrap();
    let b = loss_breakdown(&model, &p, &cfg(0.0, 4), &data).unwrap();
    assert_eq!(loss_delta(&a, &b).unwrap(), -loss_delta(&b, &a).unwrap());
    assert_eq!(loss_delta(&a, &a).unwrap(), 0.0);
    let other = loss_breakdown(&model, &p, &cfg(0.5, 4), &seqs(3, 16)[1..]).unwrap();
    assert!(loss_delta(&a, &other).is_err());
    let mut ragged = data.clone();
    ragged[1].tokens.pop();
    assert!(matches!(
        loss_breakdown(&model, &p, &cfg(0.5, 4), &ragged),
        Err(Error::Data(_))
    ));
}

#[test]
fn evaluation_never_sees_the_future() {
    let model = Model::new(&spec(Attention::Full, Variant::E2e)).unwrap();
    let p = model.init(4);
    let base = seqs(1, 20)[0].tokens.clone();
    let (want, _) = sequence_losses(&model, &p, &cfg(1.0, 4), &base).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in 1..base.len() {
        let mut other = base.clone();
        for t in other.iter_mut().skip(s) {
            *t = rng.gen_range(0..256);
        }
        let (got, _) = sequence_losses(&model, &p, &cfg(1.0, 4), &other).unwrap();
        // Loss i predicts token i + 1.
        for i in 0..s - 1 {
            assert_eq!(got[i], want[i], "replacing from {s} changed loss {i}");
        }
    }
}

#[test]
fn sequences_are_isolated_with_reset() {
    let model = Model::new(&spec(Attention::Full, Variant::E2e)).unwrap();
    let p = model.init(5);
    let data = seqs(2, 16);
    let swapped = vec![data[1].clone(), data[0].clone()];
    let c = cfg(0.5, 4);
    let a = loss_breakdown(&model, &p, &c, &data).unwrap();
    let b = loss_breakdown(&model, &p, &c, &swapped).unwrap();
    assert_eq!(a.per_index_loss, b.per_index_loss);
    let carry = TttConfig {
        reset_per_sequence: false,
        ..c
    };
    let d = loss_breakdown(&model, &p, &carry, &data).unwrap();
    assert_ne!(a.per_index_loss, d.per_index_loss);
}

#[test]
fn substring_oracle_is_perfect() {
    let insts: Vec<_> = NiahKind::ALL
        .iter()
        .flat_map(|&k| (0..100).map(move |s| gen_niah(k, 300 + s as usize, s).unwrap()))
        .collect();
    let acc = niah_score(&insts, substring_oracle).unwrap();
    assert_eq!(acc.len(), 3);
    assert!(acc.values().all(|&a| a == 1.0));
    let wrong = niah_score(&insts, |_| Ok(vec![48; 32])).unwrap();
    assert_eq!(wrong[&NiahKind::Uuid], 0.0);
}

#[test]
fn niah_decoding_runs_end_to_end() {
    let model = Model::new(&spec(Attention::Sliding(16), Variant::E2e)).unwrap();
    let p = model.init(6);
    let inst = gen_niah(NiahKind::Passkey, 120, 1).unwrap();
    let ans = niah_answer(&model, &p, &cfg(0.1, 8), &inst).unwrap();
    assert_eq!(ans.len(), 5);
}

#[test]
fn bench_grid_validation_and_scaling() {
    let model = Model::new(&spec(Attention::Full, Variant::Off)).unwrap();
    let p = model.init(0);
    let c = cfg(0.0, 16);
    assert!(bench(&model, &p, &c, &[], 1).is_err());
    assert!(bench(&model, &p, &c, &[64, 32], 1).is_err());
    let rows = bench(&model, &p, &c, &[32, 64, 128], 1).unwrap();
    for w in rows.windows(2) {
        let r = w[1].attention_flops as f64 / w[0].attention_flops as f64;
        // Causal pairs grow as T(T+1)/2.
        let t = w[0].t as f64;
        assert!(
            (r - 4.0 * (2.0 * t + 1.0) / (2.0 * t + 2.0)).abs() < 1e-12,
            "{r}"
        );
    }

    let swa = Model::new(&spec(Attention::Sliding(16), Variant::E2e)).unwrap();
    let q = swa.init(0);
    let rows = bench(&swa, &q, &c, &[128, 256, 512], 1).unwrap();
    let per: Vec<f64> = rows.iter().map(|r| r.flops_per_token).collect();
    let (lo, hi) = (
        per.iter().cloned().fold(f64::MAX, f64::min),
        per.iter().cloned().fold(0.0, f64::max),
    );
    assert!(hi / lo < 1.05, "{per:?}");
    assert!(rows[0].decode_flops_per_token > 0.0);
}

#[test]
fn slopes() {
    let xs = [1.0, 2.0, 4.0, 8.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.ln() + 1.0).collect();
    assert!((log_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!((m, s), (2.0, 1.0));
}
