use moe_peft::adapters::{PeftPlan, DEFAULT_LORA_SITES, IA3_SITES};
use moe_peft::backbone::{Backbone, BackboneConfig, SeqBatch};
use moe_peft::model::{AdapterSet, AdapterSpec, Model};
use moe_peft::moe::{
    self, load_balance, merge_vectors, mov_forward, molora_forward, top1, topk_route, Mixing, RoutingConfig, Strategy,
};
use moe_peft::site::{RouterKey, SiteKey};
use moe_peft::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> BackboneConfig {
    BackboneConfig::default()
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(2) + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn flat(p: &[Vec<f64>]) -> Vec<f64> {
    p.iter().flatten().copied().collect()
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ia3_merge_equals_weighted_outputs_at_every_site() {
    let cfg = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = 100;
    for n in [1, 2, 5, 10] {
        for site in IA3_SITES {
            let w = cfg.rescale_width(site).unwrap();
            let bank = Tensor::<f32>::randn(&[n, w], 1.0, &mut rng);
            let x = Tensor::<f32>::randn(&[tokens, w], 1.0, &mut rng);
            let probs = random_probs(&mut rng, tokens, n);

            let mut tape = Tape::new();
            let (xv, bv) = (tape.constant(x.clone()), tape.constant(bank.clone()));
            let gv = tape.constant(Tensor::from_f64(&[tokens, n], &flat(&probs)).unwrap());
            let merged = mov_forward(&mut tape, xv, bv, gv, true).unwrap();

            let mut oracle = vec![0.0; tokens * w];
            for t in 0..tokens {
                for (i, p) in probs[t].iter().enumerate() {
                    for j in 0..w {
                        oracle[t * w + j] += p * (x.data()[t * w + j] as f64 * bank.data()[i * w + j] as f64);
                    }
                }
            }
            let dev = max_abs(tape.value(merged).data(), &oracle);
            assert!(dev < 1e-5, "n={n} {site:?}: {dev}");
        }
    }
}

#[test]
fn lora_merge_equals_weighted_outputs_at_every_site() {
    let cfg = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (tokens, r) = (100, 4);
    for n in [1, 2, 5, 10] {
        for site in DEFAULT_LORA_SITES {
            let (din, dout) = cfg.linear_dims(site).unwrap();
            let w0 = Tensor::<f32>::randn(&[din, dout], 1.0 / (din as f64).sqrt(), &mut rng);
            let a = Tensor::<f32>::randn(&[din, n * r], 1.0 / (din as f64).sqrt(), &mut rng);
            let b = Tensor::<f32>::randn(&[n * r, dout], 0.5, &mut rng);
            let x = Tensor::<f32>::randn(&[tokens, din], 1.0, &mut rng);
            let probs = random_probs(&mut rng, tokens, n);

            let mut tape = Tape::new();
            let vars: Vec<_> = [&x, &w0, &a, &b].iter().map(|t| tape.constant((*t).clone())).collect();
            let gv = tape.constant(Tensor::from_f64(&[tokens, n], &flat(&probs)).unwrap());
            let out = molora_forward(&mut tape, vars[0], vars[1], vars[2], vars[3], gv, r, 1.0).unwrap();

            // Σᵢ pᵢ·(x·W₀ + x·Aᵢ·Bᵢ), each expert applied on its own
            let f = |t: &Tensor<f32>, i: usize, j: usize, cols: usize| t.data()[i * cols + j] as f64;
            let mut oracle = vec![0.0; tokens * dout];
            for t in 0..tokens {
                for (e, p) in probs[t].iter().enumerate() {
                    let u: Vec<f64> = (0..r)
                        .map(|k| (0..din).map(|q| f(&x, t, q, din) * f(&a, q, e * r + k, n * r)).sum())
                        .collect();
                    for o in 0..dout {
                        let base: f64 = (0..din).map(|q| f(&x, t, q, din) * f(&w0, q, o, dout)).sum();
                        let delta: f64 = (0..r).map(|k| u[k] * f(&b, e * r + k, o, dout)).sum();
                        oracle[t * dout + o] += p * (base + delta);
                    }
                }
            }
            let dev = max_abs(tape.value(out).data(), &oracle);
            assert!(dev < 1e-5, "n={n} {site:?}: {dev}");
        }
    }
}

#[test]
fn pure_soft_merge_checks_its_weights() {
    let experts = vec![Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap()];
    let m: Tensor<f64> = moe::soft_merge(&[0.25, 0.75], &experts).unwrap();
    assert_eq!(m.data(), &[2.5, -1.0]);
    assert!(matches!(moe::soft_merge(&[0.5, 0.6], &experts), Err(Error::Contract(_))));
    assert!(moe::soft_merge(&[1.0], &experts).is_err());
}

#[test]
fn topk_with_k_equal_n_matches_soft_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 2] {
        let probs = Tensor::<f64>::from_f64(&[50, n], &flat(&random_probs(&mut rng, 50, n))).unwrap();
        let gates = topk_route(&probs, n, true).unwrap();
        assert!(probs.max_abs_diff(&gates).unwrap() < 1e-6);
    }
    // Top2 with n = 2 through the merge path equals the soft merge
    let probs = Tensor::<f32>::from_f64(&[40, 2], &flat(&random_probs(&mut rng, 40, 2))).unwrap();
    let bank = Tensor::<f32>::randn(&[2, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (p, b) = (tape.constant(probs), tape.constant(bank));
    let cfg = RoutingConfig {
        strategy: Strategy::Top2,
        ..RoutingConfig::default()
    };
    let g = moe::gates(&mut tape, p, &cfg).unwrap();
    let hard = merge_vectors(&mut tape, g, b, true).unwrap();
    let soft = merge_vectors(&mut tape, p, b, true).unwrap();
    assert!(tape.value(hard).max_abs_diff(tape.value(soft)).unwrap() < 1e-6);
}

#[test]
fn top1_selects_the_argmax_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2, 3, 5, 8] {
        let probs = Tensor::<f64>::from_f64(&[30, n], &flat(&random_probs(&mut rng, 30, n))).unwrap();
        let gates = topk_route(&probs, 1, true).unwrap();
        for (t, &winner) in top1(&probs).iter().enumerate() {
            let row = probs.row(t);
            let best = (0..n).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(winner, best);
            for i in 0..n {
                assert_eq!(gates.row(t)[i], if i == best { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn unrenormalized_topk_keeps_raw_probabilities() {
    let probs = Tensor::<f64>::from_f64(&[1, 4], &[0.1, 0.4, 0.2, 0.3]).unwrap();
    let g = topk_route(&probs, 2, false).unwrap();
    assert_eq!(g.data(), &[0.0, 0.4, 0.0, 0.3]);
    let g = topk_route(&probs, 2, true).unwrap();
    assert!((g.data()[1] - 4.0 / 7.0).abs() < 1e-12 && (g.data()[3] - 3.0 / 7.0).abs() < 1e-12);
}

/// `n·Σᵢ fᵢ·Pᵢ` computed directly from its definition.
fn lb_oracle(probs: &[Vec<f64>], assign: &[usize], n: usize) -> f64 {
    let t = assign.len() as f64;
    (0..n)
        .map(|i| {
            let f = assign.iter().filter(|&&a| a == i).count() as f64 / t;
            let p = probs.iter().map(|r| r[i]).sum::<f64>() / t;
            f * p
        })
        .sum::<f64>()
        * n as f64
}

#[test]
fn load_balance_over_every_assignment() {
    for n in 1..=3usize {
        for tokens in 1..=6usize {
            let uniform = vec![vec![1.0 / n as f64; n]; tokens];
            let tensor = Tensor::<f64>::from_f64(&[tokens, n], &flat(&uniform)).unwrap();
            let total = n.pow(tokens as u32);
            for code in 0..total {
                let assign: Vec<usize> = (0..tokens).map(|k| code / n.pow(k as u32) % n).collect();
                let got = load_balance(&tensor, &assign).unwrap();
                assert!((got - lb_oracle(&uniform, &assign, n)).abs() < 1e-12);
                // uniform probabilities give 1 no matter how tokens are dispatched
                assert!((got - 1.0).abs() < 1e-6, "n={n} tokens={tokens} {assign:?}: {got}");
            }
            for e in 0..n {
                let onehot: Vec<Vec<f64>> = (0..tokens).map(|_| (0..n).map(|i| (i == e) as u8 as f64).collect()).collect();
                let t = Tensor::<f64>::from_f64(&[tokens, n], &flat(&onehot)).unwrap();
                let got = load_balance(&t, &vec![e; tokens]).unwrap();
                assert!((got - n as f64).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn taped_load_balance_matches_the_pure_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probs = random_probs(&mut rng, 12, 4);
    let t = Tensor::<f64>::from_f64(&[12, 4], &flat(&probs)).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(t.clone());
    let l = moe::load_balance_loss(&mut tape, p).unwrap();
    let pure = load_balance(&t, &top1(&t)).unwrap();
    assert!((tape.value(l).item() - pure).abs() < 1e-12);
    assert!((pure - lb_oracle(&probs, &top1(&t), 4)).abs() < 1e-12);
}

#[test]
fn lora_delta_rank_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for r in [1, 2, 4] {
        let a = nalgebra::DMatrix::<f64>::from_fn(32, r, |_, _| rng.random_range(-1.0..1.0));
        let b = nalgebra::DMatrix::<f64>::from_fn(r, 48, |_, _| rng.random_range(-1.0..1.0));
        let pair = moe_peft::adapters::LoraPair {
            a: Tensor::from_f64(&[32, r], a.transpose().as_slice()).unwrap(),
            b: Tensor::from_f64(&[r, 48], b.transpose().as_slice()).unwrap(),
        };
        let delta: Tensor<f64> = pair.delta().unwrap();
        let m = nalgebra::DMatrix::from_row_slice(32, 48, delta.data());
        let sv = m.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        assert!(sv[r - 1] > 1e-3);
        assert!(sv[r..].iter().all(|&s| s < 1e-5), "rank {r}: {:?}", &sv[r..r + 2]);
    }
}

#[test]
fn full_rank_lora_adds_a_known_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (din, dout) = (6, 4);
    let r = din.min(dout);
    // B·A factorisation of a dense M: A = [I; 0] picks the first r rows
    let m = Tensor::<f64>::randn(&[r, dout], 1.0, &mut rng);
    let mut a = vec![0.0; din * r];
    for i in 0..r {
        a[i * r + i] = 1.0;
    }
    let mut dense = vec![0.0; din * dout];
    dense[..r * dout].copy_from_slice(m.data());
    let w0 = Tensor::<f64>::randn(&[din, dout], 1.0, &mut rng);
    let x = Tensor::<f64>::randn(&[5, din], 1.0, &mut rng);

    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w0.clone()));
    let (av, bv) = (tape.constant(Tensor::new(&[din, r], a).unwrap()), tape.constant(m));
    let out = moe_peft::adapters::apply_lora(&mut tape, xv, wv, av, bv, 1.0).unwrap();
    let sum: Vec<f64> = w0.data().iter().zip(&dense).map(|(w, d)| w + d).collect();
    let oracle = x.matmul(&Tensor::new(&[din, dout], sum).unwrap()).unwrap();
    assert!(tape.value(out).max_abs_diff(&oracle).unwrap() < 1e-5);

    let too_big = tape.constant(Tensor::<f64>::zeros(&[din, 5]));
    let bb = tape.constant(Tensor::<f64>::zeros(&[5, dout]));
    assert!(matches!(
        moe_peft::adapters::apply_lora(&mut tape, xv, wv, too_big, bb, 1.0),
        Err(Error::Config(_))
    ));
}

fn probe_batch(rng: &mut ChaCha8Rng, rows: usize) -> SeqBatch {
    let inputs: Vec<Vec<usize>> = (0..rows).map(|_| (0..rng.random_range(2..10)).map(|_| rng.random_range(1..64)).collect()).collect();
    let targets: Vec<Vec<usize>> = (0..rows).map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(1..64)).collect()).collect();
    SeqBatch::new(&inputs, &targets).unwrap()
}

fn randomized(spec: AdapterSpec, cfg: &BackboneConfig, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::init(spec, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in set.params_mut().iter_mut() {
        if name.starts_with("ia3.") {
            *t = Tensor::uniform(t.shape(), 0.5, 1.5, &mut rng);
        } else if name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    }
    set
}

#[test]
fn fold_matches_constant_routing_for_both_kinds() {
    let cfg = toy();
    let bb = Backbone::build(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = probe_batch(&mut rng, 16);
    for plan in [PeftPlan::ia3(&cfg), PeftPlan::lora(&cfg, 4, &DEFAULT_LORA_SITES)] {
        for n in [1, 2, 3] {
            let spec = AdapterSpec {
                plan: plan.clone(),
                n_experts: n,
                routing: RoutingConfig::default(),
            };
            let set = randomized(spec, &cfg, n as u64);
            let mixing = if n == 1 { Mixing::Shared(vec![1.0]) } else { Mixing::Shared(flat(&random_probs(&mut rng, 1, n))) };
            let folded = set.fold_static(&bb, &mixing).unwrap();
            let live = Model::new(bb.clone(), Some(set.clone())).logits(&batch, None, &mixing).unwrap();
            let plain = Model::new(folded.clone(), None).logits(&batch, None, &Mixing::Live).unwrap();
            let dev = live.max_abs_diff(&plain).unwrap();
            assert!(dev < 1e-5, "{:?} n={n}: {dev}", plan.kind);

            let back = set.unfold_static(&folded, &mixing).unwrap();
            for (name, w) in bb.weights() {
                let d = w.max_abs_diff(back.weight(name).unwrap()).unwrap();
                assert!(d < 1e-6, "{name}: {d}");
            }
        }
    }
}

#[test]
fn two_lora_experts_fold_to_the_averaged_delta() {
    let cfg = toy();
    let bb = Backbone::build(cfg.clone()).unwrap();
    let spec = AdapterSpec {
        plan: PeftPlan::lora(&cfg, 2, &DEFAULT_LORA_SITES),
        n_experts: 2,
        routing: RoutingConfig::default(),
    };
    let set = randomized(spec, &cfg, 9);
    let folded = set.fold_static(&bb, &Mixing::uniform(2)).unwrap();
    for &site in &set.spec().plan.sites {
        let e0 = set.lora_expert(site, 0).unwrap().delta().unwrap();
        let e1 = set.lora_expert(site, 1).unwrap().delta().unwrap();
        let name = moe_peft::backbone::weight_name(site);
        let w0 = bb.weight(&name).unwrap();
        let expected: Vec<f64> = (0..w0.numel())
            .map(|i| w0.data()[i] as f64 + 0.5 * (e0.data()[i] as f64 + e1.data()[i] as f64))
            .collect();
        let got: Vec<f32> = folded.weight(&name).unwrap().data().to_vec();
        assert!(max_abs(&got, &expected) < 1e-5, "{site}");
    }
}

#[test]
fn folding_under_live_routing_is_refused() {
    let cfg = toy();
    let bb = Backbone::build(cfg.clone()).unwrap();
    let spec = AdapterSpec {
        plan: PeftPlan::ia3(&cfg),
        n_experts: 2,
        routing: RoutingConfig::default(),
    };
    let set = AdapterSet::init(spec, &cfg, 0).unwrap();
    assert!(matches!(set.fold_static(&bb, &Mixing::Live), Err(Error::Contract(_))));
    assert!(matches!(set.fold_static(&bb, &Mixing::Shared(vec![0.7, 0.7])), Err(Error::Contract(_))));
}

#[test]
fn per_router_mixing_needs_every_router() {
    let cfg = toy();
    let spec = AdapterSpec {
        plan: PeftPlan::ia3(&cfg),
        n_experts: 2,
        routing: RoutingConfig::default(),
    };
    let set = AdapterSet::init(spec.clone(), &cfg, 0).unwrap();
    let bb = Backbone::build(cfg).unwrap();
    let mut weights: std::collections::BTreeMap<RouterKey, Vec<f64>> =
        spec.routers().into_iter().map(|k| (k, vec![0.5, 0.5])).collect();
    assert!(set.fold_static(&bb, &Mixing::PerRouter(weights.clone())).is_ok());
    let first = *weights.keys().next().unwrap();
    weights.remove(&first);
    assert!(matches!(set.fold_static(&bb, &Mixing::PerRouter(weights)), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn router_probabilities_are_distributions(
        seed in 0u64..1000,
        n in 1usize..8,
        tokens in 1usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(&[tokens, 16], 3.0, &mut rng));
        let w = tape.constant(Tensor::randn(&[16, n], 3.0, &mut rng));
        let p = moe::route_probs(&mut tape, w, x).unwrap();
        for t in 0..tokens {
            let row = tape.value(p).row(t);
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn merge_is_linear_in_the_mixture(seed in 0u64..1000, n in 2usize..6) {
        // merging at p·a + (1-p)·b equals the same blend of the two merges
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::randn(&[7], 1.0, &mut rng)).collect();
        let a = flat(&random_probs(&mut rng, 1, n));
        let b = flat(&random_probs(&mut rng, 1, n));
        let lam = rng.random_range(0.0..1.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
        let ma = moe::soft_merge(&a, &experts).unwrap();
        let mb = moe::soft_merge(&b, &experts).unwrap();
        let mm = moe::soft_merge(&mix, &experts).unwrap();
        for i in 0..7 {
            let blend = lam * ma.data()[i] + (1.0 - lam) * mb.data()[i];
            prop_assert!((mm.data()[i] - blend).abs() < 1e-12);
        }
    }
}

#[test]
fn site_keys_parse_back() {
    let k: SiteKey = "dec.1.cross.k".parse().unwrap();
    assert_eq!(k.to_string(), "dec.1.cross.k");
}
