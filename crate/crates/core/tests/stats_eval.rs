use moe_peft::adapters::PeftPlan;
use moe_peft::backbone::{Backbone, BackboneConfig};
use moe_peft::eval::{evaluate, median};
use moe_peft::model::{AdapterSet, AdapterSpec, Model};
use moe_peft::moe::RoutingConfig;
use moe_peft::stats::{default_probe, routing_stats};
use moe_peft::taskgen::{make_task_suite, sample_batch, sample_task_batch, Split};
use moe_peft::{Error, Tensor};

fn model(n: usize) -> Model {
    let cfg = BackboneConfig::default();
    let spec = AdapterSpec {
        plan: PeftPlan::ia3(&cfg),
        n_experts: n,
        routing: RoutingConfig::default(),
    };
    Model::new(Backbone::build(cfg.clone()).unwrap(), Some(AdapterSet::init(spec, &cfg, 4).unwrap()))
}

#[test]
fn zero_routers_give_uniform_tables() {
    let mut m = model(4);
    for (k, t) in m.adapters.as_mut().unwrap().params_mut().iter_mut() {
        if k.starts_with("router.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let suite = make_task_suite(0);
    let batches = vec![sample_batch(&suite, Split::Train, 32, 1, None).unwrap()];
    let s = routing_stats(&m, &suite, &batches, None).unwrap();
    assert_eq!(s.router, "dec.1.ffn");
    for t in &s.tasks {
        assert!(t.mean.iter().all(|&p| (p - 0.25).abs() < 1e-6));
        assert!((t.entropy - 4f64.ln()).abs() < 1e-6);
    }
    assert!(s.jsd.iter().flatten().all(|&d| d.abs() < 1e-9));
}

#[test]
fn tables_are_distributions_and_jsd_is_symmetric() {
    let m = model(3);
    let suite = make_task_suite(0);
    let batches: Vec<_> = (0..suite.tasks.len()).map(|t| sample_task_batch(&suite, t, 16, t as u64, None).unwrap()).collect();
    let s = routing_stats(&m, &suite, &batches, Some("enc.0.ffn")).unwrap();
    assert_eq!(s.tasks.len(), suite.tasks.len());
    for t in &s.tasks {
        assert!((t.mean.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
    for i in 0..s.jsd.len() {
        assert_eq!(s.jsd[i][i], 0.0);
        for j in 0..s.jsd.len() {
            assert!((s.jsd[i][j] - s.jsd[j][i]).abs() < 1e-15);
        }
    }
}

#[test]
fn bad_probes_and_empty_input_are_rejected() {
    let m = model(2);
    let suite = make_task_suite(0);
    let b = vec![sample_batch(&suite, Split::Train, 4, 1, None).unwrap()];
    assert!(matches!(routing_stats(&m, &suite, &[], None), Err(Error::Input(_))));
    assert!(matches!(routing_stats(&m, &suite, &b, Some("enc.9.ffn")), Err(Error::Input(_))));
    assert!(matches!(default_probe(&model(1)), Err(Error::Contract(_))));
}

#[test]
fn medians() {
    assert_eq!(median(&[0.2, 0.9, 0.4]), 0.4);
    assert_eq!(median(&[0.2, 0.9, 0.4, 0.6]), 0.5);
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let m = model(2);
    let suite = make_task_suite(0);
    let a = evaluate(&m, &suite, Split::Eval, 10, 3).unwrap();
    assert_eq!(a, evaluate(&m, &suite, Split::Eval, 10, 3).unwrap());
    assert_eq!(a.tasks.len(), suite.task_ids(Split::Eval).len());
    for t in &a.tasks {
        assert!(t.per_template.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(t.median, median(&t.per_template));
    }
    let mean = a.tasks.iter().map(|t| t.median).sum::<f64>() / a.tasks.len() as f64;
    assert!((a.average - mean).abs() < 1e-12);
    assert!(matches!(evaluate(&m, &suite, Split::Eval, 0, 3), Err(Error::Config(_))));
}
