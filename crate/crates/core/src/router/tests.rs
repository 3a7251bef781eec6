use proptest::prelude::*;

use super::*;
use crate::data::toy_graph;
use crate::numerics::gradcheck::{check_fn, check_store, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::numerics::{Adam, Optimizer};

fn random_emb(n: usize, d: usize, seed: u64) -> Embeddings {
    let mut rng = crate::numerics::Rng::new(seed);
    let mut row = || (0..d).map(|_| rng.normal() as f32).collect::<Vec<f32>>();
    Embeddings {
        d,
        text: (0..n).map(|_| row()).collect(),
        image: (0..n).map(|_| row()).collect(),
    }
}

fn zero_store(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
}

#[test]
fn input_layout() {
    let g = toy_graph(&[0; 5], 1, &[(0, 1), (1, 2), (3, 4)]);
    let emb = random_emb(5, 4, 0);
    let z = router_input(&g, &emb, &[0]);
    assert_eq!(z.len(), 17);
    for k in 0..4 {
        assert_eq!(z[k], emb.text[0][k] as f64);
        assert_eq!(z[4 + k], emb.image[0][k] as f64);
        let phi1 = (emb.text[1][k] as f64 + emb.image[1][k] as f64) / 2.0;
        let phi2 = (emb.text[2][k] as f64 + emb.image[2][k] as f64) / 2.0;
        assert!((z[8 + k] - phi1).abs() < 1e-12);
        assert!((z[12 + k] - phi2).abs() < 1e-12);
    }
    assert_eq!(z[16], 0.0);
    assert!((router_input(&g, &emb, &[1])[16] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn isolated_node_has_empty_context() {
    let g = toy_graph(&[0; 3], 1, &[(0, 1)]);
    let emb = random_emb(3, 2, 1);
    let z = router_input(&g, &emb, &[2]);
    assert!(z[4..].iter().all(|&x| x == 0.0));
}

#[test]
fn pair_input_pools_endpoints() {
    let g = toy_graph(&[0; 6], 1, &[(0, 2), (1, 2), (1, 3), (3, 4), (0, 5)]);
    let emb = random_emb(6, 2, 2);
    let z = router_input(&g, &emb, &[0, 1]);
    assert!((z[0] - (emb.text[0][0] as f64 + emb.text[1][0] as f64) / 2.0).abs() < 1e-7);
    assert!((z[8] - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_router_is_uniform() {
    let mut r = Router::new(2, RouterConfig::default(), 0);
    zero_store(&mut r.store);
    let d = r.distribution(&[0.3; 9]).unwrap();
    assert!(d.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(d.choice(), Modality::Txt);
}

#[test]
fn wrong_input_width_rejected() {
    let r = Router::new(2, RouterConfig::default(), 0);
    assert!(matches!(
        r.distribution(&[0.0; 8]),
        Err(MarioError::Contract(_))
    ));
}

#[test]
fn unit_width_router_matches_scalar_oracle() {
    let config = RouterConfig {
        hidden: vec![1, 1, 1],
        ..RouterConfig::default()
    };
    let mut r = Router::with_input_dim(1, config, 0);
    let vals: [(&str, &[f32]); 8] = [
        ("router.0.weight", &[0.7]),
        ("router.0.bias", &[-0.2]),
        ("router.1.weight", &[1.3]),
        ("router.1.bias", &[0.1]),
        ("router.2.weight", &[-0.8]),
        ("router.2.bias", &[0.4]),
        ("router.3.weight", &[1.0, -2.0, 0.5]),
        ("router.3.bias", &[0.0, 0.3, -0.1]),
    ];
    for (name, v) in vals {
        let id = r.store.find(name).unwrap();
        r.store.get_mut(id).data_mut().copy_from_slice(v);
    }
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    let x = 1.5f64;
    let h = gelu(0.7f32 as f64 * x + (-0.2f32) as f64);
    let h = gelu(1.3f32 as f64 * h + 0.1f32 as f64);
    let h = gelu((-0.8f32) as f64 * h + 0.4f32 as f64);
    let expected = [h, -2.0 * h + 0.3f32 as f64, 0.5 * h + (-0.1f32) as f64];
    let got = r.distribution(&[x]).unwrap();
    for k in 0..3 {
        assert!((got.logits[k] - expected[k]).abs() < 1e-12);
    }
}

#[test]
fn posterior_cases() {
    let q = posterior(&[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
    for (a, b) in q.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(posterior(&[1.5; 3])
        .unwrap()
        .iter()
        .all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    assert!(matches!(
        posterior(&[0.0, f64::NAN, 1.0]),
        Err(MarioError::Domain(_))
    ));
}

#[test]
fn route_inference_cases() {
    assert_eq!(route_inference(&[0.2, 0.5, 0.3]), Modality::Vis);
    assert_eq!(route_inference(&[1.0 / 3.0; 3]), Modality::Txt);
    assert_eq!(route_inference(&[0.1, 0.45, 0.45]), Modality::Vis);
}

#[test]
fn stage2_loss_cases() {
    let l = stage2_loss_value(&[([5.0, 800.0, 900.0], [0.2, 0.3, 0.5])], 0.0).unwrap();
    assert!((l - 5.0).abs() < 1e-12);

    let losses = [0.3, 1.1, 0.7];
    let q = posterior(&losses).unwrap();
    let l = stage2_loss_value(&[(losses, q)], 0.5).unwrap();
    let expected: f64 = q.iter().zip(&losses).map(|(a, b)| a * b).sum();
    assert!((l - expected).abs() < 1e-12);

    let e = [(-1f64).exp(), (-2f64).exp(), (-3f64).exp()];
    let z: f64 = e.iter().sum();
    let q = e.map(|x| x / z);
    let oracle = q[0] * 1.0
        + q[1] * 2.0
        + q[2] * 3.0
        + 0.01 * q.iter().map(|x| x * (3.0 * x).ln()).sum::<f64>();
    let l = stage2_loss_value(&[([1.0, 2.0, 3.0], [1.0 / 3.0; 3])], 0.01).unwrap();
    assert!((l - oracle).abs() < 1e-12, "{l} vs {oracle}");
}

fn tape_loss(batch: &[([f64; 3], [f64; 3])], lambda: f64) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let losses: Vec<[Var; 3]> = batch
        .iter()
        .map(|(l, _)| l.map(|x| tape.leaf(1, 1, vec![x], true).unwrap()))
        .collect();
    let logits: Vec<f64> = batch.iter().flat_map(|(_, p)| p.map(f64::ln)).collect();
    let s = tape.leaf(batch.len(), 3, logits, true).unwrap();
    let total = stage2_loss(&mut tape, &losses, s, lambda).unwrap();
    let value = tape.scalar(total);
    tape.backward(total).unwrap();
    let grads = losses
        .iter()
        .flatten()
        .map(|&v| tape.grad(v).unwrap()[0])
        .collect();
    (value, grads)
}

fn batch_strategy() -> impl Strategy<Value = Vec<([f64; 3], [f64; 3])>> {
    prop::collection::vec(
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(0.05f64..1.0),
        ),
        1..6,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .map(|(l, w)| {
                let s: f64 = w.iter().sum();
                (l, w.map(|x| x / s))
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn posterior_shift_invariant(l in prop::array::uniform3(-20.0f64..20.0), c in -50.0f64..50.0) {
        let a = posterior(&l).unwrap();
        let b = posterior(&l.map(|x| x + c)).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-6);
        }
        prop_assert_eq!(route_inference(&a), route_inference(&b));
    }

    #[test]
    fn routing_depends_only_on_logit_order(s in prop::array::uniform3(-10.0f64..10.0), c in -30.0f64..30.0) {
        let a = RoutingDistribution::from_logits(s).unwrap();
        let b = RoutingDistribution::from_logits(s.map(|x| x + c)).unwrap();
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for k in 0..3 {
            prop_assert!((a.probs[k] - b.probs[k]).abs() < 1e-6);
        }
        prop_assert_eq!(a.choice(), b.choice());
    }

    #[test]
    fn kl_term_decomposes(batch in batch_strategy(), lambda in 0.0f64..2.0) {
        let with = stage2_loss_value(&batch, lambda).unwrap();
        let without = stage2_loss_value(&batch, 0.0).unwrap();
        let mean_kl = batch
            .iter()
            .map(|(l, p)| kl_divergence(&posterior(l).unwrap(), p).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        prop_assert!((with - without - lambda * mean_kl).abs() < 1e-6);
    }

    #[test]
    fn tape_objective_matches_values(batch in batch_strategy(), lambda in 0.0f64..1.0) {
        let (v, grads) = tape_loss(&batch, lambda);
        prop_assert!((v - stage2_loss_value(&batch, lambda).unwrap()).abs() < 1e-9);
        for (b, (l, _)) in batch.iter().enumerate() {
            let q = posterior(l).unwrap();
            for k in 0..3 {
                prop_assert!((grads[3 * b + k] - q[k] / batch.len() as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn objective_gradient_in_logits_matches_finite_differences() {
    let mut rng = crate::numerics::Rng::new(4);
    let b = 4;
    let loss_vals: Vec<[f64; 3]> = (0..b)
        .map(|_| [rng.normal(), rng.normal(), rng.normal()])
        .collect();
    let logits: Vec<f64> = (0..3 * b).map(|_| rng.normal()).collect();
    let report = check_fn(&[(b, 3, logits)], DEFAULT_STEP, |tape, vars| {
        let losses: Vec<[Var; 3]> = loss_vals
            .iter()
            .map(|l| l.map(|x| tape.scalar_const(x)))
            .collect();
        stage2_loss(tape, &losses, vars[0], 0.7)
    })
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn router_gradients_match_finite_differences() {
    let config = RouterConfig {
        hidden: vec![8, 6, 5],
        lambda: 1.0,
    };
    let mut r = Router::new(2, config, 3);
    let mut rng = crate::numerics::Rng::new(5);
    let z: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..9).map(|_| rng.normal()).collect())
        .collect();
    let loss_vals: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.normal(), rng.normal(), rng.normal()])
        .collect();
    let report = check_store(
        &mut r,
        |r| &mut r.store,
        DEFAULT_STEP,
        None,
        |r, tape| {
            let b = r.store.bind(tape);
            let s = r.forward(tape, &b, &z)?;
            let losses: Vec<[Var; 3]> = loss_vals
                .iter()
                .map(|l| l.map(|x| tape.scalar_const(x)))
                .collect();
            Ok((stage2_loss(tape, &losses, s, 1.0)?, b))
        },
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn zero_lambda_gives_the_router_no_gradient() {
    let r = Router::new(2, RouterConfig::default(), 0);
    let mut tape = Tape::new();
    let b = r.store.bind(&mut tape);
    let s = r.forward(&mut tape, &b, &[vec![0.5; 9]]).unwrap();
    let l = [0.1, 0.9, 2.0].map(|x| tape.leaf(1, 1, vec![x], true).unwrap());
    let total = stage2_loss(&mut tape, &[l], s, 0.0).unwrap();
    tape.backward(total).unwrap();
    let g = b.gradients(&tape, &r.store);
    assert_eq!(g.global_norm(), 0.0);
}

#[test]
fn router_learns_a_fixed_teacher() {
    let d = 4;
    let mut rng = crate::numerics::Rng::new(11);
    let n = 32;
    let z: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4 * d + 1).map(|_| rng.normal()).collect())
        .collect();
    let losses: Vec<[f64; 3]> = z
        .iter()
        .map(|x| [x[0], 0.5 * x[1] - x[2], 1.0 - x[0]])
        .collect();
    let mut r = Router::new(d, RouterConfig::default(), 1);
    let mut opt = Adam::with_lr(1e-3);
    let mean_kl = |r: &Router| {
        losses
            .iter()
            .zip(&z)
            .map(|(l, x)| {
                kl_divergence(&posterior(l).unwrap(), &r.distribution(x).unwrap().probs).unwrap()
            })
            .sum::<f64>()
            / n as f64
    };
    let before = mean_kl(&r);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let b = r.store.bind(&mut tape);
        let s = r.forward(&mut tape, &b, &z).unwrap();
        let lv: Vec<[Var; 3]> = losses
            .iter()
            .map(|l| l.map(|x| tape.scalar_const(x)))
            .collect();
        let total = stage2_loss(&mut tape, &lv, s, 0.01).unwrap();
        tape.backward(total).unwrap();
        let g = b.gradients(&tape, &r.store);
        opt.step(&mut r.store, &g).unwrap();
    }
    let after = mean_kl(&r);
    assert!(after < 0.01, "mean KL {before} -> {after}");
}

#[test]
fn frozen_lm_only_router_moves() {
    use crate::lm::{SurrogateConfig, SurrogateLm};
    use crate::prompt::{Item, PromptSequence};
    let mut lm = SurrogateLm::new(
        SurrogateConfig {
            vocab_size: 16,
            d_lm: 8,
            layers: 1,
            heads: 2,
            context: 16,
        },
        0,
    )
    .unwrap();
    lm.store.freeze_all();
    let mut r = Router::new(2, RouterConfig::default(), 0);
    let lm_hash = lm.store.hash();
    let r_hash = r.store.hash();
    let prompts: Vec<PromptSequence> = Modality::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| PromptSequence {
            kind,
            items: vec![Item::Tok(1), Item::Tok(2 + k as u32)],
            target: vec![7],
            instruction_len: 1,
            raw_len: 0,
        })
        .collect();
    let mut tape = Tape::new();
    let bl = lm.store.bind(&mut tape);
    let br = r.store.bind(&mut tape);
    let ls: Vec<Var> = prompts
        .iter()
        .map(|p| lm.loss(&mut tape, &bl, p, None).unwrap())
        .collect();
    let s = r.forward(&mut tape, &br, &[vec![0.1; 9]]).unwrap();
    let total = stage2_loss(&mut tape, &[[ls[0], ls[1], ls[2]]], s, 0.01).unwrap();
    tape.backward(total).unwrap();
    let gl = bl.gradients(&tape, &lm.store);
    let gr = br.gradients(&tape, &r.store);
    Adam::with_lr(1e-2).step(&mut lm.store, &gl).unwrap();
    Adam::with_lr(1e-2).step(&mut r.store, &gr).unwrap();
    assert_eq!(lm.store.hash(), lm_hash);
    assert_ne!(r.store.hash(), r_hash);
}

#[test]
fn checkpoint_and_route_dump() {
    let dir = tempfile::tempdir().unwrap();
    let r = Router::new(3, RouterConfig::default(), 2);
    r.save(dir.path()).unwrap();
    let back = Router::load(dir.path()).unwrap();
    assert_eq!(back.store.hash(), r.store.hash());
    assert_eq!(back.input_dim(), 13);

    let dist = RoutingDistribution::from_logits([0.0, 1.0, 0.5]).unwrap();
    let path = dir.path().join("routes.jsonl");
    write_routes(&path, &[(4, dist.clone())]).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&path).unwrap().trim()).unwrap();
    assert_eq!(v["node"], 4);
    assert_eq!(v["choice"], "vis");
    assert_eq!(v["p"].as_array().unwrap().len(), 3);
}
