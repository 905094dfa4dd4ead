use super::*;
use crate::autodiff::softmax_rows;
use crate::ebm::{train_ebm, EbmConfig, EnergyModel};
use crate::envsuite::{cartpole_train_family, generate_dataset, ScriptedExpert};
use crate::policy::ActMode;

fn fixture(n_traj: usize) -> Dataset {
    let specs = cartpole_train_family(3, false).unwrap();
    generate_dataset(&specs, &ScriptedExpert::default(), n_traj, 11).unwrap()
}

fn quick_ebm(ds: &Dataset) -> EnergyModel {
    let obs = ds.transitions().unwrap().obs;
    let cfg = EbmConfig { iterations: 5, langevin_steps: 5, ..EbmConfig::default() };
    train_ebm(&obs, &cfg, &mut rng::stream(0, "ebm", &[])).unwrap().0
}

fn small_config(iterations: usize) -> IcilConfig {
    IcilConfig { iterations, batch: 32, ..IcilConfig::default() }
}

struct Probe {
    model: IcilModel,
    batch: crate::envsuite::Batch,
    noise: Array,
    perm: Vec<usize>,
}

fn probe(ds: &Dataset, ebm: &EnergyModel) -> Probe {
    let cfg = small_config(0);
    let (model, _) = train_icil(ds, Some(ebm), &cfg, 5).unwrap();
    let data = ds.transitions().unwrap().normalized(&model.normalizer).unwrap();
    let mut r = rng::stream(1, "probe", &[]);
    let batch = data.sample_stratified(16, &mut r).unwrap();
    let noise = gumbel_noise(batch.len(), 2, &mut r);
    let perm = crate::mine::permutation(batch.len(), &mut r);
    Probe { model, batch, noise, perm }
}

fn loss_value(p: &Probe, ebm: Option<&EnergyModel>, name: LossName) -> f64 {
    let mut g = Graph::new();
    let mut b = Binder::new();
    let lg = build_losses(&p.model, &mut g, &mut b, &p.batch, &p.noise, &p.perm, ebm).unwrap();
    g.forward(lg.get(name).unwrap()).unwrap().item()
}

fn zero_network(model: &mut IcilModel, net: &Mlp) {
    for name in net.param_names() {
        model.store.get_mut(&name).unwrap().value.fill(0.0);
    }
}

#[test]
fn gradient_routing_matches_update_rules() {
    let ds = fixture(2);
    let ebm = quick_ebm(&ds);
    let p = probe(&ds, &ebm);
    let audit = routing_audit(&p.model, &p.batch, &p.noise, &p.perm, Some(&ebm)).unwrap();
    assert_eq!(audit.len(), LossName::ALL.len() * p.model.store.len());
    for e in &audit {
        if expected_routing(e.loss, &e.param) {
            // Biases of a final layer can legitimately be flat for some losses;
            // weights feeding a routed loss must move.
            if e.param.contains(".w") {
                assert!(e.max_abs_grad > 0.0, "{:?} should reach {}", e.loss, e.param);
            }
        } else {
            assert_eq!(e.max_abs_grad, 0.0, "{:?} leaked into {}", e.loss, e.param);
        }
    }
}

#[test]
fn invariance_and_classifier_losses_at_uniform_classifier() {
    let ds = fixture(2);
    let ebm = quick_ebm(&ds);
    let mut p = probe(&ds, &ebm);
    let cls = p.model.classifier();
    zero_network(&mut p.model, &cls);
    let ln2 = std::f64::consts::LN_2;
    assert!((loss_value(&p, None, LossName::Inv) + ln2).abs() < 1e-12);
    assert!((loss_value(&p, None, LossName::Classifier) - ln2).abs() < 1e-12);
}

#[test]
fn zero_decoder_reconstruction_error_is_next_observation_norm() {
    let ds = fixture(2);
    let ebm = quick_ebm(&ds);
    let mut p = probe(&ds, &ebm);
    let psi = p.model.psi();
    zero_network(&mut p.model, &psi);
    let expected = p.batch.next_obs.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / p.batch.len() as f64;
    assert!((loss_value(&p, None, LossName::Dyn) - expected).abs() < 1e-9);
}

#[test]
fn zero_energy_model_gives_zero_energy_loss_and_gradient() {
    let ds = fixture(2);
    let mut ebm = quick_ebm(&ds);
    let net = ebm.net.clone();
    for name in net.param_names() {
        ebm.store.get_mut(&name).unwrap().value.fill(0.0);
    }
    let p = probe(&ds, &ebm);
    assert_eq!(loss_value(&p, Some(&ebm), LossName::Energy), 0.0);
    let audit = routing_audit(&p.model, &p.batch, &p.noise, &p.perm, Some(&ebm)).unwrap();
    assert!(audit.iter().filter(|e| e.loss == LossName::Energy).all(|e| e.max_abs_grad == 0.0));
}

#[test]
fn energy_gradient_matches_finite_differences_at_fixed_noise() {
    let ds = fixture(2);
    let ebm = quick_ebm(&ds);
    let p = probe(&ds, &ebm);
    let mut g = Graph::new();
    let mut b = Binder::new();
    let lg = build_losses(&p.model, &mut g, &mut b, &p.batch, &p.noise, &p.perm, Some(&ebm)).unwrap();
    let root = lg.energy.unwrap();
    g.forward(root).unwrap();
    let grads = g.backward(root).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for name in p.model.pi().param_names() {
        let analytic = grads.get(b.trainable_var(&name).unwrap()).unwrap().clone();
        for i in 0..analytic.len() {
            let mut q = Probe { model: p.model.clone(), batch: p.batch.clone(), noise: p.noise.clone(), perm: p.perm.clone() };
            q.model.store.get_mut(&name).unwrap().value.data_mut()[i] += h;
            let up = loss_value(&q, Some(&ebm), LossName::Energy);
            q.model.store.get_mut(&name).unwrap().value.data_mut()[i] -= 2.0 * h;
            let down = loss_value(&q, Some(&ebm), LossName::Energy);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn gumbel_softmax_is_a_distribution_and_sharpens() {
    let mut r = rng::stream(2, "g", &[]);
    let logits = Array::matrix(3, 3, vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0, 5.0, -5.0, 1.0]).unwrap();
    let y = gumbel_action(&logits, 1.0, &mut r).unwrap();
    for row in y.iter_rows() {
        assert!(row.iter().all(|&v| v > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let noise = gumbel_noise(3, 3, &mut r);
    let mut g = Graph::new();
    let l = g.constant(logits.clone()).unwrap();
    let cold = gumbel_softmax(&mut g, l, &noise, 1e-4).unwrap();
    let cold = g.forward(cold).unwrap().clone();
    let perturbed = logits.zip_map(&noise, |a, b| a + b).argmax_rows();
    for (row, k) in cold.iter_rows().zip(perturbed) {
        assert!((row[k] - 1.0).abs() < 1e-9);
    }
    assert!(gumbel_action(&logits, 0.0, &mut r).is_err());
}

#[test]
fn gumbel_argmax_frequencies_follow_softmax() {
    let mut r = rng::stream(3, "g", &[]);
    let logits = [0.5, -0.3, 1.2];
    let p = softmax_rows(&Array::row(&logits));
    let n = 100_000;
    let mut counts = [0usize; 3];
    let noise = gumbel_noise(n, 3, &mut r);
    for row in noise.iter_rows() {
        let z: Vec<f64> = row.iter().zip(logits).map(|(g, l)| g + l).collect();
        counts[Array::row(&z).argmax_rows()[0]] += 1;
    }
    for (c, q) in counts.iter().zip(p.data()) {
        assert!((*c as f64 / n as f64 - q).abs() < 0.01);
    }
}

#[test]
fn single_environment_is_rejected() {
    let specs = cartpole_train_family(3, false).unwrap();
    let ds = generate_dataset(&specs[..1], &ScriptedExpert::default(), 1, 0).unwrap();
    let cfg = IcilConfig { losses: LossMask::only_policy(), ..small_config(1) };
    assert!(train_icil(&ds, None, &cfg, 0).is_err());
}

#[test]
fn energy_loss_requires_a_frozen_model() {
    let ds = fixture(1);
    assert!(train_icil(&ds, None, &small_config(1), 0).is_err());
    let mut r = rng::stream(0, "e", &[]);
    let obs = ds.transitions().unwrap().obs;
    let unfrozen = EnergyModel::new(Normalizer::fit(&obs), EbmConfig::default(), &mut r).unwrap();
    assert!(train_icil(&ds, Some(&unfrozen), &small_config(1), 0).is_err());
}

#[test]
fn training_is_deterministic_and_leaves_energy_model_untouched() {
    let ds = fixture(2);
    let ebm = quick_ebm(&ds);
    let before = ebm.store.snapshot();
    let (m1, h1) = train_icil(&ds, Some(&ebm), &small_config(20), 9).unwrap();
    let (m2, h2) = train_icil(&ds, Some(&ebm), &small_config(20), 9).unwrap();
    assert!(ebm.store.values_bit_equal(&before));
    assert!(m1.store.values_bit_equal(&m2.store));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_history_csv(&h1, &mut a).unwrap();
    write_history_csv(&h2, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 21);
    assert!(h1.iter().all(|r| r.l_pi >= 0.0 && r.l_dyn >= 0.0));
}

/// With every auxiliary loss removed, training is plain behaviour cloning of
/// `π∘φ` from the same initial weights and minibatches.
#[test]
fn policy_only_ablation_is_behaviour_cloning() {
    let ds = fixture(2);
    let cfg = IcilConfig { losses: LossMask::only_policy(), ..small_config(15) };
    let seed = 4;
    let (model, _) = train_icil(&ds, None, &cfg, seed).unwrap();

    let data = ds.transitions().unwrap().normalized(&model.normalizer).unwrap();
    let phi = model.phi();
    let pi = model.pi();
    let mut store = crate::autodiff::ParameterStore::new();
    phi.init(&mut store, &mut init_stream(seed, "phi")).unwrap();
    pi.init(&mut store, &mut init_stream(seed, "pi")).unwrap();
    let mut batch_rng = rng::stream(seed, "batch", &[]);
    for _ in 0..cfg.iterations {
        let batch = data.sample_stratified(cfg.batch, &mut batch_rng).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new();
        let x = g.constant(batch.obs.clone()).unwrap();
        let s = phi.forward(&mut g, &store, &mut b, x, true).unwrap();
        let logits = pi.forward(&mut g, &store, &mut b, s, true).unwrap();
        let ce = g.cross_entropy(logits, &batch.actions).unwrap();
        let loss = g.mean(ce);
        g.forward(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads, &b);
        store.adam_step(cfg.learning_rate).unwrap();
    }
    for name in phi.param_names().into_iter().chain(pi.param_names()) {
        let (a, b) = (store.value(&name).unwrap(), model.store.value(&name).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} differs");
    }
}

#[test]
fn checkpoint_round_trip_and_greedy_tie_break() {
    let ds = fixture(1);
    let cfg = IcilConfig { losses: LossMask::only_policy(), ..small_config(3) };
    let (mut model, _) = train_icil(&ds, None, &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("icil.ckpt");
    model.save(&path).unwrap();
    let back = IcilModel::load(&path).unwrap();
    assert!(back.store.values_bit_equal(&model.store));
    assert_eq!(back.dims, model.dims);

    let pi = model.pi();
    zero_network(&mut model, &pi);
    let obs = Array::zeros(2, model.dims.obs);
    let mut r = rng::stream(0, "act", &[]);
    assert_eq!(model.act_batch(&obs, ActMode::Greedy, &mut r).unwrap(), vec![0, 0]);
    assert!(model.act_batch(&Array::zeros(1, 3), ActMode::Greedy, &mut r).is_err());
}
