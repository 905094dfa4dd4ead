use criterion::{criterion_group, criterion_main, Criterion};
use icil_core::autodiff::{Activation, Array, Binder, Graph, Mlp, ParameterStore};
use icil_core::ebm::{langevin_chain, train_ebm, EbmConfig};
use icil_core::envsuite::cartpole::CartPole;
use icil_core::envsuite::{cartpole_train_family, generate_dataset, ScriptedExpert};
use icil_core::icil::{train_icil, IcilConfig};
use icil_core::rng;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Array {
    let mut r = rng::stream(seed, "bench", &[]);
    Array::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mlp_forward_backward(c: &mut Criterion) {
    let net = Mlp::standard("net", 10, 2, Activation::Elu);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng::stream(0, "bench.init", &[])).unwrap();
    let x = random(64, 10, 1);
    c.bench_function("mlp 64x10 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let xv = g.constant(x.clone()).unwrap();
            let out = net.forward(&mut g, &store, &mut binder, xv, true).unwrap();
            let root = g.mean(out);
            g.forward(root).unwrap();
            g.backward(root).unwrap()
        })
    });
}

fn langevin(c: &mut Criterion) {
    let specs = cartpole_train_family(3, false).unwrap();
    let ds = generate_dataset(&specs, &ScriptedExpert::default(), 2, 0).unwrap();
    let obs = ds.transitions().unwrap().obs;
    let cfg = EbmConfig { iterations: 2, ..EbmConfig::default() };
    let (model, _) = train_ebm(&obs, &cfg, &mut rng::stream(0, "bench.ebm", &[])).unwrap();
    let x0 = random(64, obs.cols(), 2);
    let mut r = rng::stream(0, "bench.langevin", &[]);
    c.bench_function("langevin 100 steps, 64 chains", |b| {
        b.iter(|| langevin_chain(&model, &x0, 100, 0.01, 0.01, &mut r).unwrap())
    });
}

fn icil_iterations(c: &mut Criterion) {
    let specs = cartpole_train_family(3, false).unwrap();
    let ds = generate_dataset(&specs, &ScriptedExpert::default(), 5, 0).unwrap();
    let cfg = IcilConfig { iterations: 20, ..IcilConfig::default() };
    let mut group = c.benchmark_group("icil");
    group.sample_size(10);
    group.bench_function("20 training iterations", |b| b.iter(|| train_icil(&ds, None, &cfg, 0).unwrap()));
    group.finish();
}

fn cartpole_steps(c: &mut Criterion) {
    c.bench_function("cartpole 500 steps", |b| {
        b.iter(|| {
            let mut r = rng::stream(0, "bench.cartpole", &[]);
            let mut env = CartPole::reset(&mut r);
            let mut resets = 0;
            for t in 0..500 {
                let out = env.step(t % 2);
                if out.terminated || out.truncated {
                    env = CartPole::reset(&mut r);
                    resets += 1;
                }
            }
            resets
        })
    });
}

criterion_group!(benches, mlp_forward_backward, langevin, icil_iterations, cartpole_steps);
criterion_main!(benches);
