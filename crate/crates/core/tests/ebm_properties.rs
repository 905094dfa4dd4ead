use icil_core::autodiff::Array;
use icil_core::ebm::{langevin_chain, train_ebm, EbmConfig, Quadratic};
use icil_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn mixture<R: Rng>(n: usize, rng: &mut R) -> Array {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let c = if rng.random::<bool>() { 1.5 } else { -1.5 };
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            [c + 0.3 * e0, c + 0.3 * e1]
        })
        .collect();
    Array::from_rows(&rows).unwrap()
}

fn uniform<R: Rng>(n: usize, rng: &mut R) -> Array {
    let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    Array::from_rows(&rows).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn mixture_data_has_lower_energy_than_uniform() {
    let seed = 0;
    let mut r = rng::stream(seed, "mixture", &[]);
    let train = mixture(1000, &mut r);
    let held_out = mixture(500, &mut r);
    let noise = uniform(500, &mut r);
    let mut tr = rng::stream(seed, "ebm", &[]);
    let t = std::time::Instant::now();
    let (model, hist) = train_ebm(&train, &EbmConfig::default(), &mut tr).unwrap();
    let (e_in, e_out) = (mean(&model.energy_raw(&held_out).unwrap()), mean(&model.energy_raw(&noise).unwrap()));
    eprintln!("{:?} in {e_in} out {e_out} gap {}", t.elapsed(), hist.energy_gap.last().unwrap());
    assert!(e_in < e_out);
}

#[test]
fn quadratic_chain_reaches_stationary_variance() {
    let (alpha, sigma) = (0.01, 0.01);
    let mut r = rng::stream(1, "langevin", &[]);
    let mut x = Array::zeros(1, 64);
    x = langevin_chain(&Quadratic { dim: 64 }, &x, 1000, alpha, sigma, &mut r).unwrap();
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        x = langevin_chain(&Quadratic { dim: 64 }, &x, 10, alpha, sigma, &mut r).unwrap();
        for v in x.data() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let var = sq / n - (sum / n).powi(2);
    let expected = sigma * sigma / (2.0 * alpha - alpha * alpha);
    assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
}
