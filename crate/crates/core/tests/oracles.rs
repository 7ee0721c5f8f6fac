mod common;

use common as oracle;
use common::{rel_err, uniform, with_noise};
use sfg_swinsr::numerics::{Tape, Tensor, Var};
use sfg_swinsr::objective::*;

fn eval(f: impl Fn(&Tape<f64>, &Var<f64>, &Var<f64>) -> sfg_swinsr::Result<Var<f64>>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let tape = Tape::inference();
    f(&tape, &Var::constant(a.clone()), &Var::constant(b.clone())).unwrap().item()
}

fn pair(seed: u64, dims: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let hr = uniform(dims, seed);
    (with_noise(&hr, 0.1, seed + 1000), hr)
}

#[test]
fn loss_terms_match_direct_summation() {
    for seed in 0..4 {
        for dims in [[1, 3, 16, 16], [2, 1, 16, 16]] {
            let (sr, hr) = pair(seed, &dims);
            let checks = [
                ("l1", eval(l1_loss, &sr, &hr), oracle::l1(&sr, &hr)),
                ("ssim", eval(ssim_loss, &sr, &hr), 1.0 - oracle::ssim(&sr, &hr)),
                ("edge", eval(edge_loss, &sr, &hr), oracle::edge(&sr, &hr)),
                ("freq", eval(freq_loss, &sr, &hr), oracle::freq(&sr, &hr)),
                (
                    "freq_amp",
                    eval(|t, a, b| freq_loss_with(t, a, b, FreqOptions { amplitude: true, ..Default::default() }), &sr, &hr),
                    oracle::freq_amplitude(&sr, &hr),
                ),
            ];
            for (name, got, want) in checks {
                assert!(rel_err(got, want) <= 1e-5, "{name} seed {seed}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn weighted_total_matches_oracle_sum() {
    let (sr, hr) = pair(7, &[1, 3, 16, 16]);
    let tape = Tape::inference();
    let (total, _) = total_loss(&tape, &Var::constant(sr.clone()), &Var::constant(hr.clone()), &LossWeights::default()).unwrap();
    let want = oracle::l1(&sr, &hr) + 0.1 * (1.0 - oracle::ssim(&sr, &hr)) + 0.1 * oracle::edge(&sr, &hr) + 0.05 * oracle::freq(&sr, &hr);
    assert!(rel_err(total.item(), want) <= 1e-5);
}

#[test]
fn padded_frequency_loss_matches_manual_padding() {
    let (sr, hr) = pair(3, &[1, 1, 12, 16]);
    let tape = Tape::inference();
    let pad = |t: &Tensor<f64>| tape.reflect_pad_br(&Var::constant(t.clone()), 4, 0).unwrap().value().clone();
    let got = eval(|t, a, b| freq_loss_with(t, a, b, FreqOptions { pad_to_pow2: true, ..Default::default() }), &sr, &hr);
    assert!(rel_err(got, oracle::freq(&pad(&sr), &pad(&hr))) <= 1e-5);
}

#[test]
fn metrics_match_direct_formulas() {
    let (sr, hr) = pair(11, &[1, 3, 16, 16]);
    let m = oracle::mse(&sr, &hr);
    assert!(rel_err(psnr(&sr, &hr, 1.0).unwrap(), 10.0 * (1.0 / m).log10()) <= 1e-12);
    assert!(rel_err(ssim_value(&sr, &hr).unwrap(), oracle::ssim(&sr, &hr)) <= 1e-9);
    assert!(rel_err(mae(&sr, &hr).unwrap(), oracle::l1(&sr, &hr)) <= 1e-12);
}
