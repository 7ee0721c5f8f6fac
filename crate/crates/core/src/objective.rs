//! Composite training loss (L1, SSIM, edge, frequency) and the PSNR / SSIM /
//! MAE metrics. Images are [B, C, H, W] in [0, 1].

use crate::degrade::gaussian_kernel;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Padding, Scalar, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const FREQ_EPS: f64 = 1e-12;

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if a.dims().len() != 4 {
        return shape_err(format!("{what}: expected [B, C, H, W], got {:?}", a.dims()));
    }
    Ok(())
}

/// mean |sr − hr|
pub fn l1_loss<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    if sr.dims() != hr.dims() {
        return shape_err(format!("l1: {:?} vs {:?}", sr.dims(), hr.dims()));
    }
    Ok(tape.mean(&tape.abs(&tape.sub(sr, hr)?)))
}

/// Mean SSIM over all valid-window positions, channels and batch items.
pub fn ssim<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    same_shape(sr, hr, "ssim")?;
    let d = sr.dims().to_vec();
    if d[2] < SSIM_WINDOW || d[3] < SSIM_WINDOW {
        return config_err(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}", d[2], d[3]));
    }
    let g = gaussian_kernel::<T>(SSIM_SIGMA, SSIM_WINDOW)?;
    let kern: Vec<T> = (0..d[1]).flat_map(|_| g.data().iter().copied()).collect();
    let kern = Var::constant(Tensor::from_vec(&[d[1], SSIM_WINDOW, SSIM_WINDOW], kern));
    let filt = |x: &Var<T>| tape.depthwise_conv2d(x, &kern, Padding::Valid);

    let (c1, c2) = (T::of(SSIM_K1 * SSIM_K1), T::of(SSIM_K2 * SSIM_K2));
    let mx = filt(sr)?;
    let my = filt(hr)?;
    let mxx = tape.square(&mx);
    let myy = tape.square(&my);
    let mxy = tape.mul(&mx, &my)?;
    let sxx = tape.sub(&filt(&tape.square(sr))?, &mxx)?;
    let syy = tape.sub(&filt(&tape.square(hr))?, &myy)?;
    let sxy = tape.sub(&filt(&tape.mul(sr, hr)?)?, &mxy)?;

    let two = T::of(2.0);
    let num = tape.mul(&tape.add_scalar(&tape.mul_scalar(&mxy, two), c1), &tape.add_scalar(&tape.mul_scalar(&sxy, two), c2))?;
    let den = tape.mul(&tape.add_scalar(&tape.add(&mxx, &myy)?, c1), &tape.add_scalar(&tape.add(&sxx, &syy)?, c2))?;
    Ok(tape.mean(&tape.div(&num, &den)?))
}

/// 1 − SSIM
pub fn ssim_loss<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    let s = ssim(tape, sr, hr)?;
    Ok(tape.add_scalar(&tape.neg(&s), T::one()))
}

/// Forward differences along W and H: ([.., H, W−1], [.., H−1, W]).
pub fn spatial_gradients<T: Scalar>(tape: &Tape<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let d = x.dims().to_vec();
    let (h, w) = (d[2], d[3]);
    let dx = tape.sub(&tape.narrow(x, 3, 1, w - 1)?, &tape.narrow(x, 3, 0, w - 1)?)?;
    let dy = tape.sub(&tape.narrow(x, 2, 1, h - 1)?, &tape.narrow(x, 2, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// mean|∂x sr − ∂x hr| + mean|∂y sr − ∂y hr|
pub fn edge_loss<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    same_shape(sr, hr, "edge")?;
    let d = sr.dims();
    if d[2] < 2 || d[3] < 2 {
        return config_err(format!("edge loss needs at least 2×2, got {}×{}", d[2], d[3]));
    }
    let diff = tape.sub(sr, hr)?;
    let (dx, dy) = spatial_gradients(tape, &diff)?;
    tape.add(&tape.mean(&tape.abs(&dx)), &tape.mean(&tape.abs(&dy)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FreqOptions {
    /// compare |F(sr)| with |F(hr)| instead of the complex difference
    pub amplitude: bool,
    /// reflect-pad non-power-of-two extents up to the next power of two
    pub pad_to_pow2: bool,
}

/// √(re² + im² + ε) − √ε: smooth at zero and exactly zero there.
fn smooth_modulus<T: Scalar>(tape: &Tape<T>, re: &Var<T>, im: &Var<T>) -> Result<Var<T>> {
    let sq = tape.add(&tape.square(re), &tape.square(im))?;
    let m = tape.sqrt(&tape.add_scalar(&sq, T::of(FREQ_EPS)));
    Ok(tape.add_scalar(&m, T::of(-FREQ_EPS.sqrt())))
}

fn pow2_pad<T: Scalar>(tape: &Tape<T>, x: &Var<T>, opts: FreqOptions) -> Result<Var<T>> {
    let d = x.dims();
    let (h, w) = (d[2], d[3]);
    if h.is_power_of_two() && w.is_power_of_two() {
        return Ok(x.clone());
    }
    if !opts.pad_to_pow2 {
        return config_err(format!("frequency loss needs power-of-two extents, got {h}×{w}"));
    }
    tape.reflect_pad_br(x, h.next_power_of_two() - h, w.next_power_of_two() - w)
}

/// Mean over all spectral bins of |F(sr) − F(hr)| (unnormalized per-plane DFT).
pub fn freq_loss_with<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>, opts: FreqOptions) -> Result<Var<T>> {
    same_shape(sr, hr, "freq")?;
    let (sr, hr) = (pow2_pad(tape, sr, opts)?, pow2_pad(tape, hr, opts)?);
    let m = if opts.amplitude {
        let (ar, ai) = tape.dft2(&sr)?;
        let (br, bi) = tape.dft2(&hr)?;
        let diff = tape.sub(&smooth_modulus(tape, &ar, &ai)?, &smooth_modulus(tape, &br, &bi)?)?;
        tape.abs(&diff)
    } else {
        let (re, im) = tape.dft2(&tape.sub(&sr, &hr)?)?;
        smooth_modulus(tape, &re, &im)?
    };
    Ok(tape.mean(&m))
}

pub fn freq_loss<T: Scalar>(tape: &Tape<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    freq_loss_with(tape, sr, hr, FreqOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    L1,
    Ssim,
    Edge,
    Freq,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::L1, LossTerm::Ssim, LossTerm::Edge, LossTerm::Freq];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::L1 => "l1",
            LossTerm::Ssim => "ssim",
            LossTerm::Edge => "edge",
            LossTerm::Freq => "freq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| crate::Error::Config(format!("unknown loss term {s:?} (l1, ssim, edge, freq)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 4],
    pub enabled: [bool; 4],
    pub freq: FreqOptions,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0, 0.1, 0.1, 0.05], enabled: [true; 4], freq: FreqOptions::default() }
    }
}

impl LossWeights {
    /// Default weights with only `terms` switched on.
    pub fn only(terms: &[LossTerm]) -> Self {
        let mut w = Self::default();
        for (i, t) in LossTerm::ALL.iter().enumerate() {
            w.enabled[i] = terms.contains(t);
        }
        w
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        self.lambda[term as usize]
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled[term as usize]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda.iter().find(|l| !(**l >= 0.0)) {
            return config_err(format!("loss weights must be non-negative, got {l}"));
        }
        Ok(())
    }

    pub fn terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL.into_iter().filter(|t| self.is_enabled(*t)).collect()
    }
}

/// Unweighted term values; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    pub freq: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::L1 => self.l1,
            LossTerm::Ssim => self.ssim,
            LossTerm::Edge => self.edge,
            LossTerm::Freq => self.freq,
        }
    }

    fn set(&mut self, t: LossTerm, v: f64) {
        match t {
            LossTerm::L1 => self.l1 = v,
            LossTerm::Ssim => self.ssim = v,
            LossTerm::Edge => self.edge = v,
            LossTerm::Freq => self.freq = v,
        }
    }
}

pub fn loss_term<T: Scalar>(tape: &Tape<T>, term: LossTerm, sr: &Var<T>, hr: &Var<T>, w: &LossWeights) -> Result<Var<T>> {
    match term {
        LossTerm::L1 => l1_loss(tape, sr, hr),
        LossTerm::Ssim => ssim_loss(tape, sr, hr),
        LossTerm::Edge => edge_loss(tape, sr, hr),
        LossTerm::Freq => freq_loss_with(tape, sr, hr, w.freq),
    }
}

/// Σ λ_t·L_t over enabled terms.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    sr: &Var<T>,
    hr: &Var<T>,
    weights: &LossWeights,
) -> Result<(Var<T>, LossBreakdown)> {
    weights.validate()?;
    if sr.dims() != hr.dims() {
        return shape_err(format!("loss: {:?} vs {:?}", sr.dims(), hr.dims()));
    }
    let mut bd = LossBreakdown::default();
    let mut total: Option<Var<T>> = None;
    for term in weights.terms() {
        let v = loss_term(tape, term, sr, hr, weights)?;
        bd.set(term, v.item().as_f64());
        let scaled = tape.mul_scalar(&v, T::of(weights.weight(term)));
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(&acc, &scaled)?,
        });
    }
    let total = total.unwrap_or_else(|| Var::constant(Tensor::scalar(T::zero())));
    bd.total = total.item().as_f64();
    Ok((total, bd))
}

pub fn mse<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    if sr.dims() != hr.dims() {
        return shape_err(format!("mse: {:?} vs {:?}", sr.dims(), hr.dims()));
    }
    let n = sr.len().max(1) as f64;
    Ok(sr.data().iter().zip(hr.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n)
}

pub fn mae<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    if sr.dims() != hr.dims() {
        return shape_err(format!("mae: {:?} vs {:?}", sr.dims(), hr.dims()));
    }
    let n = sr.len().max(1) as f64;
    Ok(sr.data().iter().zip(hr.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / n)
}

/// 10·log10(peak²/MSE); identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(sr, hr)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// SSIM of plain tensors ([C, H, W] or [B, C, H, W]) evaluated in f64.
pub fn ssim_value<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    let as4 = |t: &Tensor<T>| -> Result<Tensor<f64>> {
        let c = t.cast::<f64>();
        match t.dims().len() {
            3 => c.reshape(&[1, t.dims()[0], t.dims()[1], t.dims()[2]]),
            4 => Ok(c),
            _ => shape_err(format!("ssim: expected an image, got {:?}", t.dims())),
        }
    };
    let tape = Tape::<f64>::inference();
    let s = ssim(&tape, &Var::constant(as4(sr)?), &Var::constant(as4(hr)?))?;
    Ok(s.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: Tensor<f64>) -> Var<f64> {
        Var::constant(t)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        let b = Tensor::<f64>::full(&[1, 1, 4, 4], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn identical_inputs_are_zero() {
        let tape = Tape::<f64>::inference();
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 37) % 17) as f64 / 17.0);
        let (l, bd) = total_loss(&tape, &v(x.clone()), &v(x), &LossWeights::default()).unwrap();
        assert_eq!(l.item(), 0.0);
        assert_eq!(bd, LossBreakdown::default());
    }

    #[test]
    fn freq_requires_pow2_unless_padding() {
        let tape = Tape::<f64>::inference();
        let x = v(Tensor::zeros(&[1, 1, 12, 16]));
        assert!(freq_loss(&tape, &x, &x).is_err());
        let opts = FreqOptions { pad_to_pow2: true, ..Default::default() };
        assert_eq!(freq_loss_with(&tape, &x, &x, opts).unwrap().item(), 0.0);
    }

    #[test]
    fn ssim_needs_window() {
        let tape = Tape::<f64>::inference();
        let x = v(Tensor::zeros(&[1, 1, 10, 16]));
        assert!(ssim(&tape, &x, &x).is_err());
    }

    #[test]
    fn term_names() {
        for t in LossTerm::ALL {
            assert_eq!(LossTerm::parse(t.name()).unwrap(), t);
        }
        assert!(LossTerm::parse("perceptual").is_err());
    }

    fn noisy(seed: u64, amp: f64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = crate::numerics::PortableRng::new(seed);
        let hr = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.uniform());
        let mut rng = crate::numerics::PortableRng::new(seed + 1);
        let sr = Tensor::from_fn(hr.dims(), |i| hr.data()[i] + amp * rng.normal());
        (sr, hr)
    }

    #[test]
    fn every_term_grows_with_noise() {
        let tape = Tape::<f64>::inference();
        for term in LossTerm::ALL {
            let mut last = 0.0;
            for amp in [0.01, 0.03, 0.1, 0.3] {
                let (sr, hr) = noisy(5, amp);
                let l = loss_term(&tape, term, &v(sr), &v(hr), &LossWeights::default()).unwrap().item();
                assert!(l > last, "{} at {amp}: {l} <= {last}", term.name());
                last = l;
            }
        }
    }

    #[test]
    fn terms_are_symmetric() {
        let tape = Tape::<f64>::inference();
        let (sr, hr) = noisy(9, 0.1);
        for term in LossTerm::ALL {
            let w = LossWeights::default();
            let a = loss_term(&tape, term, &v(sr.clone()), &v(hr.clone()), &w).unwrap().item();
            let b = loss_term(&tape, term, &v(hr.clone()), &v(sr.clone()), &w).unwrap().item();
            assert!((a - b).abs() <= 1e-12 * a.abs(), "{}: {a} vs {b}", term.name());
        }
    }

    #[test]
    fn total_recombines_breakdown() {
        let tape = Tape::<f64>::inference();
        let (sr, hr) = noisy(3, 0.05);
        let w = LossWeights::default();
        let (l, bd) = total_loss(&tape, &v(sr), &v(hr), &w).unwrap();
        let manual = 1.0 * bd.l1 + 0.1 * bd.ssim + 0.1 * bd.edge + 0.05 * bd.freq;
        assert_eq!(l.item(), manual);
        assert_eq!(bd.total, manual);
    }

    #[test]
    fn disabled_terms_report_zero() {
        let tape = Tape::<f64>::inference();
        let (sr, hr) = noisy(4, 0.05);
        let (l, bd) = total_loss(&tape, &v(sr), &v(hr), &LossWeights::only(&[LossTerm::Edge])).unwrap();
        assert_eq!((bd.l1, bd.ssim, bd.freq), (0.0, 0.0, 0.0));
        assert_eq!(l.item(), 0.1 * bd.edge);
    }

    #[test]
    fn negative_weight_rejected() {
        let tape = Tape::<f64>::inference();
        let x = v(Tensor::zeros(&[1, 1, 16, 16]));
        let w = LossWeights { lambda: [1.0, -0.1, 0.1, 0.05], ..Default::default() };
        assert!(total_loss(&tape, &x, &x, &w).is_err());
    }

    #[test]
    fn metric_closed_forms() {
        let (x, _) = noisy(1, 0.0);
        assert!((ssim_value(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let y = x.map(|a| a + 0.25);
        assert_eq!(mae(&y, &x).unwrap(), 0.25);
        let z = x.map(|a| a - 0.1);
        assert!((psnr(&z, &x, 1.0).unwrap() - 20.0).abs() <= 1e-6);
        assert!((psnr(&z, &x, 255.0).unwrap() - (20.0 + 20.0 * 255f64.log10())).abs() <= 1e-9);
    }

    #[test]
    fn ssim_drops_for_unrelated_images() {
        let (a, _) = noisy(1, 0.0);
        let (b, _) = noisy(100, 0.0);
        assert!(ssim_value(&a, &b).unwrap() < 0.2);
    }
}
