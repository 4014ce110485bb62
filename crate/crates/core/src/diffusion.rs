//! Forward process, prediction-type conversions, the weighted x-space loss,
//! classifier-free guidance and the ancestral sampler.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bitcodec::{decode_map, Encoding};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng::{self, Rng};
use crate::schedule::{LossWeighting, NoiseSchedule};
use crate::tensor::{Real, Tensor};

/// Below this data coefficient an epsilon prediction cannot be turned back
/// into data.
pub const MIN_ALPHA: f64 = 1e-12;

/// Cap on `w(t) (sigma/alpha)^2`, the weight an epsilon-predicting network
/// sees on its own squared error when the loss is taken in x-space.
pub const MAX_EPS_LOSS_WEIGHT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionType {
    X,
    Eps,
    V,
}

impl PredictionType {
    pub fn name(self) -> &'static str {
        match self {
            PredictionType::X => "x",
            PredictionType::Eps => "eps",
            PredictionType::V => "v",
        }
    }
}

/// A time-conditioned network predicting label channels from noisy labels
/// and an image.
pub trait Denoiser<T: Real> {
    fn prediction_type(&self) -> PredictionType;

    /// Raw predictions for a batch; `t` holds one time per batch item.
    fn predict(&self, x_t: &Tensor<T>, image: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>>;
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: [1, 1, 1, a.len()], got: [1, 1, 1, b.len()] });
    }
    Ok(())
}

/// `alpha(t) x0 + sigma(t) eps`.
pub fn forward_sample<T: Real>(x0: &[T], eps: &[T], t: f64, sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(x0, eps)?;
    let (a, s) = sched.coefficients(t)?;
    let (a, s) = (T::of(a), T::of(s));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

/// `(x_t - sigma eps_hat) / alpha`.
pub fn x_from_eps<T: Real>(x_t: &[T], eps_hat: &[T], t: f64, sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(x_t, eps_hat)?;
    let (a, s) = sched.coefficients(t)?;
    if a < MIN_ALPHA {
        return Err(Error::Numeric(alloc::format!("alpha({t}) = {a} too small to invert")));
    }
    let (a, s) = (T::of(a), T::of(s));
    Ok(x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - s * e) / a).collect())
}

/// `alpha x_t - sigma v_hat`, exact for `v = alpha eps - sigma x0`.
pub fn x_from_v<T: Real>(x_t: &[T], v_hat: &[T], t: f64, sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(x_t, v_hat)?;
    let (a, s) = sched.coefficients(t)?;
    let (a, s) = (T::of(a), T::of(s));
    Ok(x_t.iter().zip(v_hat).map(|(&x, &v)| a * x - s * v).collect())
}

/// `alpha eps - sigma x0`.
pub fn v_target<T: Real>(x0: &[T], eps: &[T], t: f64, sched: &NoiseSchedule) -> Result<Vec<T>> {
    check_len(x0, eps)?;
    let (a, s) = sched.coefficients(t)?;
    let (a, s) = (T::of(a), T::of(s));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * e - s * x).collect())
}

/// Converts a raw network output to a data estimate.
pub fn prediction_to_x<T: Real>(
    pred: &[T],
    x_t: &[T],
    t: f64,
    kind: PredictionType,
    sched: &NoiseSchedule,
) -> Result<Vec<T>> {
    match kind {
        PredictionType::X => {
            check_len(pred, x_t)?;
            Ok(pred.to_vec())
        }
        PredictionType::Eps => x_from_eps(x_t, pred, t, sched),
        PredictionType::V => x_from_v(x_t, pred, t, sched),
    }
}

/// `cond + gw (cond - uncond)`.
pub fn cfg_combine<T: Real>(cond: &[T], uncond: &[T], gw: f64) -> Result<Vec<T>> {
    check_len(cond, uncond)?;
    let gw = T::of(gw);
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| c + gw * (c - u)).collect())
}

/// One step of the variance-preserving posterior `q(x_t' | x_s, x0 = x_hat)`
/// from time `s` down to `t_next`. With `rng = None` the mean is returned.
pub fn ancestral_step<T: Real>(
    x_s: &[T],
    x_hat: &[T],
    s: f64,
    t_next: f64,
    sched: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Result<Vec<T>> {
    check_len(x_s, x_hat)?;
    if !(t_next < s) || t_next < 0.0 || s > 1.0 {
        return Err(Error::InvalidArgument(alloc::format!("ancestral step needs 0 <= t' < s <= 1, got s={s} t'={t_next}")));
    }
    let (alpha_s, sigma_s) = sched.coefficients(s)?;
    let (alpha_t, sigma_t) = sched.coefficients(t_next)?;
    let alpha_ts = alpha_s / alpha_t;
    let var_ts = (sigma_s * sigma_s - alpha_ts * alpha_ts * sigma_t * sigma_t).max(0.0);
    let var_s = sigma_s * sigma_s;
    let coef_x = T::of(alpha_ts * sigma_t * sigma_t / var_s);
    let coef_hat = T::of(alpha_t * var_ts / var_s);
    let mut out: Vec<T> = x_s.iter().zip(x_hat).map(|(&x, &h)| coef_x * x + coef_hat * h).collect();
    if let Some(rng) = rng {
        let std = libm::sqrt(var_ts * sigma_t * sigma_t / var_s);
        if std > 0.0 {
            let mut noise = vec![T::zero(); out.len()];
            rng::fill_normal(rng, &mut noise);
            let std = T::of(std);
            for (o, n) in out.iter_mut().zip(noise) {
                *o += std * n;
            }
        }
    }
    Ok(out)
}

/// Weighted x-space squared error for a batch and its gradient with respect
/// to the raw network output.
///
/// The per-example loss is `w(t) * mean((x0 - x_hat)^2)`; the batch loss is
/// the mean over examples.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad<T: Real>(
    pred: &Tensor<T>,
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: &[f64],
    kind: PredictionType,
    sched: &NoiseSchedule,
    weighting: &LossWeighting,
) -> Result<(f64, Tensor<T>)> {
    pred.same_shape(x0)?;
    pred.same_shape(x_t)?;
    pred.same_shape(eps)?;
    let n = pred.batch();
    if t.len() != n {
        return Err(Error::InvalidArgument(alloc::format!("{} times for a batch of {n}", t.len())));
    }
    let m = pred.item_len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for i in 0..n {
        let w = weighting.weight(t[i], sched)?;
        let (alpha, sigma) = sched.coefficients(t[i])?;
        let (p, x, xt, e) = (pred.item(i), x0.item(i), x_t.item(i), eps.item(i));
        let g = grad.item_mut(i);
        let mut sq = 0.0;
        match kind {
            PredictionType::X => {
                let scale = T::of(2.0 * w / (m * n as f64));
                for j in 0..p.len() {
                    let d = p[j] - x[j];
                    sq += (d * d).as_f64();
                    g[j] = scale * d;
                }
                total += w * sq / m;
            }
            PredictionType::V => {
                let (a, s) = (T::of(alpha), T::of(sigma));
                let scale = T::of(2.0 * w / (m * n as f64));
                for j in 0..p.len() {
                    let d = a * xt[j] - s * p[j] - x[j];
                    sq += (d * d).as_f64();
                    g[j] = -scale * s * d;
                }
                total += w * sq / m;
            }
            PredictionType::Eps => {
                // x0 - x_hat = (sigma / alpha) (eps_hat - eps).
                let w_eff = if alpha > 0.0 {
                    (w * (sigma / alpha) * (sigma / alpha)).min(MAX_EPS_LOSS_WEIGHT)
                } else {
                    MAX_EPS_LOSS_WEIGHT
                };
                let scale = T::of(2.0 * w_eff / (m * n as f64));
                for j in 0..p.len() {
                    let d = p[j] - e[j];
                    sq += (d * d).as_f64();
                    g[j] = scale * d;
                }
                total += w_eff * sq / m;
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(alloc::format!("loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Weighted loss of `net` on one batch with given times and noise.
pub fn training_loss<T: Real, D: Denoiser<T> + ?Sized>(
    net: &D,
    image: &Tensor<T>,
    x0: &Tensor<T>,
    t: &[f64],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
    weighting: &LossWeighting,
) -> Result<f64> {
    let x_t = noisy_batch(x0, eps, t, sched)?;
    let pred = net.predict(&x_t, image, t)?;
    if pred.has_non_finite() {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    Ok(loss_and_grad(&pred, x0, &x_t, eps, t, net.prediction_type(), sched, weighting)?.0)
}

/// Applies the forward process item by item.
pub fn noisy_batch<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[f64], sched: &NoiseSchedule) -> Result<Tensor<T>> {
    x0.same_shape(eps)?;
    let mut out = Tensor::zeros(x0.shape());
    for (i, &ti) in t.iter().enumerate().take(x0.batch()) {
        let xt = forward_sample(x0.item(i), eps.item(i), ti, sched)?;
        out.item_mut(i).copy_from_slice(&xt);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_weight: f64,
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 8, guidance_weight: 1.0, stochastic: true, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        if !(self.guidance_weight >= 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("guidance weight {} < 0", self.guidance_weight)));
        }
        Ok(())
    }

    /// Equidistant times from 1 down to 0, `steps + 1` entries.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| 1.0 - i as f64 / self.steps as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T: Real> {
    pub labels: Vec<LabelMap>,
    /// Final continuous label channels (the clamped last data estimate).
    pub x0: Tensor<T>,
}

/// Draws one segmentation per batch item of `images`. Item `i` uses the
/// random stream keyed by `(cfg.seed, sample_ids[i])`, so results do not
/// depend on how samples are batched.
pub fn sample<T: Real, D: Denoiser<T> + ?Sized>(
    net: &D,
    images: &Tensor<T>,
    sample_ids: &[u64],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    encoding: &Encoding,
) -> Result<SampleOutput<T>> {
    cfg.validate()?;
    let [n, _, h, w] = images.shape();
    if sample_ids.len() != n {
        return Err(Error::InvalidArgument(alloc::format!("{} sample ids for {n} images", sample_ids.len())));
    }
    let shape = [n, encoding.channels(), h, w];
    let (lo, hi) = encoding.value_range();
    let (lo, hi) = (T::of(lo), T::of(hi));
    let kind = net.prediction_type();
    let guided = cfg.guidance_weight != 0.0;

    let mut rngs: Vec<Rng> = sample_ids.iter().map(|&id| rng::keyed(cfg.seed, id, 0)).collect();
    let mut x = Tensor::zeros(shape);
    for (i, r) in rngs.iter_mut().enumerate() {
        rng::fill_normal(r, x.item_mut(i));
    }
    // Conditional items first, then the unconditional copies with a blank image.
    let net_images = if guided {
        let mut both = Tensor::zeros([2 * n, images.channels(), h, w]);
        both.data_mut()[..images.data().len()].copy_from_slice(images.data());
        both
    } else {
        images.clone()
    };

    let times = cfg.times();
    let mut x_hat = Tensor::zeros(shape);
    for step in 0..cfg.steps {
        let (s, t_next) = (times[step], times[step + 1]);
        let (net_x, t_batch) = if guided {
            let mut both = Tensor::zeros([2 * n, shape[1], h, w]);
            both.data_mut()[..x.data().len()].copy_from_slice(x.data());
            both.data_mut()[x.data().len()..].copy_from_slice(x.data());
            (both, vec![s; 2 * n])
        } else {
            (x.clone(), vec![s; n])
        };
        let pred = net.predict(&net_x, &net_images, &t_batch)?;
        pred.ensure_shape(net_x.shape())?;
        for i in 0..n {
            let cond = to_x_or_blank(pred.item(i), x.item(i), s, kind, sched)?;
            let est = if guided {
                let uncond = to_x_or_blank(pred.item(n + i), x.item(i), s, kind, sched)?;
                cfg_combine(&cond, &uncond, cfg.guidance_weight)?
            } else {
                cond
            };
            let dst = x_hat.item_mut(i);
            for (d, v) in dst.iter_mut().zip(est) {
                if v.is_nan() {
                    return Err(Error::Numeric("data estimate is NaN".into()));
                }
                *d = v.max(lo).min(hi);
            }
        }
        for i in 0..n {
            let rng = if cfg.stochastic { Some(&mut rngs[i]) } else { None };
            let next = ancestral_step(x.item(i), x_hat.item(i), s, t_next, sched, rng)?;
            x.item_mut(i).copy_from_slice(&next);
        }
    }
    let labels = (0..n).map(|i| decode_map(&x_hat, i, encoding)).collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput { labels, x0: x_hat })
}

/// Data estimate, falling back to the blank estimate 0 when an epsilon
/// prediction cannot be inverted (at `t = 1` the data coefficient is 0).
fn to_x_or_blank<T: Real>(pred: &[T], x_t: &[T], t: f64, kind: PredictionType, sched: &NoiseSchedule) -> Result<Vec<T>> {
    match prediction_to_x(pred, x_t, t, kind, sched) {
        Err(Error::Numeric(_)) if kind == PredictionType::Eps => Ok(vec![T::zero(); pred.len()]),
        other => other,
    }
}
