use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ops::{self, AttnCache, GnCache};
use super::{Attention, Conv, GroupNorm, Linear, ParamLayout};
use crate::diffusion::{Denoiser, PredictionType};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Image channels concatenated to the noisy labels.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub base_width: usize,
    pub depth_per_level: usize,
    pub levels: usize,
    pub attention_at_lowest: bool,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_width: 48, depth_per_level: 1, levels: 3, attention_at_lowest: true, time_embed_dim: 128 }
    }
}

impl NetConfig {
    /// Width of resolution level `level`: the base width at full
    /// resolution, twice that below it.
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth_per_level == 0 || self.levels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate network config {self:?}")));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("time_embed_dim {} must be even", self.time_embed_dim)));
        }
        Ok(())
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        if !height.is_multiple_of(div) || !width.is_multiple_of(div) || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {height}x{width} not divisible by {div} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    /// Learnable scalars of a network with these settings.
    pub fn parameter_count(&self, label_channels: usize) -> usize {
        Arch::build(self, label_channels).1.len()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct ResCache<T: Real> {
    x: Tensor<T>,
    gn1: GnCache<T>,
    n1: Tensor<T>,
    a1: Tensor<T>,
    gn2: GnCache<T>,
    n2: Tensor<T>,
    a2: Tensor<T>,
}

impl ResBlock {
    fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, emb: usize) -> Self {
        Self {
            norm1: GroupNorm::declare(layout, &format!("{name}.norm1"), cin),
            conv1: Conv::declare(layout, &format!("{name}.conv1"), cin, cout, 3, false),
            time: Linear::declare(layout, &format!("{name}.time"), emb, cout),
            norm2: GroupNorm::declare(layout, &format!("{name}.norm2"), cout),
            conv2: Conv::declare(layout, &format!("{name}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| Conv::declare(layout, &format!("{name}.skip"), cin, cout, 1, false)),
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: Tensor<T>, emb_act: &[T]) -> (Tensor<T>, ResCache<T>) {
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let cout = self.conv1.cout;
        let (n1, gn1) = self.norm1.forward(p, &x);
        let a1 = ops::silu_t(&n1);
        let mut h1 = self.conv1.forward(p, &a1);
        let shift = self.time.forward(p, emb_act, n);
        for i in 0..n {
            let item = h1.item_mut(i);
            for c in 0..cout {
                let s = shift[i * cout + c];
                for v in &mut item[c * hw..(c + 1) * hw] {
                    *v += s;
                }
            }
        }
        let (n2, gn2) = self.norm2.forward(p, &h1);
        let a2 = ops::silu_t(&n2);
        let mut out = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(skip) => {
                let s = skip.forward(p, &x);
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o += *v;
                }
            }
            None => {
                for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o += *v;
                }
            }
        }
        (out, ResCache { x, gn1, n1, a1, gn2, n2, a2 })
    }

    fn backward<T: Real>(&self, p: &[T], g: &mut [T], c: &ResCache<T>, dy: &Tensor<T>, emb_act: &[T], d_emb_act: &mut [T]) -> Tensor<T> {
        let [n, cout, h, w] = dy.shape();
        let hw = h * w;
        let da2 = self.conv2.backward(p, g, &c.a2, dy, true).expect("dx requested");
        let dn2 = ops::silu_backward_t(&c.n2, &da2);
        let dh1 = self.norm2.backward(p, g, &c.gn2, &dn2);
        let mut dshift = vec![T::zero(); n * cout];
        for i in 0..n {
            let item = dh1.item(i);
            for ch in 0..cout {
                dshift[i * cout + ch] = item[ch * hw..(ch + 1) * hw].iter().copied().sum();
            }
        }
        let demb = self.time.backward(p, g, emb_act, &dshift, n, true).expect("dx requested");
        for (a, b) in d_emb_act.iter_mut().zip(demb) {
            *a += b;
        }
        let da1 = self.conv1.backward(p, g, &c.a1, &dh1, true).expect("dx requested");
        let dn1 = ops::silu_backward_t(&c.n1, &da1);
        let mut dx = self.norm1.backward(p, g, &c.gn1, &dn1);
        match &self.skip {
            Some(skip) => {
                let ds = skip.backward(p, g, &c.x, dy, true).expect("dx requested");
                for (o, v) in dx.data_mut().iter_mut().zip(ds.data()) {
                    *o += *v;
                }
            }
            None => {
                for (o, v) in dx.data_mut().iter_mut().zip(dy.data()) {
                    *o += *v;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Arch {
    embed_dim: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Vec<ResBlock>>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    /// Indexed by level; run from the lowest level upwards.
    up: Vec<Vec<ResBlock>>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Arch {
    fn build(cfg: &NetConfig, label_channels: usize) -> (Self, ParamLayout) {
        let mut l = ParamLayout::default();
        let te = cfg.time_embed_dim;
        let time1 = Linear::declare(&mut l, "time.fc1", te, te);
        let time2 = Linear::declare(&mut l, "time.fc2", te, te);
        let conv_in = Conv::declare(&mut l, "conv_in", label_channels + IMAGE_CHANNELS, cfg.base_width, 3, false);
        let mut ch = cfg.base_width;
        let mut down = Vec::new();
        for lvl in 0..cfg.levels {
            let width = cfg.width(lvl);
            let blocks = (0..cfg.depth_per_level)
                .map(|d| {
                    let b = ResBlock::declare(&mut l, &format!("down{lvl}.{d}"), ch, width, te);
                    ch = width;
                    b
                })
                .collect();
            down.push(blocks);
        }
        let mid1 = ResBlock::declare(&mut l, "mid1", ch, ch, te);
        let attn = cfg.attention_at_lowest.then(|| Attention::declare(&mut l, "mid.attn", ch));
        let mid2 = ResBlock::declare(&mut l, "mid2", ch, ch, te);
        let mut up = vec![Vec::new(); cfg.levels];
        for lvl in (0..cfg.levels).rev() {
            let width = cfg.width(lvl);
            let mut cin = ch + width;
            up[lvl] = (0..cfg.depth_per_level)
                .map(|d| {
                    let b = ResBlock::declare(&mut l, &format!("up{lvl}.{d}"), cin, width, te);
                    cin = width;
                    b
                })
                .collect();
            ch = width;
        }
        let norm_out = GroupNorm::declare(&mut l, "norm_out", ch);
        let conv_out = Conv::declare(&mut l, "conv_out", ch, label_channels, 3, true);
        let arch = Self { embed_dim: te, time1, time2, conv_in, down, mid1, attn, mid2, up, norm_out, conv_out };
        (arch, l)
    }
}

/// Saved activations of one training forward pass.
pub struct Trace<T: Real> {
    batch: usize,
    temb: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
    emb: Vec<T>,
    emb_act: Vec<T>,
    input: Tensor<T>,
    down: Vec<Vec<ResCache<T>>>,
    mid1: ResCache<T>,
    attn: Option<AttnCache<T>>,
    mid2: ResCache<T>,
    up: Vec<Vec<ResCache<T>>>,
    up_split: Vec<usize>,
    gn_out: GnCache<T>,
    n_out: Tensor<T>,
    a_out: Tensor<T>,
    /// `tanh` of the head pre-activation (x-prediction only).
    tanh: Option<Tensor<T>>,
}

/// Attention UNet denoiser over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct UNet<T: Real> {
    config: NetConfig,
    label_channels: usize,
    kind: PredictionType,
    /// Output interval of the x-prediction head, `mid +- half * tanh`.
    range: (f64, f64),
    arch: Arch,
    layout: ParamLayout,
    params: Vec<T>,
    grads: Vec<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: NetConfig, label_channels: usize, kind: PredictionType, range: (f64, f64), rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if label_channels == 0 || !(range.0 < range.1) {
            return Err(Error::InvalidArgument(format!("bad label channels {label_channels} or range {range:?}")));
        }
        let (arch, layout) = Arch::build(&config, label_channels);
        let params = layout.initialise(rng);
        let grads = vec![T::zero(); layout.len()];
        Ok(Self { config, label_channels, kind, range, arch, layout, params, grads })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn label_channels(&self) -> usize {
        self.label_channels
    }

    pub fn output_range(&self) -> (f64, f64) {
        self.range
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn params_and_grads(&mut self) -> (&mut [T], &[T]) {
        (&mut self.params, &self.grads)
    }

    pub fn set_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters supplied for a network of {}",
                values.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(T::zero());
    }

    fn check_inputs(&self, x_t: &Tensor<T>, image: &Tensor<T>, t: &[f64]) -> Result<()> {
        let [n, c, h, w] = x_t.shape();
        if c != self.label_channels {
            return Err(Error::ShapeMismatch { expected: [n, self.label_channels, h, w], got: x_t.shape() });
        }
        image.ensure_shape([n, IMAGE_CHANNELS, h, w])?;
        if t.len() != n {
            return Err(Error::InvalidArgument(format!("{} times for a batch of {n}", t.len())));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("time {bad} outside [0, 1]")));
        }
        self.config.check_input_size(h, w)
    }

    /// Forward pass keeping every activation needed by [`UNet::backward`].
    pub fn forward_train(&self, x_t: &Tensor<T>, image: &Tensor<T>, t: &[f64]) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_inputs(x_t, image, t)?;
        let p = &self.params[..];
        let a = &self.arch;
        let n = x_t.batch();
        let te = a.embed_dim;
        let temb: Vec<T> = t.iter().flat_map(|&ti| ops::time_embedding::<T>(ti, te)).collect();
        let h1 = a.time1.forward(p, &temb, n);
        let a1 = ops::silu(&h1);
        let emb = a.time2.forward(p, &a1, n);
        let emb_act = ops::silu(&emb);

        let input = ops::concat_channels(x_t, image);
        let mut h = a.conv_in.forward(p, &input);
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for lvl in 0..levels {
            let mut caches = Vec::new();
            for block in &a.down[lvl] {
                let (out, c) = block.forward(p, h, &emb_act);
                caches.push(c);
                h = out;
            }
            down.push(caches);
            skips.push(h.clone());
            if lvl + 1 < levels {
                h = ops::avg_pool2(&h);
            }
        }
        let (h2, mid1) = a.mid1.forward(p, h, &emb_act);
        h = h2;
        let attn = a.attn.as_ref().map(|attn| {
            let (out, c) = attn.forward(p, &h);
            h = out;
            c
        });
        let (h2, mid2) = a.mid2.forward(p, h, &emb_act);
        h = h2;
        let mut up: Vec<Vec<ResCache<T>>> = (0..levels).map(|_| Vec::new()).collect();
        let mut up_split = vec![0; levels];
        for lvl in (0..levels).rev() {
            if lvl + 1 < levels {
                h = ops::upsample2(&h);
            }
            up_split[lvl] = h.channels();
            h = ops::concat_channels(&h, &skips[lvl]);
            for block in &a.up[lvl] {
                let (out, c) = block.forward(p, h, &emb_act);
                up[lvl].push(c);
                h = out;
            }
        }
        let (n_out, gn_out) = a.norm_out.forward(p, &h);
        let a_out = ops::silu_t(&n_out);
        let mut y = a.conv_out.forward(p, &a_out);
        let tanh = match self.kind {
            PredictionType::X => {
                let th = y.map(|v| v.tanh());
                let (mid, half) = (T::of(0.5 * (self.range.0 + self.range.1)), T::of(0.5 * (self.range.1 - self.range.0)));
                y = th.map(|v| mid + half * v);
                Some(th)
            }
            _ => None,
        };
        let trace = Trace {
            batch: n,
            temb,
            h1,
            a1,
            emb,
            emb_act,
            input,
            down,
            mid1,
            attn,
            mid2,
            up,
            up_split,
            gn_out,
            n_out,
            a_out,
            tanh,
        };
        Ok((y, trace))
    }

    /// Accumulates parameter gradients of `<dy, output>` into the gradient
    /// buffer.
    pub fn backward(&mut self, trace: &Trace<T>, dy: &Tensor<T>) {
        let p = &self.params[..];
        let g = &mut self.grads[..];
        let a = &self.arch;
        let n = trace.batch;
        let levels = self.config.levels;
        let mut d_emb_act = vec![T::zero(); n * a.embed_dim];

        let dz = match &trace.tanh {
            Some(th) => {
                let half = T::of(0.5 * (self.range.1 - self.range.0));
                th.zip_map(dy, |t, d| d * half * (T::one() - t * t)).expect("same shape")
            }
            None => dy.clone(),
        };
        let da = a.conv_out.backward(p, g, &trace.a_out, &dz, true).expect("dx requested");
        let dn = ops::silu_backward_t(&trace.n_out, &da);
        let mut dh = a.norm_out.backward(p, g, &trace.gn_out, &dn);

        let mut dskips: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for lvl in 0..levels {
            for (block, c) in a.up[lvl].iter().zip(&trace.up[lvl]).rev() {
                dh = block.backward(p, g, c, &dh, &trace.emb_act, &mut d_emb_act);
            }
            let (dmain, dskip) = ops::split_channels(&dh, trace.up_split[lvl]);
            dskips[lvl] = Some(dskip);
            dh = if lvl + 1 < levels { ops::upsample2_backward(&dmain) } else { dmain };
        }
        dh = a.mid2.backward(p, g, &trace.mid2, &dh, &trace.emb_act, &mut d_emb_act);
        if let (Some(attn), Some(c)) = (&a.attn, &trace.attn) {
            dh = attn.backward(p, g, c, &dh);
        }
        dh = a.mid1.backward(p, g, &trace.mid1, &dh, &trace.emb_act, &mut d_emb_act);
        for lvl in (0..levels).rev() {
            if lvl + 1 < levels {
                dh = ops::avg_pool2_backward(&dh);
            }
            let dskip = dskips[lvl].take().expect("set above");
            for (o, v) in dh.data_mut().iter_mut().zip(dskip.data()) {
                *o += *v;
            }
            for (block, c) in a.down[lvl].iter().zip(&trace.down[lvl]).rev() {
                dh = block.backward(p, g, c, &dh, &trace.emb_act, &mut d_emb_act);
            }
        }
        a.conv_in.backward(p, g, &trace.input, &dh, false);

        let demb = ops::silu_backward(&trace.emb, &d_emb_act);
        let da1 = a.time2.backward(p, g, &trace.a1, &demb, n, true).expect("dx requested");
        let dh1 = ops::silu_backward(&trace.h1, &da1);
        a.time1.backward(p, g, &trace.temb, &dh1, n, false);
    }
}

impl<T: Real> Denoiser<T> for UNet<T> {
    fn prediction_type(&self) -> PredictionType {
        self.kind
    }

    fn predict(&self, x_t: &Tensor<T>, image: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        Ok(self.forward_train(x_t, image, t)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> NetConfig {
        NetConfig { base_width: 8, depth_per_level: 1, levels: 2, attention_at_lowest: true, time_embed_dim: 8 }
    }

    fn inputs(n: usize, channels: usize, size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut x = Tensor::zeros([n, channels, size, size]);
        let mut img = Tensor::zeros([n, 3, size, size]);
        let mut r = rng::keyed(seed, 1, 1);
        rng::fill_normal(&mut r, x.data_mut());
        rng::fill_normal(&mut r, img.data_mut());
        (x, img)
    }

    fn perturbed(kind: PredictionType, seed: u64) -> UNet<f64> {
        let mut net = UNet::<f64>::new(tiny(), 4, kind, (-1.0, 1.0), &mut rng::keyed(seed, 0, 0)).unwrap();
        // Break the zero-initialised head so every path carries gradient.
        let mut r = rng::keyed(seed, 9, 9);
        let mut noise = vec![0.0; net.parameter_count()];
        rng::fill_normal(&mut r, &mut noise);
        for (p, e) in net.params_mut().iter_mut().zip(noise) {
            *p += 0.05 * e;
        }
        net
    }

    #[test]
    fn output_shape_and_range() {
        for cfg in [tiny(), NetConfig { levels: 3, depth_per_level: 2, attention_at_lowest: false, ..tiny() }] {
            for kind in [PredictionType::X, PredictionType::Eps, PredictionType::V] {
                let net = UNet::<f64>::new(cfg, 4, kind, (-1.0, 1.0), &mut rng::keyed(0, 0, 0)).unwrap();
                let (x, img) = inputs(2, 4, 8, 1);
                let y = net.predict(&x, &img, &[0.2, 0.9]).unwrap();
                assert_eq!(y.shape(), x.shape());
            }
        }
        let mut net = perturbed(PredictionType::X, 3);
        for p in net.params_mut() {
            *p *= 40.0;
        }
        let (x, img) = inputs(1, 4, 4, 2);
        let y = net.predict(&x, &img, &[0.5]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        assert!(y.data().iter().any(|v| v.abs() > 0.99));
    }

    #[test]
    fn head_starts_at_zero() {
        let net = UNet::<f32>::new(tiny(), 4, PredictionType::X, (-1.0, 1.0), &mut rng::keyed(0, 0, 0)).unwrap();
        let (x, img) = inputs(1, 4, 8, 2);
        let y = net.predict(&x.cast(), &img.cast(), &[0.3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_changes_output() {
        let net = perturbed(PredictionType::X, 4);
        let (x, img) = inputs(1, 4, 4, 3);
        let a = net.predict(&x, &img, &[0.1]).unwrap();
        let b = net.predict(&x, &img, &[0.9]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, net.predict(&x, &img, &[0.1]).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = UNet::<f64>::new(tiny(), 4, PredictionType::X, (-1.0, 1.0), &mut rng::keyed(0, 0, 0)).unwrap();
        let (x, img) = inputs(1, 4, 4, 3);
        assert!(net.predict(&x, &img, &[0.1, 0.2]).is_err());
        assert!(net.predict(&x, &img, &[1.5]).is_err());
        let (x3, img3) = inputs(1, 3, 4, 3);
        assert!(net.predict(&x3, &img3, &[0.5]).is_err());
        let (x5, img5) = inputs(1, 4, 5, 3);
        assert!(net.predict(&x5, &img5, &[0.5]).is_err());
    }

    #[test]
    fn parameter_gradients_match_differences() {
        for kind in [PredictionType::X, PredictionType::V] {
            let mut net = perturbed(kind, 5);
            let (x, img) = inputs(2, 4, 4, 6);
            let t = [0.3, 0.8];
            let (_, trace) = net.forward_train(&x, &img, &t).unwrap();
            let (proj, _) = inputs(2, 4, 4, 7);
            net.zero_grad();
            net.backward(&trace, &proj);
            let objective = |net: &UNet<f64>| {
                net.predict(&x, &img, &t).unwrap().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let count = net.parameter_count();
            for j in (0..count).step_by(count / 40) {
                let analytic = net.grads()[j];
                let orig = net.params()[j];
                let h = 1e-5;
                net.params_mut()[j] = orig + h;
                let up = objective(&net);
                net.params_mut()[j] = orig - h;
                let down = objective(&net);
                net.params_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-5 * fd.abs().max(1e-3), "param {j}: fd {fd} analytic {analytic}");
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let base = NetConfig::default();
        let count = base.parameter_count(4);
        assert!((1_000_000..=2_000_000).contains(&count), "{count}");
        let wide = NetConfig { base_width: 2 * base.base_width, ..base };
        let ratio = wide.parameter_count(4) as f64 / count as f64;
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
        let net = UNet::<f32>::new(base, 4, PredictionType::X, (-1.0, 1.0), &mut rng::keyed(0, 0, 0)).unwrap();
        assert_eq!(net.parameter_count(), count);
    }
}
