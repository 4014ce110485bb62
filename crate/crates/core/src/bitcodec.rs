//! Label encodings: analog bits, one-hot and an RGB lattice palette.
//!
//! Analog bits store class `c` as its most-significant-bit-first binary
//! expansion with `0 -> -1` and `1 -> +1`, and are decoded by thresholding
//! each channel at zero (`>= 0` reads as a one bit).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{Real, Tensor};

/// Largest number of bits handled by the codecs.
pub const MAX_BITS: u32 = 8;
/// Number of colours in the RGB lattice palette.
pub const RGB_PALETTE_SIZE: u32 = 64;

pub fn encode_bits(class: u32, n_bits: u32) -> Result<Vec<f64>> {
    if n_bits == 0 || n_bits > MAX_BITS {
        return Err(Error::InvalidArgument(alloc::format!("n_bits {n_bits} not in 1..=8")));
    }
    let limit = 1u32 << n_bits;
    if class >= limit {
        return Err(Error::ClassOutOfRange { index: class, limit });
    }
    Ok((0..n_bits)
        .map(|i| if (class >> (n_bits - 1 - i)) & 1 == 1 { 1.0 } else { -1.0 })
        .collect())
}

pub fn decode_bits<T: Real>(activations: &[T]) -> Result<u32> {
    let mut class = 0u32;
    for &a in activations {
        if a.is_nan() {
            return Err(Error::InvalidActivation(f64::NAN));
        }
        class = (class << 1) | u32::from(a >= T::zero());
    }
    Ok(class)
}

/// Distribution over all `2^n_bits` classes implied by continuous bit
/// activations, treating each bit independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, class: u32) -> f64 {
        self.0[class as usize]
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }
}

pub fn class_probabilities(activations: &[f64]) -> Result<ClassDistribution> {
    let n_bits = activations.len() as u32;
    if n_bits == 0 || n_bits > MAX_BITS {
        return Err(Error::InvalidArgument(alloc::format!("n_bits {n_bits} not in 1..=8")));
    }
    if let Some(&bad) = activations.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(Error::InvalidActivation(bad));
    }
    // p(bit = +1) and p(bit = -1) per position.
    let per_bit: Vec<(f64, f64)> = activations
        .iter()
        .map(|&a| (1.0 - (1.0 - a).abs() / 2.0, 1.0 - (-1.0 - a).abs() / 2.0))
        .collect();
    let probs = (0..1u32 << n_bits)
        .map(|class| {
            per_bit.iter().enumerate().fold(1.0, |acc, (i, &(p_one, p_zero))| {
                let bit = (class >> (n_bits - 1 - i as u32)) & 1;
                acc * if bit == 1 { p_one } else { p_zero }
            })
        })
        .collect();
    Ok(ClassDistribution(probs))
}

/// One-hot vector for `class`, before any rescaling.
pub fn encode_onehot(class: u32, n_classes: u32) -> Result<Vec<f64>> {
    if class >= n_classes {
        return Err(Error::ClassOutOfRange { index: class, limit: n_classes });
    }
    let mut v = vec![0.0; n_classes as usize];
    v[class as usize] = 1.0;
    Ok(v)
}

/// Affine constants `(hot, cold)` that give one-hot channels zero mean and
/// unit variance under uniformly distributed classes.
pub fn onehot_levels(n_classes: u32) -> (f64, f64) {
    let k = f64::from(n_classes);
    let mean = 1.0 / k;
    let std = libm::sqrt(mean * (1.0 - mean));
    ((1.0 - mean) / std, -mean / std)
}

pub fn rgb_color(class: u32) -> Result<[f64; 3]> {
    if class >= RGB_PALETTE_SIZE {
        return Err(Error::ClassOutOfRange { index: class, limit: RGB_PALETTE_SIZE });
    }
    let level = |v: u32| -1.0 + 2.0 * f64::from(v) / 3.0;
    Ok([level(class / 16), level((class / 4) % 4), level(class % 4)])
}

pub fn encode_rgb(class: u32, n_classes: u32) -> Result<[f64; 3]> {
    if n_classes > RGB_PALETTE_SIZE {
        return Err(Error::Unsupported(alloc::format!(
            "rgb palette holds {RGB_PALETTE_SIZE} colours, {n_classes} requested"
        )));
    }
    if class >= n_classes {
        return Err(Error::ClassOutOfRange { index: class, limit: n_classes });
    }
    rgb_color(class)
}

/// Nearest palette colour among the first `n_classes`, lowest index on ties.
pub fn decode_rgb<T: Real>(rgb: &[T], n_classes: u32) -> Result<u32> {
    if rgb.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidActivation(f64::NAN));
    }
    let mut best = (0u32, f64::INFINITY);
    for class in 0..n_classes.min(RGB_PALETTE_SIZE) {
        let color = rgb_color(class)?;
        let d: f64 = color.iter().zip(rgb).map(|(c, v)| (c - v.as_f64()) * (c - v.as_f64())).sum();
        if d < best.1 {
            best = (class, d);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    #[serde(alias = "bits")]
    AnalogBits,
    #[serde(alias = "onehot")]
    OneHot,
    Rgb,
}

/// A label encoding together with the number of classes it represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Encoding {
    pub kind: EncodingKind,
    pub n_classes: u32,
}

impl Encoding {
    pub fn new(kind: EncodingKind, n_classes: u32) -> Result<Self> {
        let enc = Self { kind, n_classes };
        enc.validate()?;
        Ok(enc)
    }

    pub fn analog_bits(n_bits: u32) -> Result<Self> {
        if n_bits == 0 || n_bits > MAX_BITS {
            return Err(Error::InvalidArgument(alloc::format!("n_bits {n_bits} not in 1..=8")));
        }
        Self::new(EncodingKind::AnalogBits, 1 << n_bits)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes;
        match self.kind {
            EncodingKind::AnalogBits if !n.is_power_of_two() || !(2..=1 << MAX_BITS).contains(&n) => {
                Err(Error::Unsupported(alloc::format!("analog bits need a power of two classes, got {n}")))
            }
            EncodingKind::OneHot if n < 2 => {
                Err(Error::Unsupported(alloc::format!("one-hot needs at least 2 classes, got {n}")))
            }
            EncodingKind::Rgb if n > RGB_PALETTE_SIZE || n == 0 => Err(Error::Unsupported(
                alloc::format!("rgb palette holds {RGB_PALETTE_SIZE} colours, {n} requested"),
            )),
            _ => Ok(()),
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            EncodingKind::AnalogBits => self.n_classes.trailing_zeros() as usize,
            EncodingKind::OneHot => self.n_classes as usize,
            EncodingKind::Rgb => 3,
        }
    }

    /// Closed interval every clean encoded value lies in.
    pub fn value_range(&self) -> (f64, f64) {
        match self.kind {
            EncodingKind::OneHot => {
                let (hot, cold) = onehot_levels(self.n_classes);
                (cold, hot)
            }
            _ => (-1.0, 1.0),
        }
    }

    pub fn encode_into<T: Real>(&self, class: u32, out: &mut [T]) -> Result<()> {
        if class >= self.n_classes {
            return Err(Error::ClassOutOfRange { index: class, limit: self.n_classes });
        }
        match self.kind {
            EncodingKind::AnalogBits => {
                for (o, v) in out.iter_mut().zip(encode_bits(class, self.channels() as u32)?) {
                    *o = T::of(v);
                }
            }
            EncodingKind::OneHot => {
                let (hot, cold) = onehot_levels(self.n_classes);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = T::of(if i == class as usize { hot } else { cold });
                }
            }
            EncodingKind::Rgb => {
                for (o, v) in out.iter_mut().zip(encode_rgb(class, self.n_classes)?) {
                    *o = T::of(v);
                }
            }
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, class: u32) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.channels()];
        self.encode_into(class, &mut out)?;
        Ok(out)
    }

    pub fn decode<T: Real>(&self, values: &[T]) -> Result<u32> {
        match self.kind {
            EncodingKind::AnalogBits => decode_bits(values),
            EncodingKind::OneHot => {
                if values.iter().any(|v| v.is_nan()) {
                    return Err(Error::InvalidActivation(f64::NAN));
                }
                let mut best = 0;
                for (i, v) in values.iter().enumerate() {
                    if *v > values[best] {
                        best = i;
                    }
                }
                Ok(best as u32)
            }
            EncodingKind::Rgb => decode_rgb(values, self.n_classes),
        }
    }
}

/// Encodes a label map into a single-item planar tensor `[1, channels, h, w]`.
pub fn encode_map<T: Real>(labels: &LabelMap, enc: &Encoding) -> Result<Tensor<T>> {
    let (h, w, c) = (labels.height(), labels.width(), enc.channels());
    let mut out = Tensor::zeros([1, c, h, w]);
    let plane = h * w;
    let mut pixel = vec![T::zero(); c];
    let data = out.data_mut();
    for (p, &label) in labels.as_slice().iter().enumerate() {
        enc.encode_into(label, &mut pixel)?;
        for (ch, &v) in pixel.iter().enumerate() {
            data[ch * plane + p] = v;
        }
    }
    Ok(out)
}

/// Decodes batch item `item` of a planar tensor back to labels.
pub fn decode_map<T: Real>(tensor: &Tensor<T>, item: usize, enc: &Encoding) -> Result<LabelMap> {
    let [_, c, h, w] = tensor.shape();
    if c != enc.channels() {
        return Err(Error::ShapeMismatch { expected: [1, enc.channels(), h, w], got: tensor.shape() });
    }
    let plane = h * w;
    let data = tensor.item(item);
    let mut pixel = vec![T::zero(); c];
    let mut labels = Vec::with_capacity(plane);
    for p in 0..plane {
        for (ch, v) in pixel.iter_mut().enumerate() {
            *v = data[ch * plane + p];
        }
        labels.push(enc.decode(&pixel)?);
    }
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn encode_bits_examples() {
        assert_eq!(encode_bits(0, 4).unwrap(), vec![-1.0; 4]);
        assert_eq!(encode_bits(15, 4).unwrap(), vec![1.0; 4]);
        assert_eq!(encode_bits(5, 6).unwrap(), vec![-1.0, -1.0, -1.0, 1.0, -1.0, 1.0]);
        assert!(matches!(encode_bits(16, 4), Err(Error::ClassOutOfRange { index: 16, limit: 16 })));
    }

    #[test]
    fn decode_bits_examples() {
        assert_eq!(decode_bits(&[0.9, -0.3, 0.2, -0.1]).unwrap(), 10);
        assert_eq!(decode_bits(&[0.0f64; 4]).unwrap(), 15);
        assert!(decode_bits(&[0.1, f64::NAN]).is_err());
        for n in 1..=8 {
            for c in 0..1u32 << n {
                assert_eq!(decode_bits(&encode_bits(c, n).unwrap()).unwrap(), c);
            }
        }
    }

    #[test]
    fn probabilities_of_uncertain_bits() {
        let d = class_probabilities(&[0.0; 4]).unwrap();
        assert!(d.probs().iter().all(|&p| p == 1.0 / 16.0));

        let d = class_probabilities(&[1.0, 1.0, 1.0, 0.0]).unwrap();
        for (c, &p) in d.probs().iter().enumerate() {
            let expected = if c == 0b1111 || c == 0b1110 { 0.5 } else { 0.0 };
            assert_eq!(p, expected, "class {c}");
        }

        let d = class_probabilities(&encode_bits(9, 4).unwrap()).unwrap();
        assert_eq!(d.prob(9), 1.0);
        assert_eq!(d.probs().iter().sum::<f64>(), 1.0);
        assert!(class_probabilities(&[1.5, 0.0]).is_err());
    }

    // Independent enumeration: p(y) = prod over bits of p(bit_i = y_i) with
    // p(+1) = (1 + a) / 2.
    fn enumerate_probs(a: &[f64]) -> Vec<f64> {
        let n = a.len();
        (0..1usize << n)
            .map(|y| {
                let mut p = 1.0;
                for (i, &ai) in a.iter().enumerate() {
                    let one = (y >> (n - 1 - i)) & 1 == 1;
                    p *= if one { (1.0 + ai) / 2.0 } else { (1.0 - ai) / 2.0 };
                }
                p
            })
            .collect()
    }

    #[test]
    fn probabilities_match_enumeration_and_normalise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 1..=8 {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let d = class_probabilities(&a).unwrap();
                assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if n <= 6 {
                    for (p, q) in d.probs().iter().zip(enumerate_probs(&a)) {
                        assert!((p - q).abs() < 1e-15);
                    }
                }
                if a.iter().all(|&x| x != 0.0) {
                    assert_eq!(d.argmax(), decode_bits(&a).unwrap());
                }
            }
        }
    }

    #[test]
    fn hamming_midpoints_split_mass() {
        let n = 6;
        for (a, b) in [(0u32, 63u32), (5, 7), (12, 44), (21, 21)] {
            let ea = encode_bits(a, n).unwrap();
            let eb = encode_bits(b, n).unwrap();
            let mid: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| (x + y) / 2.0).collect();
            let k = (a ^ b).count_ones();
            let d = class_probabilities(&mid).unwrap();
            let expected = 1.0 / f64::from(1u32 << k);
            let nonzero: Vec<_> = d.probs().iter().filter(|&&p| p > 0.0).collect();
            assert_eq!(nonzero.len(), 1 << k);
            assert!(nonzero.iter().all(|&&p| p == expected));
        }
    }

    #[test]
    fn onehot_rescale_constants() {
        assert_eq!(encode_onehot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        for k in [2u32, 4, 16, 64] {
            let (hot, cold) = onehot_levels(k);
            let kf = f64::from(k);
            // Closed form of a one-hot channel: mean 1/k, variance (1/k)(1 - 1/k).
            let mean = (hot + (kf - 1.0) * cold) / kf;
            let var = (hot * hot + (kf - 1.0) * cold * cold) / kf - mean * mean;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
            assert!((hot - (kf - 1.0).sqrt()).abs() < 1e-12);
            let enc = Encoding::new(EncodingKind::OneHot, k).unwrap();
            for c in 0..k {
                let v: Vec<f64> = enc.encode(c).unwrap();
                assert_eq!(enc.decode(&v).unwrap(), c);
            }
        }
    }

    #[test]
    fn rgb_palette_is_distinct_and_spread() {
        let colors: Vec<_> = (0..64).map(|c| encode_rgb(c, 64).unwrap()).collect();
        let mut min_d = f64::INFINITY;
        for i in 0..64 {
            for j in i + 1..64 {
                let d: f64 =
                    colors[i].iter().zip(&colors[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                min_d = min_d.min(d);
            }
            assert_eq!(decode_rgb(&colors[i], 64).unwrap(), i as u32);
        }
        // Lattice spacing on a four-level axis spanning [-1, 1].
        assert!((min_d - 2.0 / 3.0).abs() < 1e-12);
        assert!(min_d > 0.2);
        assert!(encode_rgb(3, 65).is_err());
    }

    #[test]
    fn encoding_validation() {
        assert!(Encoding::new(EncodingKind::AnalogBits, 12).is_err());
        assert_eq!(Encoding::analog_bits(4).unwrap().channels(), 4);
        assert_eq!(Encoding::new(EncodingKind::OneHot, 16).unwrap().channels(), 16);
        assert_eq!(Encoding::new(EncodingKind::Rgb, 16).unwrap().channels(), 3);
        assert!(Encoding::new(EncodingKind::Rgb, 65).is_err());
    }

    #[test]
    fn map_round_trips() {
        let one = LabelMap::new(1, 1, vec![5]).unwrap();
        let t: Tensor<f32> = encode_map(&one, &Encoding::analog_bits(6).unwrap()).unwrap();
        assert_eq!(t.data(), &[-1.0, -1.0, -1.0, 1.0, -1.0, 1.0]);

        let zeros = LabelMap::filled(7, 5, 0);
        let enc = Encoding::analog_bits(4).unwrap();
        assert_eq!(decode_map(&encode_map::<f32>(&zeros, &enc).unwrap(), 0, &enc).unwrap(), zeros);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let labels = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..16)).collect()).unwrap();
        for kind in [EncodingKind::AnalogBits, EncodingKind::OneHot, EncodingKind::Rgb] {
            let enc = Encoding::new(kind, 16).unwrap();
            let t: Tensor<f32> = encode_map(&labels, &enc).unwrap();
            assert_eq!(t.shape(), [1, enc.channels(), 16, 16]);
            assert_eq!(decode_map(&t, 0, &enc).unwrap(), labels);
        }
        let overflow = LabelMap::new(1, 2, vec![3, 16]).unwrap();
        assert!(encode_map::<f32>(&overflow, &enc).is_err());
    }
}
