//! The denoising network: a small attention UNet with hand-written
//! backpropagation over a flat parameter vector.

mod ops;
mod unet;

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

pub use ops::{time_embedding, Attention, Conv, GroupNorm, Linear};
pub use unet::{NetConfig, Trace, UNet, IMAGE_CHANNELS};

use crate::rng::Rng;
use crate::tensor::Real;

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn get<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with variance `1 / fan_in`.
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub slot: Slot,
    pub init: Init,
}

/// Declares parameters in order; offsets are assigned sequentially.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    params: Vec<ParamInfo>,
    len: usize,
}

impl ParamLayout {
    pub fn declare(&mut self, name: impl Into<String>, len: usize, init: Init) -> Slot {
        let slot = Slot { offset: self.len, len };
        self.params.push(ParamInfo { name: name.into(), slot, init });
        self.len += len;
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn initialise<T: Real>(&self, rng: &mut Rng) -> Vec<T> {
        let mut values = alloc::vec![T::zero(); self.len];
        for p in &self.params {
            let dst = p.slot.get_mut(&mut values);
            match p.init {
                Init::Zeros => {}
                Init::Ones => dst.fill(T::one()),
                Init::FanIn(fan_in) => {
                    let bound = libm::sqrt(3.0 / fan_in.max(1) as f64);
                    for v in dst {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
            }
        }
        values
    }
}
