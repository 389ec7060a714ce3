//! Poisson rate coding of static inputs into signed spike trains.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// One timestep of events aligned to a layer's output shape.
///
/// Values are -1, 0 or +1 at the input layer and 0 or +1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeMap {
    pub shape: Vec<usize>,
    pub events: Vec<i8>,
}

impl SpikeMap {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            events: vec![0; shape.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.events.iter().filter(|&&e| e != 0).count()
    }
}

/// Per-image encoder: one generator shared by all pixels.
#[derive(Debug, Clone)]
pub struct EncoderState {
    rng: SplitMix64,
    scale: f64,
}

impl EncoderState {
    /// `scale` is the input magnitude that fires with probability 1.
    pub fn new(seed: u64, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!(
                "encoder scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            rng: SplitMix64::new(seed),
            scale,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Draws one timestep of input events into `out`.
    ///
    /// Exactly one uniform draw per pixel, in row-major order; a pixel emits
    /// its sign when the draw falls below `min(1, |pixel| / scale)`.
    pub fn step_into(&mut self, image: &[f64], out: &mut [i8]) {
        for (x, e) in image.iter().zip(out.iter_mut()) {
            let u = self.rng.next_f64();
            let p = (x.abs() / self.scale).min(1.0);
            *e = if u < p {
                if *x > 0.0 {
                    1
                } else {
                    -1
                }
            } else {
                0
            };
        }
    }
}

pub fn poisson_step(image: &Tensor, state: &mut EncoderState) -> SpikeMap {
    let mut map = SpikeMap::zeros(image.shape());
    state.step_into(image.data(), &mut map.events);
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn full_scale_pixel_always_fires() {
        let mut s = EncoderState::new(1, 0.8).unwrap();
        let x = img(&[0.8, -0.8, 0.0]);
        for _ in 0..1000 {
            assert_eq!(poisson_step(&x, &mut s).events, vec![1, -1, 0]);
        }
    }

    #[test]
    fn long_run_rate_of_negative_pixel() {
        let mut s = EncoderState::new(99, 2.0).unwrap();
        let x = img(&[-1.0]);
        let t = 100_000;
        let sum: i64 = (0..t).map(|_| poisson_step(&x, &mut s).events[0] as i64).sum();
        let mean = sum as f64 / t as f64;
        // 3 sigma of a Bernoulli(0.5) mean over 1e5 draws is ~0.0047.
        assert!((mean + 0.5).abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(EncoderState::new(0, 0.0).is_err());
        assert!(EncoderState::new(0, -1.0).is_err());
    }

    #[test]
    fn over_range_pixels_are_clipped() {
        let mut s = EncoderState::new(5, 1.0).unwrap();
        for _ in 0..100 {
            assert_eq!(poisson_step(&img(&[3.0]), &mut s).events, vec![1]);
        }
    }

    #[test]
    fn same_seed_same_train() {
        let x = img(&[0.3, -0.6, 0.9, 0.1]);
        let mut a = EncoderState::new(42, 1.0).unwrap();
        let mut b = EncoderState::new(42, 1.0).unwrap();
        for _ in 0..200 {
            assert_eq!(poisson_step(&x, &mut a), poisson_step(&x, &mut b));
        }
    }
}
