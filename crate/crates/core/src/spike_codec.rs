//! Re-encoding integer activations as binary spikes over `D` virtual
//! timesteps, and the two-path check that a convolution cannot tell the
//! difference.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;

use crate::conv::{conv2d_in, fold_bn_if_present, ConvSpec, Scalar};
use crate::error::{Error, Result};
use crate::neuron::SpikeTensor;
use crate::tensor::Shape4;

pub const TRAIN_MAGIC: &[u8; 4] = b"SFB1";

/// Binary spikes shaped `(t, d, c, h, w)`; stored slot-major so each
/// `(t, d)` slot is a contiguous `(c, h, w)` frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinarySpikeTrain {
    frame: Shape4,
    slots: usize,
    bits: Vec<u8>,
}

impl BinarySpikeTrain {
    /// `frame` gives `(t, c, h, w)`; `slots` is `D`.
    pub fn new(frame: Shape4, slots: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != frame.len() * slots {
            return Err(Error::dims("binary train length", &[frame.len() * slots], &[bits.len()]));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Codec(format!("non-binary value {} at element {i}", bits[i])));
        }
        Ok(BinarySpikeTrain { frame, slots, bits })
    }

    pub fn timesteps(&self) -> usize {
        self.frame.t
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// `(t, c, h, w)` of the real-timestep tensor this train encodes.
    pub fn frame_shape(&self) -> Shape4 {
        self.frame
    }

    /// `[t, d, c, h, w]`.
    pub fn dims(&self) -> [usize; 5] {
        [self.frame.t, self.slots, self.frame.c, self.frame.h, self.frame.w]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// One `(c, h, w)` binary frame.
    pub fn slot(&self, t: usize, d: usize) -> &[u8] {
        let n = self.frame.frame_len();
        let start = (t * self.slots + d) * n;
        &self.bits[start..start + n]
    }

    pub fn spike_count(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    /// Writes `SFB1`: magic, `(t, d, c, h, w)` as LE `u32`, then bits packed
    /// LSB-first, iterating `t, c, h, w, d` with `d` fastest.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TRAIN_MAGIC)?;
        for d in self.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Domain(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let n = self.frame.frame_len();
        let mut packed = vec![0u8; (self.bits.len()).div_ceil(8)];
        let mut bit = 0usize;
        for t in 0..self.frame.t {
            for i in 0..n {
                for d in 0..self.slots {
                    if self.bits[(t * self.slots + d) * n + i] == 1 {
                        packed[bit / 8] |= 1 << (bit % 8);
                    }
                    bit += 1;
                }
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|_| Error::parse(0, "truncated SFB1 header"))?;
        if &header[..4] != TRAIN_MAGIC {
            return Err(Error::parse(0, "bad magic, expected SFB1"));
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (t, d, c, h, w) = (dim(0), dim(1), dim(2), dim(3), dim(4));
        let frame = Shape4::new(t, c, h, w);
        let total = frame.len() * d;
        let mut packed = vec![0u8; total.div_ceil(8)];
        r.read_exact(&mut packed)
            .map_err(|_| Error::parse(24, "truncated SFB1 payload"))?;
        let n = frame.frame_len();
        let mut bits = vec![0u8; total];
        let mut bit = 0usize;
        for ti in 0..t {
            for i in 0..n {
                for di in 0..d {
                    bits[(ti * d + di) * n + i] = (packed[bit / 8] >> (bit % 8)) & 1;
                    bit += 1;
                }
            }
        }
        BinarySpikeTrain::new(frame, d, bits)
    }
}

/// Leading-ones expansion: a value `v` fills slots `0..v`.
pub fn expand(s: &SpikeTensor) -> Result<BinarySpikeTrain> {
    expand_with(s, |v, slots, out| {
        for (d, o) in out.iter_mut().enumerate().take(slots) {
            *o = u8::from((d as u32) < v);
        }
    })
}

/// Places each value's ones in uniformly random distinct slots.
pub fn expand_shuffled<R: Rng>(s: &SpikeTensor, rng: &mut R) -> Result<BinarySpikeTrain> {
    expand_with(s, |v, slots, out| {
        out.iter_mut().for_each(|o| *o = 0);
        for i in sample(rng, slots, v as usize) {
            out[i] = 1;
        }
    })
}

/// Expansion under a caller-supplied slot allocation. `place(v, D, slots)`
/// must set exactly `v` of the `D` entries to one.
pub fn expand_with(s: &SpikeTensor, mut place: impl FnMut(u32, usize, &mut [u8])) -> Result<BinarySpikeTrain> {
    let shape = s.shape();
    let d = s.ceiling() as usize;
    let n = shape.frame_len();
    let mut bits = vec![0u8; shape.len() * d];
    let mut scratch = vec![0u8; d];
    for t in 0..shape.t {
        for i in 0..n {
            let v = s.values()[t * n + i];
            if v as usize > d {
                return Err(Error::Codec(format!("value {v} exceeds ceiling {d}")));
            }
            place(v, d, &mut scratch);
            let ones: u32 = scratch.iter().map(|&b| b as u32).sum();
            if ones != v || scratch.iter().any(|&b| b > 1) {
                return Err(Error::Codec(format!("slot policy placed {ones} ones for value {v}")));
            }
            for (di, &b) in scratch.iter().enumerate() {
                bits[(t * d + di) * n + i] = b;
            }
        }
    }
    BinarySpikeTrain::new(shape, d, bits)
}

/// Sums over the virtual axis; the result has ceiling `D`.
pub fn collapse(b: &BinarySpikeTrain) -> Result<SpikeTensor> {
    let frame = b.frame_shape();
    let n = frame.frame_len();
    let mut values = vec![0u32; frame.len()];
    for t in 0..frame.t {
        for d in 0..b.slots() {
            for (v, &bit) in values[t * n..(t + 1) * n].iter_mut().zip(b.slot(t, d)) {
                if bit > 1 {
                    return Err(Error::Codec(format!("non-binary value {bit}")));
                }
                *v += bit as u32;
            }
        }
    }
    SpikeTensor::new(frame, values, b.slots().max(1) as u32)
}

/// Arithmetic used by [`verify_equivalence_in`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arithmetic {
    /// Exact; weights and bias must be integral.
    Int64,
    Float32,
    Float64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub pass: bool,
    pub arithmetic: Arithmetic,
}

/// Two-path check in 32-bit floats: one conv on the integer tensor versus
/// the sum of `D` convs on the binary slots.
pub fn verify_equivalence(spec: &ConvSpec, s: &SpikeTensor, tol: f64) -> Result<EquivalenceReport> {
    verify_equivalence_in(spec, s, tol, Arithmetic::Float32)
}

pub fn verify_equivalence_in(spec: &ConvSpec, s: &SpikeTensor, tol: f64, arithmetic: Arithmetic) -> Result<EquivalenceReport> {
    let spec = fold_bn_if_present(spec)?;
    let max_abs_diff = match arithmetic {
        Arithmetic::Float32 => two_path_diff::<f32>(&spec, s)?,
        Arithmetic::Float64 => two_path_diff::<f64>(&spec, s)?,
        Arithmetic::Int64 => {
            let integral = |v: &f64| v.fract() == 0.0 && v.abs() < (1u64 << 52) as f64;
            if !spec.weights.iter().all(integral) || !spec.bias.iter().flatten().all(integral) {
                return Err(Error::Domain("integer arithmetic needs integral weights and bias".into()));
            }
            two_path_diff::<i64>(&spec, s)?
        }
    };
    Ok(EquivalenceReport {
        max_abs_diff,
        pass: max_abs_diff <= tol,
        arithmetic,
    })
}

fn two_path_diff<S: Scalar>(spec: &ConvSpec, s: &SpikeTensor) -> Result<f64> {
    let shape = s.shape();
    let ints: Vec<S> = s.values().iter().map(|&v| S::from_f64(v as f64)).collect();
    let (direct, out_shape) = conv2d_in(&ints, shape, spec)?;

    // path B: one bias-free conv per virtual slot, then the bias once
    let bias_free = ConvSpec {
        bias: None,
        ..spec.clone()
    };
    let train = expand(s)?;
    let single = Shape4::new(1, shape.c, shape.h, shape.w);
    let fo = out_shape.frame_len();
    let plane = out_shape.plane_len();
    let mut summed = vec![S::default(); out_shape.len()];
    for t in 0..shape.t {
        let acc = &mut summed[t * fo..(t + 1) * fo];
        for d in 0..train.slots() {
            let slot: Vec<S> = train.slot(t, d).iter().map(|&b| S::from_f64(b as f64)).collect();
            let (part, _) = conv2d_in(&slot, single, &bias_free)?;
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        if let Some(b) = &spec.bias {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += S::from_f64(b[i / plane]);
            }
        }
    }
    Ok(direct
        .iter()
        .zip(&summed)
        .fold(0.0, |m, (a, b)| m.max((a.to_f64() - b.to_f64()).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expands_worked_example() {
        let s = SpikeTensor::new((3, 1, 1, 1), vec![1, 2, 1], 2).unwrap();
        let b = expand(&s).unwrap();
        assert_eq!(b.dims(), [3, 2, 1, 1, 1]);
        let slots: Vec<[u8; 2]> = (0..3).map(|t| [b.slot(t, 0)[0], b.slot(t, 1)[0]]).collect();
        assert_eq!(slots, vec![[1, 0], [1, 1], [1, 0]]);
    }

    #[test]
    fn zero_and_full_trains() {
        let z = SpikeTensor::zeros((2, 3, 2, 2), 4).unwrap();
        assert_eq!(expand(&z).unwrap().spike_count(), 0);
        let ones = BinarySpikeTrain::new(Shape4::new(1, 2, 2, 2), 3, vec![1; 24]).unwrap();
        assert!(collapse(&ones).unwrap().values().iter().all(|&v| v == 3));
        let single = SpikeTensor::new((1, 1, 1, 3), vec![0, 1, 1], 1).unwrap();
        assert_eq!(collapse(&expand(&single).unwrap()).unwrap(), single);
    }

    #[test]
    fn rejects_non_binary_train() {
        assert!(matches!(
            BinarySpikeTrain::new(Shape4::new(1, 1, 1, 1), 2, vec![1, 2]),
            Err(Error::Codec(_))
        ));
    }

    #[test]
    fn hand_expanded_one_by_one() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap().with_weights(vec![3.0]).unwrap();
        let s = SpikeTensor::new((1, 1, 1, 1), vec![2], 2).unwrap();
        let r = verify_equivalence_in(&spec, &s, 0.0, Arithmetic::Int64).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn zero_weights_agree_exactly() {
        let spec = ConvSpec::new(2, 3, 3, 1, 1, 1).unwrap();
        let s = SpikeTensor::new((1, 2, 3, 3), (0..18).map(|i| i % 3).collect(), 2).unwrap();
        assert_eq!(verify_equivalence(&spec, &s, 0.0).unwrap().max_abs_diff, 0.0);
    }

    #[test]
    fn integer_path_rejects_fractional_weights() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0, 1).unwrap().with_weights(vec![0.5]).unwrap();
        let s = SpikeTensor::zeros((1, 1, 1, 1), 1).unwrap();
        assert!(verify_equivalence_in(&spec, &s, 0.0, Arithmetic::Int64).is_err());
    }

    #[test]
    fn sfb1_roundtrip_and_layout() {
        // one neuron, T = 1, D = 3, value 2 -> bits d0 = 1, d1 = 1, d2 = 0
        let s = SpikeTensor::new((1, 1, 1, 1), vec![2], 3).unwrap();
        let b = expand(&s).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SFB1");
        assert_eq!(buf[24], 0b011);
        assert_eq!(BinarySpikeTrain::read_from(buf.as_slice()).unwrap(), b);
    }

    proptest! {
        #[test]
        fn roundtrip_and_slot_sums(values in prop::collection::vec(0u32..=4, 24), seed in any::<u64>()) {
            let s = SpikeTensor::new((2, 3, 2, 2), values, 4).unwrap();
            let b = expand(&s).unwrap();
            prop_assert_eq!(b.spike_count(), s.spike_count());
            prop_assert_eq!(collapse(&b).unwrap(), s.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shuffled = expand_shuffled(&s, &mut rng).unwrap();
            prop_assert_eq!(collapse(&shuffled).unwrap(), s.clone());
            let mut buf = Vec::new();
            shuffled.write_to(&mut buf).unwrap();
            prop_assert_eq!(BinarySpikeTrain::read_from(buf.as_slice()).unwrap(), shuffled);
        }
    }
}
