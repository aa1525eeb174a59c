//! Watermark payloads, the embedding encoder that turns a payload into an
//! adapter scaling vector, and bit-accuracy scoring.

pub mod decoder;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::nn::{GradStore, ParamId, ParamStore};
use crate::{Error, Result};

pub use decoder::{DecoderCache, WatermarkDecoder, WatermarkDecoderConfig};

/// Fixed-length binary payload.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Watermark {
    bits: Vec<u8>,
}

impl Watermark {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::PayloadShape("watermark must have at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::PayloadShape(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    /// Parse an ASCII bit string such as `"1011"`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::PayloadShape("empty watermark string".into()));
        }
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::PayloadShape(format!(
                    "watermark strings use only '0' and '1', found {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    /// Uniform random payload from the given stream.
    pub fn random(l: usize, rng: &mut impl Rng) -> Result<Self> {
        if l < 1 {
            return Err(Error::Domain("watermark length must be at least 1".into()));
        }
        Self::new((0..l).map(|_| rng.random_range(0..=1u8)).collect())
    }

    /// Uniform random payload from a dedicated seeded stream.
    pub fn random_seeded(l: usize, seed: u64) -> Result<Self> {
        Self::random(l, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bit values as 0.0 / 1.0 targets.
    pub fn as_f32(&self) -> Array1<f32> {
        Array1::from_iter(self.bits.iter().map(|&b| b as f32))
    }
}

impl std::fmt::Display for Watermark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Fraction of positions where the two payloads agree.
pub fn bit_accuracy(a: &Watermark, b: &Watermark) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::PayloadShape(format!(
            "cannot compare {}-bit and {}-bit watermarks",
            a.len(),
            b.len()
        )));
    }
    let same = a.bits.iter().zip(&b.bits).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Scaling vector for an arbitrary embedding table:
/// `s = 1 + (1/sqrt(l)) * sum of rows with a set bit`.
///
/// Accumulation runs in f64 per component; tables whose entries and `1/sqrt(l)`
/// are exactly representable therefore encode with no rounding at all.
pub fn encode_with_table(w: &Watermark, table: ArrayView2<f32>) -> Result<Array1<f32>> {
    let (l, r) = table.dim();
    if w.len() != l {
        return Err(Error::PayloadShape(format!(
            "watermark has {} bits but the embedding table has {l} rows",
            w.len()
        )));
    }
    let scale = 1.0 / (l as f64).sqrt();
    let mut s = Array1::<f32>::zeros(r);
    for c in 0..r {
        let mut acc = 0.0f64;
        for (i, &bit) in w.bits.iter().enumerate() {
            if bit == 1 {
                acc += table[[i, c]] as f64;
            }
        }
        s[c] = (1.0 + scale * acc) as f32;
    }
    Ok(s)
}

/// Trainable watermark embedding table in weight-normalized form:
/// row `i` of the effective table is `g[i] * v[i] / |v[i]|`.
pub struct WatermarkEncoder {
    pub v: ParamId,
    pub g: ParamId,
    l: usize,
    r: usize,
}

impl WatermarkEncoder {
    /// Orthogonally initialized rows (requires `l <= r`), unit gains.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, l: usize, r: usize) -> Result<Self> {
        if l < 1 {
            return Err(Error::Config("watermark length must be at least 1".into()));
        }
        if l > r {
            return Err(Error::Config(format!(
                "cannot embed {l} bits at rank {r}: injectivity needs l <= r"
            )));
        }
        let rows = crate::nn::init::orthogonal_rows(rng, l, r);
        let v = store.add("wm_enc.v", rows.into_dyn(), true);
        let g = store.add("wm_enc.g", ndarray::ArrayD::from_elem(vec![l], 1.0f32), true);
        Ok(Self { v, g, l, r })
    }

    pub fn payload_len(&self) -> usize {
        self.l
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// Effective embedding table `(l, r)`.
    pub fn table(&self, store: &ParamStore) -> Array2<f32> {
        let v: ArrayView2<f32> = store.get(self.v).view().into_dimensionality().unwrap();
        let g = store.get(self.g);
        let mut out = Array2::<f32>::zeros((self.l, self.r));
        for i in 0..self.l {
            let row = v.row(i);
            let norm = (row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>()).sqrt() as f32;
            let gain = g[[i]] / norm;
            for c in 0..self.r {
                out[[i, c]] = gain * row[c];
            }
        }
        out
    }

    pub fn encode(&self, store: &ParamStore, w: &Watermark) -> Result<Array1<f32>> {
        encode_with_table(w, self.table(store).view())
    }

    /// Accumulate gradients of the scaling vector into `v` and `g`.
    ///
    /// Only rows with a set bit touch `s`, and each contributes `emb_i /
    /// sqrt(l)`; the weight-norm chain rule splits that into a direction
    /// component for `v` and a magnitude component for `g`.
    pub fn backward(&self, store: &ParamStore, grads: &mut GradStore, w: &Watermark, ds: &Array1<f32>) {
        let v: ArrayView2<f32> = store.get(self.v).view().into_dimensionality().unwrap();
        let g = store.get(self.g);
        let scale = 1.0 / (self.l as f32).sqrt();
        let mut dv = Array2::<f32>::zeros((self.l, self.r));
        let mut dg = Array1::<f32>::zeros(self.l);
        for (i, &bit) in w.bits().iter().enumerate() {
            if bit == 0 {
                continue;
            }
            let row = v.row(i);
            let norm = (row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>()).sqrt() as f32;
            let unit: Array1<f32> = row.mapv(|x| x / norm);
            // d emb_i = scale * ds for set bits.
            let demb: Array1<f32> = ds.mapv(|x| x * scale);
            let along: f32 = demb.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
            dg[i] = along;
            let gain = g[[i]] / norm;
            for c in 0..self.r {
                dv[[i, c]] = gain * (demb[c] - along * unit[c]);
            }
        }
        grads.accumulate(self.v, dv.into_dyn());
        grads.accumulate(self.g, dg.into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn parse_roundtrips_and_rejects_junk() {
        let w = Watermark::parse("1011").unwrap();
        assert_eq!(w.bits(), &[1, 0, 1, 1]);
        assert_eq!(w.to_string(), "1011");
        assert!(Watermark::parse("").is_err());
        assert!(Watermark::parse("10x1").is_err());
        assert!(Watermark::parse("102").is_err());
    }

    #[test]
    fn random_watermark_is_seed_deterministic_and_unbiased() {
        let a = Watermark::random_seeded(8, 42).unwrap();
        let b = Watermark::random_seeded(8, 42).unwrap();
        assert_eq!(a, b);
        assert!(Watermark::random_seeded(0, 1).is_err());

        let mut ones = 0usize;
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let w = Watermark::random_seeded(100, seed).unwrap();
            ones += w.bits().iter().filter(|b| **b == 1).count();
            total += 100;
        }
        let mean = ones as f64 / total as f64;
        assert!((0.49..=0.51).contains(&mean), "bit mean {mean}");
    }

    #[test]
    fn bit_accuracy_examples() {
        let w = Watermark::parse("1010").unwrap();
        assert_eq!(bit_accuracy(&w, &w).unwrap(), 1.0);
        let comp = Watermark::parse("0101").unwrap();
        assert_eq!(bit_accuracy(&w, &comp).unwrap(), 0.0);
        let half = Watermark::parse("1001").unwrap();
        assert_eq!(bit_accuracy(&w, &half).unwrap(), 0.5);
        let short = Watermark::parse("10").unwrap();
        assert!(bit_accuracy(&w, &short).is_err());
    }

    #[test]
    fn encode_hand_example() {
        // l=2, r=2, emb0=(1,0), emb1=(0,2), w=(1,1) -> (1 + 1/sqrt(2), 1 + 2/sqrt(2)).
        let table = arr2(&[[1.0f32, 0.0], [0.0, 2.0]]);
        let w = Watermark::parse("11").unwrap();
        let s = encode_with_table(&w, table.view()).unwrap();
        let rt2 = std::f64::consts::SQRT_2;
        assert!((s[0] as f64 - (1.0 + 1.0 / rt2)).abs() < 1e-7);
        assert!((s[1] as f64 - (1.0 + 2.0 / rt2)).abs() < 1e-7);
    }

    #[test]
    fn zero_watermark_encodes_to_exact_ones() {
        let table = arr2(&[[0.37f32, -1.4, 2.2], [5.1, 0.003, -0.9]]);
        let w = Watermark::parse("00").unwrap();
        let s = encode_with_table(&w, table.view()).unwrap();
        assert!(s.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn single_bit_contributes_one_scaled_row() {
        let table = arr2(&[[0.5f32, -0.25], [0.125, 8.0]]);
        let w = Watermark::parse("01").unwrap();
        let s = encode_with_table(&w, table.view()).unwrap();
        let rt2 = std::f64::consts::SQRT_2;
        assert!((s[0] as f64 - (1.0 + 0.125 / rt2)).abs() < 1e-7);
        assert!((s[1] as f64 - (1.0 + 8.0 / rt2)).abs() < 1e-7);
    }

    #[test]
    fn length_mismatch_is_a_payload_error() {
        let table = arr2(&[[1.0f32, 0.0], [0.0, 1.0]]);
        let w = Watermark::parse("101").unwrap();
        assert!(matches!(
            encode_with_table(&w, table.view()),
            Err(crate::Error::PayloadShape(_))
        ));
    }

    #[test]
    fn encoder_rejects_payload_longer_than_rank() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(WatermarkEncoder::new(&mut store, &mut rng, 9, 8).is_err());
        assert!(WatermarkEncoder::new(&mut store, &mut rng, 8, 8).is_ok());
    }

    #[test]
    fn encoder_init_is_injective_over_all_payloads() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let enc = WatermarkEncoder::new(&mut store, &mut rng, 8, 16).unwrap();
        let mut seen = std::collections::HashSet::new();
        for value in 0..256u32 {
            let bits: Vec<u8> = (0..8).map(|i| ((value >> i) & 1) as u8).collect();
            let w = Watermark::new(bits).unwrap();
            let s = enc.encode(&store, &w).unwrap();
            let key: Vec<u32> = s.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision at payload {value:#010b}");
        }
    }

    #[test]
    fn encoder_table_rows_are_unit_norm_at_init() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let enc = WatermarkEncoder::new(&mut store, &mut rng, 4, 8).unwrap();
        let table = enc.table(&store);
        for i in 0..4 {
            let norm: f64 = table.row(i).iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let enc = WatermarkEncoder::new(&mut store, &mut rng, 3, 4).unwrap();
        let w = Watermark::parse("101").unwrap();
        // Scalar loss: weighted sum of s entries.
        let weights = Array1::from_vec(vec![0.7f32, -1.3, 0.4, 2.0]);
        let mut grads = GradStore::zeroed(&store);
        enc.backward(&store, &mut grads, &w, &weights);

        let h = 1e-3f32;
        for (pid, idx) in [(enc.v, vec![0usize, 1]), (enc.v, vec![2, 3]), (enc.g, vec![0]), (enc.g, vec![2])] {
            let loss = |store: &ParamStore| -> f64 {
                let s = enc.encode(store, &w).unwrap();
                s.iter().zip(weights.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let orig = store.get(pid).clone();
            let mut plus = orig.clone();
            plus[idx.as_slice()] += h;
            *store.get_mut(pid) = plus;
            let lp = loss(&store);
            let mut minus = orig.clone();
            minus[idx.as_slice()] -= h;
            *store.get_mut(pid) = minus;
            let lm = loss(&store);
            *store.get_mut(pid) = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = grads.get(pid).unwrap()[idx.as_slice()] as f64;
            assert!(
                (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4) < 2e-2,
                "param {idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    proptest! {
        #[test]
        fn disjoint_additivity_is_exact_on_dyadic_tables(
            seed in 0u64..1000,
            mask in 0u16..,
        ) {
            // l = 16 gives 1/sqrt(l) = 1/4; entries are multiples of 2^-8.
            // Every encode step is then exact, so additivity must be bitwise.
            let l = 16usize;
            let r = 8usize;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table = Array2::from_shape_fn((l, r), |_| {
                (rng.random_range(-256i32..=256) as f32) / 256.0
            });
            let bits_a: Vec<u8> = (0..l).map(|i| ((mask >> i) & 1) as u8).collect();
            let bits_b: Vec<u8> = bits_a.iter().map(|b| 1 - b).collect();
            let w_a = Watermark::new(bits_a).unwrap();
            let w_b = Watermark::new(bits_b).unwrap();
            let w_union = Watermark::new(vec![1u8; l]).unwrap();

            let sa = encode_with_table(&w_a, table.view()).unwrap();
            let sb = encode_with_table(&w_b, table.view()).unwrap();
            let su = encode_with_table(&w_union, table.view()).unwrap();
            for c in 0..r {
                let lhs = su[c] - 1.0;
                let rhs = (sa[c] - 1.0) + (sb[c] - 1.0);
                prop_assert_eq!(lhs.to_bits(), rhs.to_bits(), "component {}", c);
            }
        }

        #[test]
        fn disjoint_additivity_within_float_noise_generally(
            seed in 0u64..1000,
            mask in 0u32..,
        ) {
            let l = 24usize;
            let r = 6usize;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table = Array2::from_shape_fn((l, r), |_| rng.random_range(-1.0f32..1.0));
            let bits_a: Vec<u8> = (0..l).map(|i| ((mask >> i) & 1) as u8).collect();
            let bits_b: Vec<u8> = bits_a.iter().map(|b| 1 - b).collect();
            let w_a = Watermark::new(bits_a).unwrap();
            let w_b = Watermark::new(bits_b).unwrap();
            let w_union = Watermark::new(vec![1u8; l]).unwrap();
            let sa = encode_with_table(&w_a, table.view()).unwrap();
            let sb = encode_with_table(&w_b, table.view()).unwrap();
            let su = encode_with_table(&w_union, table.view()).unwrap();
            for c in 0..r {
                let lhs = (su[c] - 1.0) as f64;
                let rhs = ((sa[c] - 1.0) + (sb[c] - 1.0)) as f64;
                prop_assert!((lhs - rhs).abs() < 1e-6);
            }
        }

        #[test]
        fn bit_accuracy_is_symmetric(a_bits in proptest::collection::vec(0u8..=1, 1..40), seed in 0u64..100) {
            let l = a_bits.len();
            let a = Watermark::new(a_bits).unwrap();
            let b = Watermark::random_seeded(l, seed).unwrap();
            prop_assert_eq!(bit_accuracy(&a, &b).unwrap(), bit_accuracy(&b, &a).unwrap());
        }
    }
}
