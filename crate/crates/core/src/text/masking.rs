//! Encoder-side token masking and decoder-side per-row visibility sampling.

use rand::seq::index::sample;
use rand::Rng;

use super::vocab::{is_special, MASK};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, MASK_NEG};

/// One pre-training example.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInstance {
    /// Unmasked ids, position 0 = `[CLS]`.
    pub original: Vec<u32>,
    /// Encoder input: `original` with the selected positions set to `[M]`.
    pub enc_ids: Vec<u32>,
    /// Masked positions, ascending, never 0.
    pub enc_mlm_positions: Vec<usize>,
    /// Original ids at `enc_mlm_positions`.
    pub enc_mlm_labels: Vec<u32>,
    /// Reconstruction targets for positions `1..L`.
    pub dec_labels: Vec<u32>,
    /// Visible columns for each decoder row, ascending.
    pub dec_visible: Vec<Vec<usize>>,
}

impl MaskedInstance {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    /// Distinct non-special ids of the original input.
    pub fn bow_target(&self) -> Vec<u32> {
        bow_target(&self.original)
    }

    pub fn position_mask(&self) -> PositionMask {
        PositionMask::from_visible(&self.dec_visible)
    }

    /// Build a complete instance: encoder masking plus decoder visibility.
    /// Returns `None` (with a warning) when the input is too short.
    pub fn sample<R: Rng + ?Sized>(ids: &[u32], r_enc: f64, r_dec: f64, rng: &mut R) -> Result<Option<Self>> {
        let Some(enc) = mask_for_encoder(ids, r_enc, rng)? else {
            return Ok(None);
        };
        let dec_visible = sample_decoder_visibility(ids.len(), r_dec, rng)?;
        Ok(Some(MaskedInstance {
            original: ids.to_vec(),
            enc_ids: enc.ids,
            enc_mlm_positions: enc.positions,
            enc_mlm_labels: enc.labels,
            dec_labels: ids[1..].to_vec(),
            dec_visible,
        }))
    }
}

/// Sorted distinct non-special ids.
pub fn bow_target(ids: &[u32]) -> Vec<u32> {
    let mut set: Vec<u32> = ids.iter().copied().filter(|&i| !is_special(i)).collect();
    set.sort_unstable();
    set.dedup();
    set
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMask {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub labels: Vec<u32>,
}

/// Number of encoder positions to mask for a sequence of length `len`.
pub fn encoder_mask_count(len: usize, r_enc: f64) -> usize {
    (r_enc * (len - 1) as f64).round() as usize
}

/// Replace `round(r_enc * (L - 1))` uniformly chosen positions from
/// `1..L` with `[M]`.
pub fn mask_for_encoder<R: Rng + ?Sized>(ids: &[u32], r_enc: f64, rng: &mut R) -> Result<Option<EncoderMask>> {
    if !(r_enc > 0.0 && r_enc < 1.0) {
        return Err(Error::config("r_enc", format!("must lie in (0, 1), got {r_enc}")));
    }
    if ids.len() < 3 {
        log::warn!("skipping instance of length {} (need at least 3 positions)", ids.len());
        return Ok(None);
    }
    let count = encoder_mask_count(ids.len(), r_enc);
    let mut positions: Vec<usize> = sample(rng, ids.len() - 1, count).into_iter().map(|p| p + 1).collect();
    positions.sort_unstable();
    let labels = positions.iter().map(|&p| ids[p]).collect();
    let mut masked = ids.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    Ok(Some(EncoderMask { ids: masked, positions, labels }))
}

/// Per-row visible context size for decoder rows of a length-`len` input.
///
/// `ceil((1 - r_dec) * (L - 1))`, capped at `L - 2` so that every row can
/// draw the same number of columns once its own position is excluded.
pub fn decoder_visible_count(len: usize, r_dec: f64) -> usize {
    let want = ((1.0 - r_dec) * (len - 1) as f64).ceil() as usize;
    want.min(len - 2)
}

/// Sample the visible columns of each decoder row.
///
/// Row `i` sees column 0 (for `i >= 1`) plus a uniform sample drawn from
/// `1..L` without `i` itself.
pub fn sample_decoder_visibility<R: Rng + ?Sized>(len: usize, r_dec: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if !(r_dec > 0.0 && r_dec < 1.0) {
        return Err(Error::config("r_dec", format!("must lie in (0, 1), got {r_dec}")));
    }
    if len < 3 {
        return Err(Error::Usage(format!("decoder visibility needs at least 3 positions, got {len}")));
    }
    let count = decoder_visible_count(len, r_dec);
    let mut rows = Vec::with_capacity(len);
    for i in 0..len {
        // Candidates are 1..len minus i, enumerated through a dense index.
        let pool = if i == 0 { len - 1 } else { len - 2 };
        let mut vis: Vec<usize> = sample(rng, pool, count)
            .into_iter()
            .map(|c| {
                let col = c + 1;
                if i >= 1 && col >= i {
                    col + 1
                } else {
                    col
                }
            })
            .collect();
        if i >= 1 {
            vis.push(0);
        }
        vis.sort_unstable();
        rows.push(vis);
    }
    Ok(rows)
}

/// Square visibility matrix of the decoder's attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionMask {
    len: usize,
    visible: Vec<bool>,
}

impl PositionMask {
    pub fn from_visible(rows: &[Vec<usize>]) -> Self {
        let len = rows.len();
        let mut visible = vec![false; len * len];
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                visible[i * len + j] = true;
            }
        }
        PositionMask { len, visible }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.len + j]
    }

    /// Additive form: 0 where visible, the negative sentinel elsewhere.
    pub fn additive<T: Scalar>(&self) -> Vec<T> {
        let neg = T::lit(MASK_NEG);
        self.visible.iter().map(|&v| if v { T::zero() } else { neg }).collect()
    }

    /// Check the structural rules for ratio `r_dec`.
    pub fn validate(&self, r_dec: f64) -> Result<()> {
        let count = decoder_visible_count(self.len, r_dec);
        for i in 0..self.len {
            if self.is_visible(i, i) {
                return Err(Error::Validation(format!("row {i} attends to itself")));
            }
            if i >= 1 && !self.is_visible(i, 0) {
                return Err(Error::Validation(format!("row {i} cannot see position 0")));
            }
            let n = (1..self.len).filter(|&j| self.is_visible(i, j)).count();
            if n != count {
                return Err(Error::Validation(format!("row {i} sees {n} context columns, expected {count}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::text::vocab::CLS;

    fn ids(len: usize) -> Vec<u32> {
        std::iter::once(CLS).chain((0..len as u32 - 1).map(|i| 10 + i)).collect()
    }

    #[test]
    fn encoder_masks_round_of_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_for_encoder(&ids(11), 0.3, &mut rng).unwrap().unwrap();
        assert_eq!(m.positions.len(), 3);
        assert!(!m.positions.contains(&0));
        for (&p, &l) in m.positions.iter().zip(&m.labels) {
            assert_eq!(m.ids[p], MASK);
            assert_eq!(ids(11)[p], l);
        }
    }

    #[test]
    fn tiny_ratio_leaves_input_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_for_encoder(&ids(11), 0.01, &mut rng).unwrap().unwrap();
        assert!(m.positions.is_empty());
        assert_eq!(m.ids, ids(11));
    }

    #[test]
    fn short_inputs_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mask_for_encoder(&[CLS, 7], 0.3, &mut rng).unwrap().is_none());
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let a = mask_for_encoder(&ids(40), 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mask_for_encoder(&ids(40), 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explicit_row_gives_expected_mask_row() {
        // L = 4, r_dec = 0.5, row 2 sampled {1, 3}.
        let rows = vec![vec![1, 2], vec![0, 2, 3], vec![0, 1, 3], vec![0, 1, 2]];
        let m = PositionMask::from_visible(&rows);
        let add: Vec<f64> = m.additive();
        assert_eq!(&add[8..12], &[0.0, 0.0, MASK_NEG, 0.0]);
        m.validate(0.5).unwrap();
    }

    #[test]
    fn visible_count_is_capped() {
        assert_eq!(decoder_visible_count(11, 0.5), 5);
        assert_eq!(decoder_visible_count(3, 0.1), 1);
    }

    #[test]
    fn bow_target_is_distinct_non_special() {
        assert_eq!(bow_target(&[CLS, 9, 7, 9, MASK, 7, 12]), vec![7, 9, 12]);
    }

    proptest! {
        #[test]
        fn encoder_count_matches_ratio(len in 3usize..=512, r in 0.01f64..0.99, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_for_encoder(&ids(len), r, &mut rng).unwrap().unwrap();
            prop_assert_eq!(m.positions.len(), (r * (len - 1) as f64).round() as usize);
            prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn decoder_rows_share_cardinality(len in 3usize..=128, r in 0.01f64..0.99, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = sample_decoder_visibility(len, r, &mut rng).unwrap();
            let mask = PositionMask::from_visible(&rows);
            prop_assert!(mask.validate(r).is_ok());
            let sizes: Vec<usize> = rows.iter().map(|v| v.iter().filter(|&&j| j != 0).count()).collect();
            prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
        }
    }
}
