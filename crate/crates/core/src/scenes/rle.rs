//! Counted run-length coding of binary masks: `[start_value (0|1), run_1,
//! run_2, ...]` over row-major pixels, runs alternating from `start_value`
//! and summing to the pixel count.

use crate::mask::Mask;
use crate::{CoreError, Result};

pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut out = Vec::new();
    let mut iter = mask.iter();
    let Some(&first) = iter.next() else {
        return vec![0];
    };
    out.push(u32::from(first));
    let mut current = first;
    let mut run: u32 = 1;
    for &v in iter {
        if v == current {
            run += 1;
        } else {
            out.push(run);
            current = v;
            run = 1;
        }
    }
    out.push(run);
    out
}

pub fn rle_decode(rle: &[u32], expected_len: usize) -> Result<Vec<bool>> {
    if rle.len() < 2 {
        return Err(CoreError::RleDecode(format!(
            "stream too short ({} values)",
            rle.len()
        )));
    }
    let start = match rle[0] {
        0 => false,
        1 => true,
        other => {
            return Err(CoreError::RleDecode(format!(
                "start value must be 0 or 1, got {other}"
            )))
        }
    };
    let mut out = Vec::with_capacity(expected_len);
    let mut value = start;
    for &run in &rle[1..] {
        if run == 0 {
            return Err(CoreError::RleDecode("zero-length run".into()));
        }
        for _ in 0..run {
            out.push(value);
        }
        value = !value;
    }
    if out.len() != expected_len {
        return Err(CoreError::RleDecode(format!(
            "runs sum to {} but the grid has {expected_len} pixels",
            out.len()
        )));
    }
    Ok(out)
}

pub fn mask_from_rle(rle: &[u32], size: usize) -> Result<Mask> {
    let flat = rle_decode(rle, size * size)?;
    Ok(Mask::from_shape_vec((size, size), flat).expect("rle grid shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn encode_all_zero_and_all_one() {
        let zeros = Array2::from_elem((4, 4), false);
        assert_eq!(rle_encode(&zeros), vec![0, 16]);
        let ones = Array2::from_elem((4, 4), true);
        assert_eq!(rle_encode(&ones), vec![1, 16]);
    }

    #[test]
    fn decode_rejects_truncated_stream() {
        // Runs sum to 10 but the grid has 16 pixels.
        let err = rle_decode(&[0, 4, 6], 16).unwrap_err();
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn decode_rejects_bad_start_value() {
        assert!(rle_decode(&[2, 16], 16).is_err());
        assert!(rle_decode(&[1], 16).is_err());
    }

    #[test]
    fn decode_rejects_overlong_stream() {
        assert!(rle_decode(&[0, 10, 10], 16).is_err());
    }

    #[test]
    fn round_trip_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(0.4));
            let rle = rle_encode(&m);
            let back = mask_from_rle(&rle, 8).unwrap();
            assert_eq!(m, back);
        }
    }
}
