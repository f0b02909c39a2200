use crate::error::{Error, Result};

use super::image::Image;
use super::mask::ManipulationMask;

/// `M ⊙ I_g + (1 − M) ⊙ I_t`, applied to every channel.
///
/// Because `M` is binary the blend is evaluated as a per-pixel selection,
/// which makes the output bit-identical to `source` on `{M = 1}` and to
/// `target` on `{M = 0}` (including signed zeros and non-finite values).
pub fn composite(source: &Image, target: &Image, mask: &ManipulationMask) -> Result<Image> {
    let shape = |i: &Image| (i.height, i.width, i.channels);
    if shape(source) != shape(target) {
        return Err(Error::Dimension(format!(
            "source {:?} vs target {:?}",
            shape(source),
            shape(target)
        )));
    }
    if (mask.height, mask.width) != (target.height, target.width) {
        return Err(Error::Dimension(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, target.height, target.width
        )));
    }
    mask.validate()?;
    let c = target.channels;
    let mut out = target.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            out.data[i * c..(i + 1) * c].copy_from_slice(&source.data[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_cases() {
        let g = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let t = Image::new(1, 2, 1, vec![0.2, 0.2]).unwrap();
        let zeros = ManipulationMask::zeros(1, 2);
        assert_eq!(composite(&g, &t, &zeros).unwrap(), t);
        let ones = ManipulationMask::new(1, 2, vec![1, 1]).unwrap();
        assert_eq!(composite(&g, &t, &ones).unwrap(), g);
        let half = ManipulationMask::new(1, 2, vec![1, 0]).unwrap();
        assert_eq!(composite(&g, &t, &half).unwrap().data, vec![0.5, 0.2]);
    }

    #[test]
    fn shape_and_value_errors() {
        let a = Image::filled(2, 2, 3, 0.1);
        let b = Image::filled(2, 3, 3, 0.1);
        assert!(matches!(composite(&a, &b, &ManipulationMask::zeros(2, 2)), Err(Error::Dimension(_))));
        assert!(matches!(composite(&a, &a, &ManipulationMask::zeros(3, 2)), Err(Error::Dimension(_))));
        let bad = ManipulationMask { height: 2, width: 2, data: vec![0, 2, 0, 0] };
        assert!(matches!(composite(&a, &a, &bad), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn compositing_is_exact_and_idempotent_on_equal_inputs(
            h in 1usize..8, w in 1usize..8, c in 1usize..4, seed in any::<u64>()
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let n = h * w * c;
            let g = Image::new(h, w, c, (0..n).map(|_| rng.gen()).collect()).unwrap();
            let t = Image::new(h, w, c, (0..n).map(|_| rng.gen()).collect()).unwrap();
            let m = ManipulationMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect()).unwrap();
            let out = composite(&g, &t, &m).unwrap();
            for (i, &mv) in m.data.iter().enumerate() {
                let src = if mv == 1 { &g } else { &t };
                for ch in 0..c {
                    prop_assert_eq!(out.data[i * c + ch].to_bits(), src.data[i * c + ch].to_bits());
                }
            }
            prop_assert_eq!(composite(&t, &t, &m).unwrap(), t);
        }
    }
}
