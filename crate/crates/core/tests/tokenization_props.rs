use ndarray::{Array1, Array2, Array3};
use pimt::tokenization::{apply_mask, project, segment_array, MaskMode, MaskSpec, TokenIndex, TokenizerParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn segment_then_concat_is_identity(f in 1usize..5, c in 1usize..4, l in 1usize..6, w in 1usize..20, seed in any::<u64>()) {
        let data = random3((f, c, l * w), seed);
        let grid = segment_array(&data, w, 200.0).unwrap();
        prop_assert_eq!(grid.index(), TokenIndex::new(f, c, l));
        prop_assert_eq!(grid.concat(), data);
    }

    #[test]
    fn token_order_is_lexicographic(f in 1usize..6, c in 1usize..5, l in 1usize..9) {
        let index = TokenIndex::new(f, c, l);
        let mut expected = Vec::new();
        for fi in 0..f {
            for ci in 0..c {
                for li in 0..l {
                    expected.push((fi, ci, li));
                }
            }
        }
        let got: Vec<_> = (0..index.len()).map(|p| index.coords(p)).collect();
        prop_assert_eq!(&got, &expected);
        for (p, &(fi, ci, li)) in expected.iter().enumerate() {
            prop_assert_eq!(index.position(fi, ci, li), p);
        }
    }

    #[test]
    fn mask_leaves_unmasked_patches_untouched(ratio in 0.0..=1.0f64, seed in any::<u64>(), structured in any::<bool>()) {
        let data = random3((3, 2, 4 * 10), seed ^ 0x5eed);
        let grid = segment_array(&data, 10, 200.0).unwrap();
        let mode = if structured { MaskMode::AxisStructured } else { MaskMode::UniformToken };
        let spec = MaskSpec { ratio, mode, seed };
        let fill = Array1::from_elem(10, 7.5);
        let out = apply_mask(&grid, &spec, fill.view()).unwrap();
        let n_masked = out.mask.iter().filter(|&&m| m).count();
        if !structured {
            prop_assert_eq!(n_masked, spec.target_count(grid.index().len()));
        } else {
            prop_assert!(n_masked >= spec.target_count(grid.index().len()));
        }
        for ((f, c, l), &m) in out.mask.indexed_iter() {
            let before = grid.patches.slice(ndarray::s![f, c, l, ..]);
            let after = out.corrupted.patches.slice(ndarray::s![f, c, l, ..]);
            if m {
                prop_assert_eq!(after, fill.view());
            } else {
                prop_assert_eq!(after, before);
            }
        }
        prop_assert_eq!(apply_mask(&grid, &spec, fill.view()).unwrap(), out);
    }

    #[test]
    fn projection_is_shared_across_tokens(seed in any::<u64>(), a in 0usize..12, b in 0usize..12) {
        let data = random3((3, 2, 2 * 8), seed);
        let grid = segment_array(&data, 8, 200.0).unwrap();
        let index = grid.index();
        let mut params = TokenizerParams::zeros(index, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        params.projection = Array2::from_shape_simple_fn((8, 5), || StandardNormal.sample(&mut rng));
        params.bias = Array1::from_shape_simple_fn(5, || StandardNormal.sample(&mut rng));
        let mut tokens = grid.token_matrix();
        let before = project(&grid, &params).unwrap();
        let (ra, rb) = (tokens.row(a).to_owned(), tokens.row(b).to_owned());
        tokens.row_mut(a).assign(&rb);
        tokens.row_mut(b).assign(&ra);
        let swapped = pimt::tokenization::PatchGrid::from_token_matrix(index, tokens, 200.0).unwrap();
        let after = project(&swapped, &params).unwrap();
        prop_assert_eq!(after.row(a), before.row(b));
        prop_assert_eq!(after.row(b), before.row(a));
    }
}

#[test]
fn half_mask_on_full_grid_hits_exactly_half() {
    let index = TokenIndex::new(12, 4, 8);
    assert_eq!(index.len(), 384);
    for seed in 0..5 {
        let mask = pimt::tokenization::sample_mask(index, &MaskSpec::uniform(0.5, seed)).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 192);
    }
}
