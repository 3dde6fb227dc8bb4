use flag_core::data::{synth_slide, SyntheticSpec};
use flag_core::metrics::{deg_overlap, gene_corr_matrix, gsc, morans_i, pcc_mse, rank_sum, ssc};
use flag_core::sde::standard_normal;
use flag_core::spatial::build_knn_graph;
use flag_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pearson_loop(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn col(x: &Tensor, j: usize) -> Vec<f64> {
    let g = x.shape()[1];
    x.data().iter().skip(j).step_by(g).copied().collect()
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    standard_normal(rng, &[n, 2]).map(|v| 100.0 * v)
}

proptest! {
    #[test]
    fn morans_matrix_form_matches_double_loop(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5 + (seed % 20) as usize;
        let w = build_knn_graph(&coords(&mut rng, n), 3).unwrap();
        let x = standard_normal(&mut rng, &[n]);
        let got = morans_i(x.data(), &w).unwrap();
        let m = x.data().iter().sum::<f64>() / n as f64;
        let z: Vec<f64> = x.data().iter().map(|v| v - m).collect();
        let (mut num, mut s0) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                num += w.w.data()[i * n + j] * z[i] * z[j];
                s0 += w.w.data()[i * n + j];
            }
        }
        let den: f64 = z.iter().map(|v| v * v).sum();
        prop_assert!((got - n as f64 / s0 * num / den).abs() < 1e-12);
    }

    #[test]
    fn morans_is_affine_invariant(seed in 0u64..1_000_000, a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = build_knn_graph(&coords(&mut rng, 12), 4).unwrap();
        let x = standard_normal(&mut rng, &[12]);
        let y: Vec<f64> = x.data().iter().map(|v| a * v + b).collect();
        prop_assert!((morans_i(x.data(), &w).unwrap() - morans_i(&y, &w).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn gene_correlations_match_pairwise_pearson(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(&mut rng, &[7, 5]);
        let c = gene_corr_matrix(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!((c.data()[i * 5 + j] - pearson_loop(&col(&x, i), &col(&x, j))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pcc_matches_per_gene_loop(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = standard_normal(&mut rng, &[5, 3]);
        let g = standard_normal(&mut rng, &[5, 3]);
        let r = pcc_mse(&p, &g).unwrap();
        let want = (0..3).map(|j| pearson_loop(&col(&p, j), &col(&g, j))).sum::<f64>() / 3.0;
        prop_assert!((r.pcc - want).abs() < 1e-12);
        let mse = p.zip_with(&g, |a, b| (a - b) * (a - b)).unwrap().sum() / 15.0;
        prop_assert!((r.mse - mse).abs() < 1e-12);
    }

    #[test]
    fn structure_scores_are_symmetric_and_bounded(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = coords(&mut rng, 16);
        let p = standard_normal(&mut rng, &[16, 5]);
        let g = standard_normal(&mut rng, &[16, 5]);
        let a = gsc(&p, &g).unwrap();
        prop_assert!((a - gsc(&g, &p).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        let s = ssc(&p, &g, &c, 4).unwrap();
        prop_assert!((s - ssc(&g, &p, &c, 4).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn ssc_ignores_a_common_spot_permutation(
        seed in 0u64..1_000_000,
        perm in Just((0..14).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = coords(&mut rng, 14);
        let p = standard_normal(&mut rng, &[14, 4]);
        let g = standard_normal(&mut rng, &[14, 4]);
        let a = ssc(&p, &g, &c, 3).unwrap();
        let pc = c.select_rows(&perm).unwrap();
        let b = ssc(&p.select_rows(&perm).unwrap(), &g.select_rows(&perm).unwrap(), &pc, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn exact_rank_sum_matches_enumeration(v in prop::collection::vec(0u8..5, 6)) {
        // Small integer values force ties.
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let r = rank_sum(&v[..3], &v[3..]);
        // Brute force: U over every 3-subset of the pooled sample.
        let u_of = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().map(|x| b.iter().map(|y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }).sum::<f64>()).sum()
        };
        let u_obs = u_of(&v[..3], &v[3..]);
        prop_assert!((r.u - u_obs).abs() < 1e-12);
        let mut hits = 0;
        let mut total = 0;
        for mask in 0u32..64 {
            if mask.count_ones() != 3 {
                continue;
            }
            let a: Vec<f64> = (0..6).filter(|i| mask >> i & 1 == 1).map(|i| v[i]).collect();
            let b: Vec<f64> = (0..6).filter(|i| mask >> i & 1 == 0).map(|i| v[i]).collect();
            total += 1;
            hits += usize::from(u_of(&a, &b) >= u_obs - 1e-9);
        }
        prop_assert!((r.p_exact.unwrap() - hits as f64 / total as f64).abs() < 1e-12);
    }
}

/// Data whose sample gene correlation is exactly `corr` (3×3): orthonormal
/// centred columns mixed by the Cholesky factor.
fn with_correlation(rng: &mut ChaCha8Rng, n: usize, corr: [[f64; 3]; 3]) -> Tensor {
    let z = standard_normal(rng, &[n, 3]);
    let mut cols: Vec<Vec<f64>> = (0..3).map(|j| col(&z, j)).collect();
    for j in 0..3 {
        let m = cols[j].iter().sum::<f64>() / n as f64;
        cols[j].iter_mut().for_each(|v| *v -= m);
        for k in 0..j {
            let d: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            cols[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= d * b);
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (corr[i][i] - s).sqrt() } else { (corr[i][j] - s) / l[j][j] };
        }
    }
    let data = (0..n).flat_map(|r| (0..3).map(move |i| (r, i))).map(|(r, i)| (0..=i).map(|k| l[i][k] * cols[k][r]).sum()).collect();
    Tensor::new(vec![n, 3], data).unwrap()
}

#[test]
fn gsc_of_mirrored_correlations_is_minus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = with_correlation(&mut rng, 12, [[1.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 1.0]]);
    let pred = with_correlation(&mut rng, 12, [[1.0, -0.3, -0.1], [-0.3, 1.0, 0.2], [-0.1, 0.2, 1.0]]);
    assert!((gsc(&pred, &gt).unwrap() + 1.0).abs() < 1e-10);
    assert!((gsc(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    let two = Tensor::zeros(&[4, 2]);
    assert!(gsc(&two, &two).is_err());
}

#[test]
fn ssc_ignores_per_gene_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = coords(&mut rng, 20);
    let g = standard_normal(&mut rng, &[20, 5]);
    let shifted = Tensor::new(vec![20, 5], g.data().iter().enumerate().map(|(k, v)| v + (k % 5) as f64).collect()).unwrap();
    assert!((ssc(&shifted, &g, &c, 8).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssc_is_stable_across_neighbourhood_sizes() {
    let (slide, _) = synth_slide(&SyntheticSpec { g: 50, seed: 5, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = standard_normal(&mut rng, &[64, 50]).map(|v| 0.5 * v);
    let pred = slide.expr.zip_with(&noise, |a, b| a + b).unwrap();
    let vals: Vec<f64> = [6, 8, 12].iter().map(|&k| ssc(&pred, &slide.expr, &slide.coords, k).unwrap()).collect();
    let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.05, "SSC over k = 6, 8, 12: {vals:?}");
}

#[test]
fn independent_columns_are_nearly_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = standard_normal(&mut rng, &[2000, 4]);
    let c = gene_corr_matrix(&x).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(c.data()[i * 4 + j].abs() < 0.1);
            }
        }
    }
}

#[test]
fn relabelled_markers_share_nothing() {
    // Two domains of four spots; genes 0,1 mark domain 0, genes 2,3 mark
    // domain 1, genes 4..8 are noise.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let mut gt = standard_normal(&mut rng, &[8, 8]).map(|v| 0.1 * v);
    for (spot, &l) in labels.iter().enumerate() {
        let genes = if l == 0 { [0, 1] } else { [2, 3] };
        for g in genes {
            gt.data_mut()[spot * 8 + g] += 5.0 + g as f64;
        }
    }
    assert_eq!(deg_overlap(&gt, &gt, &labels, 2).unwrap(), 1.0);
    let perm = [4, 5, 6, 7, 0, 1, 2, 3];
    let pred = Tensor::new(vec![8, 8], (0..64).map(|k| gt.data()[(k / 8) * 8 + perm[k % 8]]).collect()).unwrap();
    assert_eq!(deg_overlap(&pred, &gt, &labels, 2).unwrap(), 0.0);
    assert!(deg_overlap(&gt, &gt, &[0, 0, 0, 0, 0, 0, 0, 1], 2).is_err());
}
