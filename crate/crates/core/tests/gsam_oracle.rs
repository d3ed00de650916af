#[path = "common/oracle.rs"]
mod oracle;

use gsnet_core::autodiff::{finite_diff_check, GradCheckOptions, Graph};
use gsnet_core::gsam::{
    cam_apply, gsam_forward, gsam_init, sam_apply, Branches, ConvBlockParams, GsamParams,
};
use gsnet_core::rng;
use gsnet_core::{Matrix, Shape4, Tensor};
use oracle::{grid_of, max_grid_diff, random_tensor, randomize, Grid};
use rand::seq::SliceRandom;

fn random_module(k: usize, seed: u64) -> GsamParams {
    let mut p = gsam_init(k, seed).unwrap();
    randomize(&mut p, seed, 1.0);
    p
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s.w()).map(|r| (0..s.k()).map(|c| t.get(0, 0, r, c)).collect()).collect()
}

fn check_against_oracle(h: usize, w: usize, k: usize, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let p = random_module(k, seed);
        let x = random_tensor(Shape4::new(1, h, w, k).unwrap(), seed);
        let grid = grid_of(&x, 0);

        let (f_ch, a_ch) = cam_apply(&x, &p.cam).unwrap();
        let want = oracle::cam(&grid, &p.cam);
        let err = max_grid_diff(&grid_of(&f_ch, 0), &want.features);
        assert!(err < 1e-10, "CAM {h}x{w}x{k} seed {seed}: {err}");
        assert!(max_grid_diff(&matrix_rows(&a_ch), &want.attention) < 1e-10);

        let (f_sp, a_sp) = sam_apply(&x, &p.sam).unwrap();
        let want = oracle::sam(&grid, &p.sam);
        let err = max_grid_diff(&grid_of(&f_sp, 0), &want.features);
        assert!(err < 1e-10, "SAM {h}x{w}x{k} seed {seed}: {err}");
        assert!(max_grid_diff(&matrix_rows(&a_sp), &want.attention) < 1e-10);

        let fused = random_fusion(p, seed);
        let out = fused.forward(&x).unwrap();
        let err = max_grid_diff(&grid_of(&out.output, 0), &oracle::gsam(&grid, &fused));
        assert!(err < 1e-10, "GSAM {h}x{w}x{k} seed {seed}: {err}");
    }
}

fn random_fusion(mut p: GsamParams, seed: u64) -> GsamParams {
    randomize(&mut p.fusion, seed + 7, 2.0);
    p
}

#[test]
fn cam_and_sam_match_loop_oracle_on_2x2x2() {
    check_against_oracle(2, 2, 2, 0..25);
}

#[test]
fn cam_and_sam_match_loop_oracle_on_3x3x4() {
    check_against_oracle(3, 3, 4, 100..125);
}

#[test]
fn identity_initialized_cam_matches_oracle() {
    let eye = Matrix::identity(2);
    let block = |name: &str| ConvBlockParams::from_parts(name, &eye, &[0.0; 2], &[1.0; 2], &[0.0; 2]).unwrap();
    let mut p = gsam_init(2, 0).unwrap();
    p.cam.query = block("q");
    p.cam.key = block("k");
    p.cam.value = block("v");
    let x = Tensor::new(
        Shape4::new(1, 2, 2, 2).unwrap(),
        vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 1.0, 3.0],
    )
    .unwrap();
    let (f_ch, a_ch) = cam_apply(&x, &p.cam).unwrap();
    let want = oracle::cam(&grid_of(&x, 0), &p.cam);
    assert!(max_grid_diff(&grid_of(&f_ch, 0), &want.features) < 1e-12);
    assert!(max_grid_diff(&matrix_rows(&a_ch), &want.attention) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..100 {
        let k = 2 * (1 + seed as usize % 3);
        let p = random_module(k, seed);
        let x = random_tensor(Shape4::new(2, 2 + seed as usize % 3, 3, k).unwrap(), seed);
        let out = p.forward(&x).unwrap();
        for t in [&out.channel_attention, &out.spatial_attention] {
            for row in t.data().chunks(t.shape().k()) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn fusion_identity_is_exact() {
    for seed in 0..100 {
        let mut p = random_module(4, seed);
        p.fusion = gsnet_core::gsam::FusionWeights::new("gsam.fusion", 0.0, 0.0, 1.0);
        let x = random_tensor(Shape4::new(1, 3, 2, 4).unwrap(), seed);
        assert_eq!(p.forward(&x).unwrap().output, x);
    }
}

fn permute(g: &Grid, perm: &[usize]) -> Grid {
    perm.iter().map(|&i| g[i].clone()).collect()
}

#[test]
fn spatial_permutations() {
    let (h, w, k) = (3, 3, 4);
    for seed in 0..20 {
        let p = random_module(k, seed);
        let x = random_tensor(Shape4::new(1, h, w, k).unwrap(), seed);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng::seeded(seed, 77));
        let xp = oracle::tensor_of(&permute(&grid_of(&x, 0), &perm), h, w);

        let (f_sp, a_sp) = sam_apply(&x, &p.sam).unwrap();
        let (f_sp_p, a_sp_p) = sam_apply(&xp, &p.sam).unwrap();
        let err = max_grid_diff(&permute(&grid_of(&f_sp, 0), &perm), &grid_of(&f_sp_p, 0));
        assert!(err < 1e-10, "SAM equivariance seed {seed}: {err}");
        // Attention permutes on both axes.
        let a = matrix_rows(&a_sp);
        let ap = matrix_rows(&a_sp_p);
        for i in 0..h * w {
            for j in 0..h * w {
                assert!((a[perm[i]][perm[j]] - ap[i][j]).abs() < 1e-10);
            }
        }

        let (f_ch, a_ch) = cam_apply(&x, &p.cam).unwrap();
        let (f_ch_p, a_ch_p) = cam_apply(&xp, &p.cam).unwrap();
        assert!(a_ch.max_abs_diff(&a_ch_p) < 1e-10, "CAM attention invariance seed {seed}");
        let err = max_grid_diff(&permute(&grid_of(&f_ch, 0), &perm), &grid_of(&f_ch_p, 0));
        assert!(err < 1e-10, "CAM equivariance seed {seed}: {err}");
    }
}

#[test]
fn gsam_gradients_match_finite_differences() {
    let mut p = random_module(4, 5);
    randomize(&mut p.fusion, 6, 1.0);
    let x = random_tensor(Shape4::new(2, 3, 2, 4).unwrap(), 7);
    let probe = random_tensor(Shape4::new(2, 3, 2, 4).unwrap(), 8);
    let opts = GradCheckOptions::default();
    let report = finite_diff_check(
        &mut p,
        |g: &mut Graph, p: &GsamParams| {
            let xv = g.input(x.clone());
            let out = gsam_forward(g, xv, p, Branches::ALL)?;
            let r = g.input(probe.clone());
            let prod = g.mul(out.output, r)?;
            g.sum(prod)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert!(report.max_rel_error() < 1e-6);
}
