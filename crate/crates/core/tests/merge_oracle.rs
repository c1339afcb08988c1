mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_rays_against_four_random_mpis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = random_mpi_model(&mut rng, 4);
    let mut total = 0;
    for n in 0..1000 {
        let ray = random_ray(&mut rng);
        let oracle = oracle_hits(&model, &ray);
        total += oracle.len();
        if let Err(e) = compare_hits(&engine_hits(&model, &ray), &oracle, 1e-6) {
            panic!("ray {n}: {e}");
        }
    }
    assert!(total > 1000, "rays should cross planes ({total} hits)");
}

#[test]
fn rays_from_mpi_centers_hit_every_plane_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_mpi_model(&mut rng, 1);
    let f = &model.mpis[0].frustum;
    let ray = mmpi::Ray::new(f.pose.position(), f.pose.forward());
    let hits = engine_hits(&model, &ray);
    assert_eq!(hits.len(), model.mpis[0].density_layout.plane_z.len());
    assert!(hits.windows(2).all(|w| w[0].plane < w[1].plane));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merge_matches_world_space_oracle(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_mpi_model(&mut rng, k);
        for _ in 0..20 {
            let ray = random_ray(&mut rng);
            let r = compare_hits(&engine_hits(&model, &ray), &oracle_hits(&model, &ray), 1e-6);
            prop_assert!(r.is_ok(), "{}", r.unwrap_err());
        }
    }

    #[test]
    fn merged_distances_are_sorted(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_mpi_model(&mut rng, 3);
        let ray = random_ray(&mut rng);
        let hits = engine_hits(&model, &ray);
        prop_assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}
