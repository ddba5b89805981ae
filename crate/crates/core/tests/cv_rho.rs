//! Cross-validated choice of ρ on data generated with ρ = 0.5. Slow (about a
//! quarter of an hour on one core) and noisy, so it only runs on request:
//! `cargo test -p vcbart --test cv_rho -- --ignored --nocapture`.

use vcbart::eval::cv_rho;
use vcbart::sampler::chain_rng;
use vcbart::synthetic::{gen_panel, SyntheticConfig, P};
use vcbart::Hyperparameters;

#[test]
#[ignore]
fn cv_picks_generating_rho_in_most_repetitions() {
    let mut hits = 0;
    for rep in 0..10u64 {
        let (data, _) = gen_panel(&SyntheticConfig { n: 100, rho: 0.5, seed: 100 + rep, ..Default::default() }).unwrap();
        let mut h = Hyperparameters::defaults(P);
        h.seed = rep;
        let res = cv_rho(&data, &[0.0, 0.5], 5, &h, &mut chain_rng(rep, 9)).unwrap();
        println!("repetition {rep}: mean held-out rmse {:?}, chose {}", res.mean_rmse(), res.chosen);
        hits += (res.chosen == 0.5) as usize;
    }
    println!("chose 0.5 in {hits}/10");
    assert!(hits >= 6, "chose 0.5 in only {hits}/10 repetitions");
}
