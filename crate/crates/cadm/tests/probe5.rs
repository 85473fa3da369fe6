//! Temporary diagnostic for the pendulum return criterion; not part of the suite.

use cadm::checkpoint;
use cadm::envs::Regime;
use cadm::eval;
use std::path::Path;

fn means(family: &str, regime: Regime, eps: usize) -> f64 {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut per_seed = Vec::new();
    for s in 0..3u64 {
        let run = checkpoint::load(
            &root.join(format!("target/acceptance-cache/{family}-s{s}/best.ckpt")),
        )
        .unwrap();
        let rep = eval::evaluate_returns(&run.model, &run.plan, regime, eps, 9000 + s).unwrap();
        println!(
            "  {family} s{s} {:?}: mean {:8.1}  episodes {:?}",
            regime,
            rep.mean(),
            rep.returns.iter().map(|r| *r as i64).collect::<Vec<_>>()
        );
        per_seed.push(rep.mean());
    }
    per_seed.iter().sum::<f64>() / per_seed.len() as f64
}

#[test]
#[ignore]
fn probe_pendulum_bands() {
    let eps = 20;
    let cadm_mod = means("pendulum-cadm", Regime::Moderate, eps);
    let van_mod = means("pendulum-vanilla", Regime::Moderate, eps);
    println!("moderate: cadm {cadm_mod:.1}  vanilla {van_mod:.1}  gap {:.1}", cadm_mod - van_mod);
    let cadm_tr = means("pendulum-cadm", Regime::Train, eps);
    let van_tr = means("pendulum-vanilla", Regime::Train, eps);
    println!("train:    cadm {cadm_tr:.1}  vanilla {van_tr:.1}  gap {:.1}", cadm_tr - van_tr);
}
