//! Temporary metric probe; not part of the library surface.

use rdsemi::simulate::{run_monte_carlo, MethodId, Model, Scenario, SimConfig};

fn main() {
    let t0 = std::time::Instant::now();

    // M3 / confounded scenario: the headline comparison
    let cfg = SimConfig {
        model: Model::M3,
        scenario: Scenario::UAViolated,
        n: 500,
        reps: 300,
        seed: 20260814,
        methods: vec![MethodId::Pl, MethodId::IkStyle],
    };
    match run_monte_carlo(&cfg) {
        Ok(rep) => {
            let pl = &rep.per_method[&MethodId::Pl];
            let ik = &rep.per_method[&MethodId::IkStyle];
            println!(
                "M3/S2 n=500 reps=300: PL rmse={:.4} bias={:+.4} ec={:.3} acl={:.3} | IK rmse={:.4} bias={:+.4} ec={:.3} acl={:.3} | ratio={:.3} fails={} [{:?}]",
                pl.rmse, pl.bias, pl.ec, pl.acl, ik.rmse, ik.bias, ik.ec, ik.acl,
                pl.rmse / ik.rmse, rep.failures, t0.elapsed()
            );
        }
        Err(e) => println!("M3/S2 failed: {e}"),
    }

    // M2 / independent-noise scenario at two sample sizes: MSE ratio probe
    let mut mses = Vec::new();
    for &n in &[500usize, 2000] {
        let t = std::time::Instant::now();
        let cfg = SimConfig {
            model: Model::M2,
            scenario: Scenario::UAHolds,
            n,
            reps: 200,
            seed: 4242,
            methods: vec![MethodId::Pl, MethodId::IkStyle],
        };
        match run_monte_carlo(&cfg) {
            Ok(rep) => {
                let pl = &rep.per_method[&MethodId::Pl];
                let ik = &rep.per_method[&MethodId::IkStyle];
                println!(
                    "M2/S1 n={n} reps=200: PL rmse={:.4} bias={:+.4} ec={:.3} | IK rmse={:.4} bias={:+.4} ec={:.3} fails={} [{:?}]",
                    pl.rmse, pl.bias, pl.ec, ik.rmse, ik.bias, ik.ec, rep.failures, t.elapsed()
                );
                mses.push((pl.rmse * pl.rmse, ik.rmse * ik.rmse));
            }
            Err(e) => println!("M2/S1 n={n} failed: {e}"),
        }
    }
    if mses.len() == 2 {
        println!(
            "M2/S1 MSE ratio n2000/n500: PL={:.3} IK={:.3}",
            mses[1].0 / mses[0].0,
            mses[1].1 / mses[0].1
        );
    }

    // M1 / independent-noise: IK reference point
    let cfg = SimConfig {
        model: Model::M1,
        scenario: Scenario::UAHolds,
        n: 500,
        reps: 300,
        seed: 99,
        methods: vec![MethodId::IkStyle],
    };
    match run_monte_carlo(&cfg) {
        Ok(rep) => {
            let ik = &rep.per_method[&MethodId::IkStyle];
            println!(
                "M1/S1 n=500 reps=300: IK rmse={:.4} bias={:+.4} ec={:.3} acl={:.3} fails={}",
                ik.rmse, ik.bias, ik.ec, ik.acl, rep.failures
            );
        }
        Err(e) => println!("M1/S1 IK failed: {e}"),
    }

    // sharp scenario sanity
    let cfg = SimConfig {
        model: Model::M1,
        scenario: Scenario::Sharp,
        n: 500,
        reps: 300,
        seed: 55,
        methods: vec![MethodId::Pl, MethodId::IkStyle],
    };
    match run_monte_carlo(&cfg) {
        Ok(rep) => {
            let pl = &rep.per_method[&MethodId::Pl];
            let ik = &rep.per_method[&MethodId::IkStyle];
            println!(
                "M1/sharp n=500 reps=300: PL rmse={:.4} bias={:+.4} ec={:.3} acl={:.3} | IK rmse={:.4} ec={:.3} fails={}",
                pl.rmse, pl.bias, pl.ec, pl.acl, ik.rmse, ik.ec, rep.failures
            );
        }
        Err(e) => println!("M1/sharp failed: {e}"),
    }

    println!("total [{:?}]", t0.elapsed());
}
