use mcicjm::sampler::{run_chains, SamplerConfig};
use mcicjm::simulator::{simulate_dataset, SimTruth};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let iters: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(10_000);
    let mut truth = SimTruth::default();
    truth.n_subjects = n;
    let ds = simulate_dataset(&truth, 4242).unwrap();
    println!("simulated {} subjects: proportions {:?}", n, ds.status_proportions());

    let config = SamplerConfig {
        n_chains: 3,
        n_iterations: iters,
        thin: 10,
        n_adapt: (iters / 10).max(100),
        seed: 7,
        ..SamplerConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = run_chains(&truth.spec, &ds.patients, &config).unwrap();
    println!("fit took {:.1?}", t0.elapsed());

    let tv = mcicjm::metrics::truth_parameter_values(&truth);
    for d in &out.diagnostics {
        let watched = ["beta[", "gamma[", "alpha1[", "alpha2[", "sigma_eps"];
        if watched.iter().any(|w| d.name.starts_with(w)) {
            let s = out.summaries.iter().find(|s| s.name == d.name).unwrap();
            let t = tv.iter().find(|(n, _)| *n == d.name).map(|(_, v)| *v);
            println!(
                "{:14} rhat {:.3} ess {:7.0}  mean {:7.3} [{:7.3}, {:7.3}]  truth {:?}",
                d.name, d.rhat, d.ess_bulk, s.mean, s.q025, s.q975, t
            );
        }
    }
    let fails = out.convergence_failures(1.1);
    println!("R-hat failures: {:?}", fails);
}
