use mcicjm::simulator::{simulate_dataset, SimTruth};

fn main() {
    let rates: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    for rate in rates {
        let mut truth = SimTruth::default();
        truth.dropout_rate = rate; // sweep
        truth.n_subjects = 500;
        let mut mean = [0.0f64; 3];
        let n_ds = 20;
        for seed in 0..n_ds {
            let ds = simulate_dataset(&truth, 1000 + seed).unwrap();
            let p = ds.status_proportions();
            for i in 0..3 { mean[i] += p[i] / n_ds as f64; }
        }
        println!("rate {rate:.3}: cens {:.2}% prg {:.2}% trt {:.2}%  (target 68.86 / 22.34 / 8.80)",
            100.0*mean[0], 100.0*mean[1], 100.0*mean[2]);
    }
}
