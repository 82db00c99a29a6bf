mod common;

use revarb::bound::lower_bound;
use revarb::data::{generate_synthetic, Normalization, SyntheticSpec};
use revarb::model::ModelConfig;
use revarb::recognition::{RecognitionConfig, RecognitionWindow};
use revarb::trainer::{fit, fit_with_recognition, TrainOptions};

#[test]
#[ignore]
fn probe_breakdown() {
    let spec = SyntheticSpec {
        noise_std: 0.01,
        ..Default::default()
    };
    let (train, _) = generate_synthetic::<f64>(&spec, 94, 100, 10).unwrap();
    let stats = Normalization::fit(&train).unwrap();
    let t = stats.apply(&train);
    let (u, y) = (t.u, t.y);
    let config = ModelConfig::new(1, 2, 2, 8).unwrap();
    let opts = TrainOptions {
        max_evals: 4000,
        restarts: 1,
        seed: 95,
        ..Default::default()
    };
    let (s_unc, _) = fit(&config, &u, &y, &opts).unwrap();
    let rec = RecognitionConfig {
        depth: 1,
        width: 16,
        window: RecognitionWindow::Current,
        init_scale: 0.1,
    };
    let (s_rec, _, _) = fit_with_recognition(&config, &rec, &u, &y, &opts).unwrap();

    for (name, st) in [("unconstrained", &s_unc), ("recognition", &s_rec)] {
        let b = lower_bound(st, &u, &y).unwrap();
        println!("--- {name}: total {:.3}", b.total);
        println!("  fit: {:?}", b.fit_terms);
        println!("  trace: {:?}", b.trace_terms);
        println!("  logdet: {:?}", b.logdet_terms);
        println!("  entropy: {:?}", b.entropy_terms);
        println!("  cross: {:?}", b.cross_entropy_terms);
        for (l, p) in st.layers.iter().enumerate() {
            println!(
                "  layer {l}: sf2 {:.4}, noise {:.6}, w {:?}",
                p.kernel.signal_variance,
                p.noise_variance,
                p.kernel
                    .ard_weights
                    .iter()
                    .map(|v| format!("{v:.3}"))
                    .collect::<Vec<_>>()
            );
        }
        let lam = &st.variational[0].variances;
        let mean_lam = lam.iter().sum::<f64>() / lam.len() as f64;
        println!(
            "  lambda: mean {:.5}, min {:.6}, max {:.5}",
            mean_lam,
            lam.iter().cloned().fold(f64::INFINITY, f64::min),
            lam.iter().cloned().fold(0.0, f64::max)
        );
    }
}
