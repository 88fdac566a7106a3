use std::time::Instant;
use xlris_core::channel::ScenarioConfig;
use xlris_core::measurement::{generate_sample, make_dataset, vec_matrix, SnrSpec};
use xlris_core::nets::ModelKind;
use xlris_core::recovery::{
    build_grid_dictionary, nmse_db_batched, nmse_ratio, omp_with_effective, oracle_ls,
    EffectiveDictionary,
};
use xlris_core::seeds::derive_seed;
use xlris_core::train::{train, TrainConfig};

fn acceptance_scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk();
    cfg.l_far = 3;
    cfg.l_near = 3;
    cfg.seed = 11;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let scenario = acceptance_scenario();
    let pilots = 32;
    let t0 = Instant::now();
    let dataset = make_dataset(&scenario, 2000, SnrSpec::Fixed(0.0), pilots, 11).unwrap();
    println!("dataset: {:.1}s", t0.elapsed().as_secs_f64());
    let theta = dataset.samples[0].theta.clone();

    // fresh eval channels, same pilot schedule
    let trials = 200;
    let t0 = Instant::now();
    let eval: Vec<_> = (0..trials)
        .map(|t| {
            generate_sample(&scenario, &theta, SnrSpec::Fixed(0.0), derive_seed(1, "probe-eval", t))
                .unwrap()
        })
        .collect();
    println!("eval gen: {:.1}s", t0.elapsed().as_secs_f64());

    if which == "all" || which == "classical" {
        // OLS
        let t0 = Instant::now();
        let ratios: Vec<f64> = eval
            .iter()
            .map(|s| {
                let est = oracle_ls(&s.obs, &theta, &s.paths, &scenario).unwrap();
                nmse_ratio(&est.h_hat, &vec_matrix(&s.channel.h_matrix)).unwrap()
            })
            .collect();
        println!("OLS: {:.2} dB ({:.1}s)", nmse_db_batched(&ratios), t0.elapsed().as_secs_f64());

        // OMP
        let t0 = Instant::now();
        let dict = build_grid_dictionary(&scenario, 16, (32, 8), 4).unwrap();
        let eff = EffectiveDictionary::new(&dict, &theta).unwrap();
        println!(
            "dict: {} atoms, build {:.1}s",
            dict.atom_count(),
            t0.elapsed().as_secs_f64()
        );
        let t0 = Instant::now();
        let ratios: Vec<f64> = eval
            .iter()
            .map(|s| {
                let est = omp_with_effective(&s.obs, &dict, &eff, 24, 1e-3).unwrap();
                nmse_ratio(&est.h_hat, &vec_matrix(&s.channel.h_matrix)).unwrap()
            })
            .collect();
        println!("OMP: {:.2} dB ({:.1}s)", nmse_db_batched(&ratios), t0.elapsed().as_secs_f64());
    }

    let eval_model = |model: &xlris_core::nets::UnrolledModel| -> f64 {
        let ratios: Vec<f64> = eval
            .iter()
            .map(|s| {
                let h = model.estimate(&s.obs.y, &theta, scenario.n_bs).unwrap();
                nmse_ratio(&h, &vec_matrix(&s.channel.h_matrix)).unwrap()
            })
            .collect();
        nmse_db_batched(&ratios)
    };

    let run = |kind: ModelKind, layers: usize, width: usize, epochs: usize, lr: f64| {
        let mut tc = TrainConfig::new(kind);
        tc.net_layers = layers;
        tc.net_width = width;
        tc.epochs = epochs;
        tc.learning_rate = lr;
        tc.workers = 2;
        tc.seed = 3;
        let t0 = Instant::now();
        let out = train(&dataset, &tc).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{kind} K={layers} w={width} e={epochs} lr={lr}: val/epoch {:?}",
            out.log.rows.iter().map(|r| (r.epoch, (r.val_nmse_db * 100.0).round() / 100.0)).collect::<Vec<_>>()
        );
        println!(
            "{kind}: eval {:.2} dB, {:.0}s total ({:.1}s/epoch)",
            eval_model(&out.model),
            secs,
            secs / epochs as f64
        );
    };

    let runc = |lam: f64, rho: f64, lr: f64, epochs: usize, layers: usize| {
        let mut tc = TrainConfig::new(ModelKind::Cista);
        tc.net_layers = layers;
        tc.epochs = epochs;
        tc.learning_rate = lr;
        tc.workers = 2;
        tc.seed = 3;
        tc.cista_step = Some(lam);
        tc.cista_threshold = Some(rho);
        let t0 = Instant::now();
        let out = train(&dataset, &tc).unwrap();
        println!(
            "cista K={layers} lam={lam} rho={rho} lr={lr} e={epochs}: eval {:.2} dB best-val {:.2} ({:.0}s)",
            eval_model(&out.model),
            out.best_val_nmse_db,
            t0.elapsed().as_secs_f64()
        );
    };
    if which == "lmmse" {
        // sample-covariance LMMSE: the best linear estimator learnable from
        // the training set; calibrates what the nets can reasonably reach
        use nalgebra::{DMatrix, DVector};
        use num_complex::Complex64;
        let nm = scenario.n_bs * scenario.m();
        let mut cov = DMatrix::<Complex64>::zeros(nm, nm);
        let mut mean = DVector::<Complex64>::zeros(nm);
        for s in &dataset.samples {
            let h = vec_matrix(&s.channel.h_matrix);
            mean += &h;
        }
        mean /= Complex64::new(dataset.samples.len() as f64, 0.0);
        for s in &dataset.samples {
            let h = vec_matrix(&s.channel.h_matrix) - &mean;
            cov.gerc(Complex64::new(1.0, 0.0), &h, &h, Complex64::new(1.0, 0.0));
        }
        cov /= Complex64::new(dataset.samples.len() as f64, 0.0);
        // dense Φ at desk scale is affordable
        let phi = theta
            .matrix
            .map(|v| Complex64::new(v, 0.0))
            .transpose()
            .kronecker(&DMatrix::identity(scenario.n_bs, scenario.n_bs));
        let sigma2 = eval[0].obs.sigma2;
        let a = &phi * &cov * phi.adjoint()
            + DMatrix::identity(phi.nrows(), phi.nrows()) * Complex64::new(sigma2, 0.0);
        let gain = (&cov * phi.adjoint())
            * a.try_inverse().expect("well-conditioned LMMSE system");
        let ratios: Vec<f64> = eval
            .iter()
            .map(|s| {
                let h_true = vec_matrix(&s.channel.h_matrix);
                let ymean = &phi * &mean;
                let h_hat = &mean + &gain * (&s.obs.y - ymean);
                nmse_ratio(&h_hat, &h_true).unwrap()
            })
            .collect();
        println!("LMMSE (sample covariance): {:.2} dB", nmse_db_batched(&ratios));
        return;
    }
    match which {
        "cista" => run(ModelKind::Cista, 17, 0, 6, 2e-3),
        "cistasweep" => {
            let lam: f64 = args[2].parse().unwrap();
            let rho: f64 = args[3].parse().unwrap();
            let lr: f64 = args[4].parse().unwrap();
            let epochs: usize = args[5].parse().unwrap();
            let layers: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(17);
            runc(lam, rho, lr, epochs, layers);
        }
        "cistaplus" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
            run(ModelKind::CistaPlus, 13, 0, epochs, lr);
        }
        "cnncdl" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
            let width: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
            run(ModelKind::CnnCdl, 5, width, epochs, lr);
        }
        _ => {}
    }
}
