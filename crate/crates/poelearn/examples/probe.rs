use nalgebra::DVector;
use poelearn::scenario::{approximate_model, ScenarioConfig, GT_FIT_LR, GT_FIT_STEPS};
use poelearn::variational::FitOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let config = ScenarioConfig::preset("manipulability").unwrap();
    let model = &config.model;
    let targets = [[2.0, 0.6], [1.2, 1.4], [0.6, 2.0], [-1.0, 1.6]];
    for sit in 0..4 {
        let opts = FitOptions {
            steps: GT_FIT_STEPS,
            lr: GT_FIT_LR,
            n_samples: 64,
            seed: 303 + sit as u64,
        };
        let t0 = std::time::Instant::now();
        let (mix, _) = approximate_model(model, true, sit, 50, &opts).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let target = DVector::from_column_slice(&targets[sit]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = mix.sample(2000, &mut rng);
        let mut hits = 0;
        let mut manips: Vec<f64> = Vec::new();
        for r in 0..2000 {
            let q = samples.row(r).transpose();
            let y = model.entries[0].map.apply(&model.tree, &q).unwrap();
            if (y - &target).amax() <= 0.06 {
                hits += 1;
            }
            manips.push(model.entries[1].map.apply(&model.tree, &q).unwrap()[0]);
        }
        manips.sort_by(f64::total_cmp);
        println!(
            "sit={sit}: axis hits {}/2000 ({:.2}%), manip p10={:.3} p50={:.3} p90={:.3}, {secs:.1}s",
            hits,
            100.0 * hits as f64 / 2000.0,
            manips[200],
            manips[1000],
            manips[1800]
        );
    }
}
