use std::time::Instant;

use asfseg::autodiff::optim::{adam_step, AdamConfig, AdamState};
use asfseg::autodiff::BnMode;
use asfseg::losses::{LossWeights, TargetTensors};
use asfseg::network::{Model, NetworkConfig, SliceInputs};
use asfseg::{Shape, Tensor};
use rand::SeedableRng;

fn main() {
    let mut model = Model::new(NetworkConfig::default()).unwrap();
    println!("params {}", model.num_parameters());
    let (n, t) = (4, 64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let s = Shape::new(n, 1, t, t);
    let inputs = SliceInputs {
        prev: Tensor::uniform(s, 0.0, 1.0, &mut rng),
        target: Tensor::uniform(s, 0.0, 1.0, &mut rng),
        next: Tensor::uniform(s, 0.0, 1.0, &mut rng),
    };
    let m = Tensor::zeros(s);
    let targets = TargetTensors {
        mask: m.clone(),
        edge: m.clone(),
        scales: [
            m,
            Tensor::zeros(Shape::new(n, 1, t / 2, t / 2)),
            Tensor::zeros(Shape::new(n, 1, t / 4, t / 4)),
        ],
    };
    let w = LossWeights::default();
    let t0 = Instant::now();
    let mut fg = model.build(n, t, BnMode::Train, Some(&w)).unwrap();
    println!("build {:?} nodes {}", t0.elapsed(), fg.graph.len());
    let mut st = AdamState::default();
    let cfg = AdamConfig::default();
    for i in 0..5 {
        let t0 = Instant::now();
        let b = model.bindings(&fg, &inputs, Some(&targets)).unwrap();
        let loss = fg.loss.unwrap();
        let v = fg.graph.evaluate(loss, &b).unwrap().item();
        let t1 = t0.elapsed();
        let g = fg.graph.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let t2 = t0.elapsed();
        adam_step(&mut model.params, &g, &mut st, &cfg).unwrap();
        model.update_running_stats(&fg);
        println!(
            "step {i} loss {v:.4} fwd {t1:?} fwd+bwd {t2:?} total {:?}",
            t0.elapsed()
        );
    }
}
