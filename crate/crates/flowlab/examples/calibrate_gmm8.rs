use flowlab::fields::{gaussian_latent_velocity, VelocityField};
use flowlab::linalg;
use flowlab::measures::DiscreteMeasure;
use flowlab::nn::Mlp;
use flowlab::odeint::{integrate, sample_flow, straightness, SolverSpec};
use flowlab::rng::{derive, Seed, Stream};
use flowlab::training::*;
use flowlab::transport::solve_assignment;
use std::time::Instant;

fn field_rms(net: &Mlp) -> f64 {
    let g = gmm8();
    let mut s = Stream::new(Seed(777), "disc");
    let atoms: Vec<Vec<f64>> = (0..4096).map(|_| g.sample_one(&mut s)).collect();
    let target = DiscreteMeasure::from_points(atoms).unwrap();
    let mut acc = 0.0;
    let mut cnt = 0;
    let mut sg = Stream::new(Seed(778), "grid");
    for _ in 0..2000 {
        let t = sg.uniform_in(0.05, 0.95);
        let z = sg.standard_normal_vec(2);
        let y = g.sample_one(&mut sg);
        let xt = linalg::lerp(&z, &y, t);
        let v = gaussian_latent_velocity(&target, t, &xt).unwrap();
        let u = net.forward(t, &xt, None);
        acc += linalg::dist2(&u, &v);
        cnt += 1;
    }
    (acc / cnt as f64).sqrt()
}

fn endpoint_w2(net: &Mlp, seed: u64) -> f64 {
    let field = VelocityField::neural(net.clone());
    let flow = sample_flow(&field, 512, &SolverSpec::rk4(100), Seed(seed), 1e-3).unwrap();
    let g = gmm8();
    let mut s = Stream::new(Seed(seed ^ 0xfeed), "heldout");
    let held: Vec<Vec<f64>> = (0..512).map(|_| g.sample_one(&mut s)).collect();
    solve_assignment(&flow, &held).unwrap().1.sqrt()
}

fn mean_straightness(net: &Mlp) -> f64 {
    // shared latent set across nets: paired comparison
    let field = VelocityField::neural(net.clone());
    let mut s = Stream::new(Seed(4242), "straight");
    let mut acc = 0.0;
    let n = 512;
    for _ in 0..n {
        let z = s.standard_normal_vec(2);
        let traj = integrate(&field, &z, 1e-3, 1.0 - 1e-3, &SolverSpec::rk4(50)).unwrap();
        acc += straightness(&traj);
    }
    acc / n as f64
}

fn main() {
    let arg: Vec<String> = std::env::args().collect();
    let epochs: usize = arg.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let n_train: usize = arg.get(2).map(|s| s.parse().unwrap()).unwrap_or(16384);
    for seed in [0u64, 1, 2] {
        let mut out = vec![];
        for coupling in ["product", "ot"] {
            let mode = if coupling == "product" {
                CouplingMode::Independent
            } else {
                CouplingMode::MinibatchOt
            };
            let mut config = TrainConfig::defaults(TargetSpec::Gmm8, mode, Seed(seed));
            config.epochs = epochs;
            config.n_train = n_train;
            let t0 = Instant::now();
            let (net, rep) = if coupling == "product" {
                train_product(&config).unwrap()
            } else {
                train_minibatch_ot(&config).unwrap()
            };
            let dt = t0.elapsed().as_secs_f64();
            let (rms, w2, st) = (field_rms(&net), endpoint_w2(&net, derive(Seed(seed), 9).0), mean_straightness(&net));
            println!(
                "seed {seed} {coupling}: steps {} time {:.1}s loss {:.5} rms {:.4} w2 {:.4} straight {:.5}",
                rep.steps(), dt, rep.losses.last().unwrap(), rms, w2, st
            );
            out.push(st);
        }
        println!("  -> ordering ot < product: {}", out[1] < out[0]);
    }
}
