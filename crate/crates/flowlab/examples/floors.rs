// Empirical floors for acceptance calibration.
use flowlab::diffusion::*;
use flowlab::measures::*;
use flowlab::odeint::{sample_flow, SolverSpec};
use flowlab::rng::{derive, Seed, Stream};
use flowlab::training::gmm8;
use flowlab::transport::{solve_assignment, wasserstein_1d};

fn main() {
    // 1. gmm8 two-sample floor at n = 512 (2-D, exact assignment)
    let g = gmm8();
    for rep in 0..5 {
        let mut sa = Stream::new(derive(Seed(100), rep), "a");
        let mut sb = Stream::new(derive(Seed(200), rep), "b");
        let a: Vec<Vec<f64>> = (0..512).map(|_| g.sample_one(&mut sa)).collect();
        let b: Vec<Vec<f64>> = (0..512).map(|_| g.sample_one(&mut sb)).collect();
        let (_, cost) = solve_assignment(&a, &b).unwrap();
        println!("gmm8 floor rep {rep}: W2 = {:.4}", cost.sqrt());
    }

    // 2. SDE vs ODE with the analytic score, toy two-mode prior
    let sch = VpSchedule::default_schedule();
    let prior = toy_two_mode();
    let source = ScoreSource::AnalyticGmm(prior.clone());
    let t_min = 1e-3;
    let n = 512;
    for steps in [500usize, 1000] {
        // shared initialization
        let y0s: Vec<Vec<f64>> = (0..n)
            .map(|i| Stream::substream(Seed(7), "diffusion/reverse", i as u64).standard_normal_vec(1))
            .collect();
        let sde = reverse_sde_from(&source, &sch, &y0s, steps, Seed(7), t_min).unwrap();
        // ODE from the same initial points
        let field = prob_flow_field(source.clone(), sch, t_min);
        let ode: Vec<Vec<f64>> = y0s
            .iter()
            .map(|y0| {
                flowlab::odeint::integrate(&field, y0, 0.0, 1.0, &SolverSpec::rk4(200))
                    .unwrap()
                    .endpoint()
                    .to_vec()
            })
            .collect();
        let xs: Vec<f64> = sde.iter().map(|v| v[0]).collect();
        let ys: Vec<f64> = ode.iter().map(|v| v[0]).collect();
        println!(
            "SDE vs ODE shared-init, steps {steps}: W2 = {:.4}",
            wasserstein_1d(&xs, &ys).unwrap()
        );
        // independent draws comparison
        let sde2 = reverse_sde_sample(&source, &sch, n, steps, Seed(8), t_min).unwrap();
        let ode2 = sample_flow(&field, n, &SolverSpec::rk4(200), Seed(9), 0.0).unwrap();
        let xs2: Vec<f64> = sde2.iter().map(|v| v[0]).collect();
        let ys2: Vec<f64> = ode2.iter().map(|v| v[0]).collect();
        println!(
            "SDE vs ODE independent, steps {steps}: W2 = {:.4}",
            wasserstein_1d(&xs2, &ys2).unwrap()
        );
    }

    // 3. score magnitude on the bulk for the toy prior
    let mut max_s: f64 = 0.0;
    for it in 0..9 {
        let t = 0.2 + 0.1 * it as f64;
        let marg = vp_marginal(&prior, &sch, t).unwrap();
        for ix in 0..61 {
            let x = -3.0 + 0.1 * ix as f64;
            max_s = max_s.max(marg.score(&[x])[0].abs());
        }
    }
    println!("toy prior: max |score| on bulk grid = {max_s:.3}");
}
