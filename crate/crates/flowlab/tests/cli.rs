//! End-to-end command-line checks: exit codes, run-directory layout, and
//! byte-identical reruns.

use flowlab::cli::run;

fn tmpdir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("flowlab-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn args(parts: &[&str]) -> Vec<String> {
    let mut v = vec!["flowlab".to_string()];
    v.extend(parts.iter().map(|s| s.to_string()));
    v
}

#[test]
fn selftest_passes() {
    assert_eq!(run(args(&["selftest", "--quick"])), 0);
}

#[test]
fn unknown_flags_are_rejected() {
    assert_eq!(run(args(&["selftest", "--verbose"])), 1);
    assert_eq!(run(args(&["frobnicate"])), 1);
    assert_eq!(run(args(&["--help"])), 0);
}

#[test]
fn missing_files_exit_with_validation_error() {
    assert_eq!(
        run(args(&["train", "--config", "/nonexistent/path.conf"])),
        1
    );
    assert_eq!(
        run(args(&["sample", "--ckpt", "/nonexistent/model.bin", "--n", "4"])),
        1
    );
}

#[test]
fn bad_config_exits_with_validation_error() {
    let dir = tmpdir("badconf");
    let conf = dir.join("bad.conf");
    std::fs::write(&conf, "target = cifar10\n").unwrap();
    assert_eq!(run(args(&["train", "--config", conf.to_str().unwrap()])), 1);
}

#[test]
fn train_rerun_is_bit_identical_and_sampling_works() {
    let dir = tmpdir("train");
    let conf = dir.join("tiny.conf");
    std::fs::write(
        &conf,
        "target = gmm8\ncoupling = minibatch_ot\nepochs = 1\nsamples = 128\nbatch_size = 32\not_batch_size = 64\nhidden = 8,8\nseed = 5\n",
    )
    .unwrap();
    let out = dir.join("runs");

    let run_once = |name: &str| {
        assert_eq!(
            run(args(&[
                "train",
                "--config",
                conf.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--name",
                name,
            ])),
            0
        );
        let base = out.join(name);
        let read = |f: &str| std::fs::read(base.join(f)).unwrap();
        (
            read("config.resolved"),
            read("model.bin"),
            read("loss.csv"),
            read("samples.csv"),
        )
    };
    let a = run_once("a");
    let b = run_once("b");
    assert_eq!(a.0, b.0, "config echo differs");
    assert_eq!(a.1, b.1, "checkpoint differs");
    assert_eq!(a.2, b.2, "loss log differs");
    assert_eq!(a.3, b.3, "samples differ");

    // re-running from the echoed config reproduces the run
    let echoed = out.join("a").join("config.resolved");
    assert_eq!(
        run(args(&[
            "train",
            "--config",
            echoed.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--name",
            "c",
        ])),
        0
    );
    assert_eq!(a.1, std::fs::read(out.join("c").join("model.bin")).unwrap());

    // sample from the checkpoint: shape n rows x d columns
    let samples_csv = dir.join("s.csv");
    assert_eq!(
        run(args(&[
            "sample",
            "--ckpt",
            out.join("a").join("model.bin").to_str().unwrap(),
            "--n",
            "17",
            "--steps",
            "8",
            "--out",
            samples_csv.to_str().unwrap(),
        ])),
        0
    );
    let text = std::fs::read_to_string(&samples_csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 17);
    assert!(rows.iter().all(|r| r.split(',').count() == 2));

    // likelihood over those samples runs and prints a finite value
    assert_eq!(
        run(args(&[
            "likelihood",
            "--ckpt",
            out.join("a").join("model.bin").to_str().unwrap(),
            "--data",
            samples_csv.to_str().unwrap(),
            "--steps",
            "16",
        ])),
        0
    );

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_ot_emits_cost_table() {
    let dir = tmpdir("evalot");
    let out = dir.join("ot.csv");
    assert_eq!(run(args(&["eval-ot", "--out", out.to_str().unwrap()])), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("instance,beta,cost,w_mass\n"));
    assert_eq!(text.lines().count(), 11); // header + 2 instances x 5 betas
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_field_grid_has_small_residuals() {
    let dir = tmpdir("evalfield");
    let out = dir.join("field.csv");
    assert_eq!(
        run(args(&[
            "eval-field",
            "--kind",
            "gaussian-latent",
            "--grid",
            "7",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "t,x,v,p,residual");
    for row in rows {
        let fields: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields.len(), 5);
        assert!(fields[4].abs() < 1e-3, "residual {row}");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bayes_commands_run() {
    let dir = tmpdir("bayes");
    let sims = dir.join("sims.csv");
    assert_eq!(
        run(args(&[
            "bayes",
            "simulate",
            "--n",
            "5",
            "--out",
            sims.to_str().unwrap(),
        ])),
        0
    );
    let text = std::fs::read_to_string(&sims).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 10);

    let post = dir.join("post.csv");
    assert_eq!(
        run(args(&[
            "bayes",
            "posterior",
            "--y",
            "0.1,0.0,-0.1,0.05,0.2",
            "--out",
            post.to_str().unwrap(),
        ])),
        0
    );
    let text = std::fs::read_to_string(&post).unwrap();
    assert_eq!(text.lines().count(), 11); // header + 10 components
    assert_eq!(run(args(&["bayes", "posterior", "--y", "1,2"])), 1);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn diffusion_sample_analytic_runs() {
    let dir = tmpdir("diffusion");
    let out = dir.join("d.csv");
    assert_eq!(
        run(args(&[
            "diffusion",
            "sample",
            "--n",
            "16",
            "--steps",
            "50",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 16);
    // ODE route
    assert_eq!(
        run(args(&[
            "diffusion",
            "sample",
            "--n",
            "8",
            "--steps",
            "50",
            "--ode",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 8);
    let _ = std::fs::remove_dir_all(&dir);
}
