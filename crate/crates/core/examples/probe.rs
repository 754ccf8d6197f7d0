// Scratch probe: train one pattern and verify by simulation.
// Usage: cargo run --release -p swarm-core --example probe -- ring [seed]

use swarm_core::trainer::{train, verify_by_simulation, PatternSpec, TrainingConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map(String::as_str).unwrap_or("ring");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = match kind {
        "ring" => PatternSpec::ring(4.0),
        "ring2" => PatternSpec::ring(2.0),
        "clumps" => PatternSpec::clumps(4.0, 2.0),
        "mill" => PatternSpec::mill_single(2.0, 1),
        "milld" => PatternSpec::mill_double(2.0),
        "ordered" => PatternSpec::ordered_timed(1.0, 20.0),
        "flock" => PatternSpec::flock(4.0, 4.0),
        other => panic!("unknown pattern {other}"),
    };
    let mut config = TrainingConfig::defaults(seed);
    if let Ok(v) = std::env::var("PROBE_ADAM") {
        config.adam_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_NT") {
        config.n_time_points = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_HISTORY") {
        config.lbfgs_history = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_LBFGS_MAX") {
        config.lbfgs_max_iterations = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_K") {
        config.poly_terms = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_HORIZON") {
        config.horizon = Some(v.parse().unwrap());
    }
    let t0 = std::time::Instant::now();
    let (model, _params, report) = train(&spec, &config).expect("training");
    println!(
        "trained {} in {:.1}s: loss {:.6} (ode {:.6}) termination {} after adam {} + lbfgs {}",
        kind,
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report.final_ode_loss,
        report.termination,
        report.adam_epochs_run,
        report.lbfgs_iterations
    );
    for (k, v) in &report.final_terms {
        if *v > 1e-12 {
            println!("  term {k}: {v:.6}");
        }
    }
    let curve = &report.loss_curve;
    let stride = (curve.len() / 20).max(1);
    let samples: Vec<String> = curve
        .iter()
        .step_by(stride)
        .map(|l| format!("{l:.4}"))
        .collect();
    println!("  loss curve ({} evals): {}", curve.len(), samples.join(" "));
    println!("  f: {:?}", model.distancing.terms());
    println!("  g: {:?}", model.aligning.terms());
    for r in [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0] {
        print!("  f({r}) = {:+.4}", model.distancing.eval(r).unwrap_or(f64::NAN));
        if !model.aligning.is_zero() {
            print!("   g({r}) = {:+.4}", model.aligning.eval(r).unwrap_or(f64::NAN));
        }
        println!();
    }

    // per-time diagnostics of the trained trajectories
    let horizon = report.horizon;
    for idx in 0..6 {
        let tn = -1.0 + 2.0 * idx as f64 / 5.0;
        let controls: Vec<f64> = spec.t_order.map(|t| vec![t / horizon]).unwrap_or_default();
        let jets = swarm_core::network::forward_jet(&_params, tn, horizon, &controls);
        let n = jets.len() / 2;
        let mut mean_speed = 0.0;
        let mut mean_acc = 0.0;
        let mut mean_r = 0.0;
        let mut mean_force = 0.0;
        let pos: Vec<(f64, f64)> = jets.chunks_exact(2).map(|c| (c[0].value, c[1].value)).collect();
        for i in 0..n {
            let (vx, vy) = (jets[2 * i].first, jets[2 * i + 1].first);
            let (ax, ay) = (jets[2 * i].second, jets[2 * i + 1].second);
            mean_speed += (vx * vx + vy * vy).sqrt();
            mean_acc += (ax * ax + ay * ay).sqrt();
            mean_r += (pos[i].0 * pos[i].0 + pos[i].1 * pos[i].1).sqrt();
            let (mut fx, mut fy) = (0.0, 0.0);
            for j in 0..n {
                if i != j {
                    let dx = pos[i].0 - pos[j].0;
                    let dy = pos[i].1 - pos[j].1;
                    let r = (dx * dx + dy * dy).sqrt().max(1e-6);
                    let c = model.distancing.eval(r).unwrap_or(f64::NAN) / r;
                    fx += c * dx;
                    fy += c * dy;
                }
            }
            mean_force += (fx * fx + fy * fy).sqrt();
        }
        println!(
            "  t={:.1}: mean|v|={:.3} mean|a|={:.3} mean r={:.3} mean|F|={:.3}",
            (tn + 1.0) * horizon / 2.0,
            mean_speed / n as f64,
            mean_acc / n as f64,
            mean_r / n as f64,
            mean_force / n as f64
        );
    }

    let t1 = std::time::Instant::now();
    let report = verify_by_simulation(&model, &spec, 10, 1234).expect("verify");
    println!(
        "verify: {}/{} success ({} diverged) in {:.1}s",
        report.successes,
        report.n_trials,
        report.diverged,
        t1.elapsed().as_secs_f64()
    );
    for (k, s) in &report.per_metric {
        println!("  {k}: mean {:.4} std {:.4}", s.mean, s.std);
    }
    for t in &report.trials {
        println!(
            "  trial seed {}: success {} diverged {} reasons {:?}",
            t.seed, t.success, t.diverged, t.reasons
        );
    }
}
