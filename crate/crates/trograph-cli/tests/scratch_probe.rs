//! Throwaway probe of the toy training recipe; not part of the suite.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trograph::denoiser::{train, DenoiserModel, ModelConfig, TrainConfig};
use trograph::diffusion::{linear_schedule, sample, GuidanceKind, GuidanceSpec};
use trograph::graph::TroGraph;
use trograph::iksolver::{solve_ik, IkProblem};
use trograph::kinematics::forward_kinematics;
use trograph::se3::{compose, exp_map, geodesic_so3, Pose6, TransformMatrix};
use trograph::synthdata::{
    demo_graph, generate_demos, generate_hand, GraspDemo, HandTemplate, ObjectShape,
};

fn clustered_demos(demos: &[GraspDemo], keep: usize) -> Vec<&GraspDemo> {
    let r0 = demos[0].base.rotation;
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.sort_by(|&a, &b| {
        let da = geodesic_so3(&demos[a].base.rotation, &r0).unwrap();
        let db = geodesic_so3(&demos[b].base.rotation, &r0).unwrap();
        da.partial_cmp(&db).unwrap()
    });
    order.iter().take(keep).map(|&i| &demos[i]).collect()
}

#[test]
#[ignore]
fn probe_recipe() {
    let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).expect("hand");
    let shape = ObjectShape::Sphere { radius: 0.022 };
    let batch = generate_demos(&hand, &shape, 64, 515).expect("demos");
    let chosen = clustered_demos(&batch.demos, 16);
    let r0 = chosen[0].base.rotation;
    let widest = chosen
        .iter()
        .map(|d| geodesic_so3(&d.base.rotation, &r0).unwrap())
        .fold(0.0f64, f64::max);
    println!("cluster spans {widest:.3} rad over {} demos", chosen.len());

    let graphs: Vec<TroGraph> = chosen
        .iter()
        .map(|d| demo_graph(&hand, &batch.object, &d.q, &d.base, 8, 6, 0).expect("graph"))
        .collect();

    let schedule = linear_schedule(1000, 1e-4, 0.02)
        .and_then(|s| s.with_ddim_steps(20))
        .and_then(|s| s.with_lambda(0.0))
        .expect("schedule");
    let config = ModelConfig { d: 32, layers: 2, l_pad: 6, p: 8, t_max: 1000 };
    let mut model = DenoiserModel::init(config, 4242).expect("model");
    let train_config = TrainConfig {
        gamma_p: 1.0,
        gamma_r: 1.0,
        epochs: 2000,
        batch: 16,
        lr: 5e-3,
        lr_decay: 0.92,
        lr_decay_epochs: 400,
        seed: 4242,
    };
    let started = std::time::Instant::now();
    let outcome = train(&mut model, &graphs, &schedule, &train_config, None).expect("train");
    println!("train {:.0} s, {} steps", started.elapsed().as_secs_f64(), outcome.loss_trace.len());
    let smooth: Vec<f64> =
        outcome.loss_trace.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let best = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "initial smoothed {:.3}, best {best:.3} ({:.1}%)",
        smooth[0],
        100.0 * best / smooth[0]
    );

    // Where does the remaining loss live across noise levels?
    let mut diag_rng = ChaCha8Rng::seed_from_u64(999);
    for &t in &[10usize, 50, 100, 250, 500, 750, 1000] {
        let mut acc = 0.0;
        let mut n = 0;
        for g in &graphs {
            for _ in 0..4 {
                let (noisy_rows, eps) = trograph::diffusion::forward_noise(
                    &g.link_nodes.poses,
                    &g.link_nodes.mask,
                    t,
                    &schedule,
                    &mut diag_rng,
                )
                .expect("noise");
                let mut noisy = g.clone();
                noisy.link_nodes.poses = noisy_rows;
                let (loss, _) = model.backward(&noisy, t, &eps, 1.0, 1.0).expect("loss");
                acc += loss;
                n += 1;
            }
        }
        println!("eval loss at t={t:4}: {:.3}", acc / n as f64);
    }

    // Does a denser late grid alone fix the chain?
    let fine = linear_schedule(1000, 1e-4, 0.02)
        .and_then(|s| s.with_ddim_steps(100))
        .and_then(|s| s.with_lambda(0.0))
        .expect("fine schedule");
    let _ = &fine;

    // Per-demo reconstruction: renoise the demo graph to t*, denoise back.
    let t_star = schedule.nearest_grid_step(500);
    let spec = GuidanceSpec {
        kind: GuidanceKind::None,
        t_star: Some(t_star),
        strength_max: 0.0,
        palm_row: hand.hand.link_index(&hand.palm_link).expect("palm"),
    };
    let mut hits = 0;
    for i in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000);
        rng.set_stream(i);
        let (out, _) =
            sample(&graphs[i as usize], &schedule, &model, Some(&spec), &mut rng).expect("chain");
        let targets: Vec<Pose6> = out
            .link_nodes
            .poses
            .iter()
            .zip(&out.link_nodes.mask)
            .filter(|(_, &real)| real)
            .map(|(row, _)| Pose6::from_slice(row))
            .collect();
        let mask = vec![true; targets.len()];
        let problem = IkProblem::new(hand.hand.clone(), targets, mask).expect("problem");
        let mut solver_rng = ChaCha8Rng::seed_from_u64(7100 + i);
        let solution = solve_ik(&problem, None, &mut solver_rng).expect("solve");
        let fk = forward_kinematics(&hand.hand, &solution.q).expect("fk");
        let mut worst_tip = 0.0f64;
        for tip in &hand.fingertips {
            let link = hand.hand.link_index(&tip.link).expect("link");
            let world = compose(&solution.base, &fk[link]);
            let p = world.rotation * Vector3::new(tip.offset[0], tip.offset[1], tip.offset[2])
                + world.translation;
            worst_tip = worst_tip.max(shape.signed_distance(&p).abs());
        }
        println!("sample {i:2}: worst fingertip {:.4} m, ik residual {:.2e}", worst_tip, solution.residual);
        if worst_tip < 0.01 {
            hits += 1;
        }
    }
    println!("hits {hits}/16");
}
