//! Scratch probe (not committed): per-joint / per-bone error decomposition.
use bodyfit::camera::Camera;
use bodyfit::energy::TermWeights;
use bodyfit::metrics::{evaluate_scene, umeyama_align};
use bodyfit::model::{BodyParams, build_template_model};
use bodyfit::optim::{FitConfig, StageConfig, fit_staged};
use bodyfit::synth::{NoiseSpec, generate_scene};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturbed_init(gt: &BodyParams, seed: u64) -> BodyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = gt.clone();
    for t in init.theta.iter_mut() {
        let dir = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        *t += dir * 0.05;
    }
    for b in init.beta.iter_mut() {
        *b += if rng.gen_range(0.0..1.0) < 0.5 { 0.2 } else { -0.2 };
    }
    init
}

fn init_bone(model: &bodyfit::model::BodyModel, vi: usize) -> usize {
    model.skin_weights[vi][0].0
}

fn main() {
    let model = build_template_model(6).unwrap();
    let camera = Camera { fx: 96.0, fy: 96.0, cx: 96.0, cy: 96.0, width: 192, height: 192 };
    let base = TermWeights::default();
    let weak = TermWeights { w_pose: 1e-5, w_shape: 1e-5, ..base };
    let sil = TermWeights { lambda_m: 0.3, lambda_d: 0.0, ..weak };
    let kp_config = FitConfig {
        stages: vec![StageConfig {
            weights: weak,
            enable_silhouette: false,
            iterations: 40,
            ..StageConfig::default()
        }],
        ..FitConfig::default()
    };
    let sil_config = FitConfig {
        stages: vec![
            StageConfig {
                weights: sil,
                enable_silhouette: true,
                disentangled: true,
                iterations: 150,
                ..StageConfig::default()
            },
            StageConfig {
                weights: TermWeights { lambda_k: 10.0, lambda_m: 0.05, ..sil },
                enable_silhouette: true,
                iterations: 120,
                ..StageConfig::default()
            },
        ],
        tau: 0.5,
        ..FitConfig::default()
    };
    for seed in [304u64, 302, 305] {
        let scene = generate_scene(&model, seed, &NoiseSpec::zero(), &camera, None).unwrap();
        let init = perturbed_init(&scene.gt_params, seed ^ 0xabcd);
        let mi = evaluate_scene(&model, &scene, &init, None).unwrap();
        let gt_posed0 = model.forward(&scene.gt_params).unwrap();
        let init_posed = model.forward(&init).unwrap();
        let (s0, r0, t0) = umeyama_align(&init_posed.vertices, &gt_posed0.vertices).unwrap();
        let mut sums0 = vec![(0.0f64, 0usize); model.parent.len()];
        for (vi, v) in init_posed.vertices.iter().enumerate() {
            let err = ((r0 * v * s0 + t0) - gt_posed0.vertices[vi]).norm();
            let b = init_bone(&model, vi);
            sums0[b].0 += err;
            sums0[b].1 += 1;
        }
        println!(
            "seed {seed} INIT pa {:.2}mm worst bones {:?}",
            mi.pa_v2v * 1e3,
            {
                let mut v: Vec<(usize, f64)> = sums0
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, n))| *n > 0)
                    .map(|(b, (s, n))| (b, (s / *n as f64 * 1e3 * 10.0).round() / 10.0))
                    .collect();
                v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                v.truncate(4);
                v
            }
        );
        let (p1, _) = fit_staged(&model, None, &scene.observation, &kp_config, &init).unwrap();
        let (params, _) = fit_staged(&model, None, &scene.observation, &sil_config, &p1).unwrap();
        let m = evaluate_scene(&model, &scene, &params, None).unwrap();
        println!(
            "== seed {seed}: pa_v2v {:.2}mm iou {:.3} rmse {:.3}px",
            m.pa_v2v * 1e3,
            m.iou,
            m.keypoint_rmse
        );
        {
            let ep = model.forward(&params).unwrap();
            let gp = model.forward(&scene.gt_params).unwrap();
            let pe = camera.project(&ep.joints).unwrap();
            let pg = camera.project(&gp.joints).unwrap();
            for j in [10usize, 11, 12, 13, 14, 15] {
                println!(
                    "  joint {j:2}: kp resid {:.3}px  dz {:+.1}mm",
                    (pe[j] - pg[j]).norm(),
                    (ep.joints[j].z - gp.joints[j].z) * 1e3
                );
            }
        }
        let dbeta: Vec<f64> = params
            .beta
            .iter()
            .zip(&scene.gt_params.beta)
            .map(|(a, b)| a - b)
            .collect();
        println!("  dbeta {:?}", dbeta.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
        println!("  dt    {:?}", params.trans_t - scene.gt_params.trans_t);
        println!("  drot  {:?}", params.trans_rot - scene.gt_params.trans_rot);
        // Per-joint theta error, split into twist (about the mean child-bone
        // direction in the parent frame) and swing.
        let gt_posed = model.forward(&scene.gt_params).unwrap();
        let est_posed = model.forward(&params).unwrap();
        for j in 0..model.parent.len() {
            let d = params.theta[j] - scene.gt_params.theta[j];
            if d.norm() < 1e-4 {
                continue;
            }
            // child bone rest direction(s) from joint j
            let mut bone_dir = Vector3::zeros();
            for (c, &p) in model.parent.iter().enumerate() {
                if p == j && c != j {
                    bone_dir += (model.rest_joints[c] - model.rest_joints[j]).normalize();
                }
            }
            let (tw, sw) = if bone_dir.norm() > 1e-9 {
                let axis = bone_dir.normalize();
                let t = d.dot(&axis);
                (t.abs(), (d - axis * t).norm())
            } else {
                (0.0, d.norm())
            };
            println!("  joint {j:2}: |d| {:.3} twist {:.3} swing {:.3}", d.norm(), tw, sw);
        }
        // Per-bone mean aligned vertex error.
        let (s, r, t) = umeyama_align(&est_posed.vertices, &gt_posed.vertices).unwrap();
        let mut sums = vec![(0.0f64, 0usize); model.parent.len()];
        for (vi, v) in est_posed.vertices.iter().enumerate() {
            let aligned = r * v * s + t;
            let err = (aligned - gt_posed.vertices[vi]).norm();
            let b = model.skin_weights[vi][0].0;
            sums[b].0 += err;
            sums[b].1 += 1;
        }
        for (b, (sum, n)) in sums.iter().enumerate() {
            if *n > 0 {
                println!("  bone {b:2}: mean aligned err {:.2}mm over {n}", sum / *n as f64 * 1e3);
            }
        }
    }
}
