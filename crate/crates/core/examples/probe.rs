//! Scratch probe (not committed).
use bodyfit::camera::Camera;
use bodyfit::energy::TermWeights;
use bodyfit::metrics::evaluate_scene;
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
            iterations: 300,
            ..StageConfig::default()
        }],
        ..FitConfig::default()
    };
    let sil_config = |tau: f64, iters: usize, disentangled: bool| FitConfig {
        stages: vec![StageConfig {
            weights: sil,
            enable_silhouette: true,
            disentangled,
            iterations: iters,
            ..StageConfig::default()
        }],
        tau,
        ..FitConfig::default()
    };
    let _ = sil_config;
    for seed in 300..306u64 {
        let scene = generate_scene(&model, seed, &NoiseSpec::zero(), &camera, None).unwrap();
        let init = perturbed_init(&scene.gt_params, seed ^ 0xabcd);
        let (mut params, report) =
            fit_staged(&model, None, &scene.observation, &kp_config, &init).unwrap();
        let lsfail = report.line_search_failures;
        // Shape+transform silhouette refinement with pose frozen.
        {
            let obs = &scene.observation;
            let objective = |x: &[f64]| {
                let p = BodyParams::from_flat(x).unwrap();
                bodyfit::energy::total_energy(&p, &model, None, obs, None, &sil, 0.5)
                    .unwrap_or((f64::INFINITY, vec![0.0; x.len()]))
            };
            let x0 = params.to_flat();
            let (e0, _) = objective(&x0);
            println!("  pre-block E {e0:.4e}");
            let mut xr = params.to_flat();
            for _round in 0..3 {
                for block in [
                    vec![51usize],
                    vec![48, 55, 56, 57],
                    vec![49, 50, 52, 53, 54],
                ] {
                    let (xn, _) = bodyfit::optim::alternate_blocks(
                        &objective, &xr, &block, &block, 2, 12, 10, 1e-4, 0.9,
                    )
                    .unwrap();
                    xr = xn;
                }
            }
            let (e1, _) = objective(&xr);
            println!("  post-block E {e1:.4e}");
            params = BodyParams::from_flat(&xr).unwrap();
        }
        let (p2, r2) =
            fit_staged(&model, None, &scene.observation, &sil_config(0.5, 150, false), &params)
                .unwrap();
        params = p2;
        println!("  post-sil E {:.4e} lsfail {}", r2.final_energy, r2.line_search_failures);
        let m = evaluate_scene(&model, &scene, &params, None).unwrap();
        let (e_gt, _) = bodyfit::energy::total_energy(
            &scene.gt_params, &model, None, &scene.observation, None, &sil, 0.5,
        )
        .unwrap();
        println!(
            "seed {seed}: pa_v2v {:.2}mm rmse {:.3}px iou {:.3} E {:.4e} Egt {:.4e} lsfail {}",
            m.pa_v2v * 1e3, m.keypoint_rmse, m.iou, report.final_energy, e_gt, lsfail
        );
        println!("  gt  beta {:?}", scene.gt_params.beta);
        println!("  est beta {:?}", params.beta);
        let dth: f64 = params
            .theta
            .iter()
            .zip(&scene.gt_params.theta)
            .map(|(a, b)| (a - b).norm())
            .sum();
        println!(
            "  sum|dtheta| {:.4}  dt {:?}",
            dth,
            (params.trans_t - scene.gt_params.trans_t)
        );
        // Error attribution: replace each group by GT and re-measure pa.
        let gtp = &scene.gt_params;
        let mut attempts: Vec<(&str, BodyParams)> = Vec::new();
        let mut p = params.clone();
        p.beta = gtp.beta.clone();
        attempts.push(("beta=gt", p));
        let mut p = params.clone();
        p.theta = gtp.theta.clone();
        attempts.push(("theta=gt", p));
        let mut p = params.clone();
        p.trans_t = gtp.trans_t;
        p.trans_rot = gtp.trans_rot;
        attempts.push(("T=gt", p));
        for i in 0..4 {
            let mut p = params.clone();
            p.beta[i] = gtp.beta[i];
            let lbl: &'static str = Box::leak(format!("b{i}=gt").into_boxed_str());
            attempts.push((lbl, p));
        }
        for (lbl, p) in attempts {
            let m2 = evaluate_scene(&model, &scene, &p, None).unwrap();
            print!("  {lbl}: pa {:.2}mm", m2.pa_v2v * 1e3);
        }
        println!();
    }
}
