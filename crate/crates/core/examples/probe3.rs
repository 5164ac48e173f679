//! Scratch probe (not committed).
use bodyfit::camera::Camera;
use bodyfit::energy::{TermWeights, adf_term, keypoint_energy, mask_energy, prior_energy};
use bodyfit::field::asymmetric_field;
use bodyfit::model::{BodyParams, build_template_model};
use bodyfit::synth::{NoiseSpec, generate_scene};

fn main() {
    let model = build_template_model(6).unwrap();
    let camera = Camera::default_for_size(96, 96);
    let scene = generate_scene(&model, 300, &NoiseSpec::zero(), &camera, None).unwrap();
    let w = TermWeights::default();
    let field = asymmetric_field(scene.observation.silhouette.as_ref().unwrap(), 1.0, 0.1).unwrap();
    let tau = 0.5;
    let report = |label: &str, p: &BodyParams| {
        let kp = keypoint_energy(p, &model, None, &scene.observation, &w).unwrap().0;
        let me = mask_energy(p, &model, &scene.observation, tau).unwrap().0;
        let ad = adf_term(p, &model, &scene.observation, &field, tau).unwrap().0;
        let pr = prior_energy(p, &model, &w).0;
        println!("{label}: kp {kp:.3e} mask {me:.3e} adf {ad:.3e} prior(w=1) {pr:.3e}");
    };
    report("GT", &scene.gt_params);
    let mut shrunk = scene.gt_params.clone();
    shrunk.beta[3] -= 1.0;
    report("girth-1", &shrunk);
    let mut grown = scene.gt_params.clone();
    grown.beta[3] += 0.5;
    report("girth+0.5", &grown);
}
