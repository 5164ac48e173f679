//! Scratch probe (not committed).
use bodyfit::camera::Camera;
use bodyfit::model::build_template_model;
use bodyfit::raster::{soft_coverage_2d, soft_coverage_grad_2d};
use bodyfit::synth::{NoiseSpec, generate_scene};
use nalgebra::Vector2;

fn main() {
    let model = build_template_model(3).unwrap();
    let camera = Camera::default_for_size(48, 48);
    let scene = generate_scene(&model, 1001, &NoiseSpec::zero(), &camera, None).unwrap();
    let posed = model.forward(&scene.gt_params).unwrap();
    let proj = camera.project(&posed.vertices).unwrap();
    let tau = 0.5;
    let (w, h) = (48usize, 48usize);
    let soft = soft_coverage_2d(&proj, &model.faces, w, h, tau).unwrap();
    // Directional derivative wrt uniform x-shift of all vertices.
    let step = 1e-5;
    let mut hi = proj.clone();
    let mut lo = proj.clone();
    for v in hi.iter_mut() {
        v.x += step;
    }
    for v in lo.iter_mut() {
        v.x -= step;
    }
    let shi = soft_coverage_2d(&hi, &model.faces, w, h, tau).unwrap();
    let slo = soft_coverage_2d(&lo, &model.faces, w, h, tau).unwrap();
    let mut worst = (0.0f64, 0usize, 0usize, 0.0, 0.0, 0.0);
    let mut total_an = 0.0;
    let mut total_fd = 0.0;
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let fd = (shi.values[idx] - slo.values[idx]) / (2.0 * step);
            let mut up = vec![0.0; w * h];
            up[idx] = 1.0;
            let g = soft_coverage_grad_2d(&proj, &model.faces, &soft, tau, &up);
            let an: f64 = g.iter().map(|v: &Vector2<f64>| v.x).sum();
            total_an += an;
            total_fd += fd;
            let err = (an - fd).abs();
            if err > worst.0 {
                worst = (err, x, y, an, fd, soft.values[idx]);
            }
        }
    }
    println!("sum an {total_an:.4} fd {total_fd:.4}");
    println!(
        "worst pixel ({},{}): an {:.4} fd {:.4} S {:.4} err {:.4}",
        worst.1, worst.2, worst.3, worst.4, worst.5, worst.0
    );
}
