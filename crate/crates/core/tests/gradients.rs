#[path = "common/grad.rs"]
mod grad;

const TOL: f64 = 1e-4;

fn assert_ok(name: &str, r: catsg::gradcheck::GradCheckReport) {
    let worst = r.worst_param().cloned().unwrap();
    assert!(worst.1 < TOL, "{name}: {} has relative error {:.3e}", worst.0, worst.1);
}

#[test]
fn tcn_gradients() {
    for s in [1, 2] {
        assert_ok("tcn", grad::tcn(s).unwrap());
    }
}

#[test]
fn attention_pool_gradients() {
    for s in [3, 4] {
        assert_ok("attention", grad::attention_pool(s).unwrap());
    }
}

#[test]
fn projection_gradients() {
    assert_ok("projection", grad::projection(5).unwrap());
}

#[test]
fn unet_gradients() {
    assert_ok("unet", grad::unet(6).unwrap());
}

#[test]
fn embedder_gradients() {
    assert_ok("embedders", grad::embedders(7).unwrap());
}
