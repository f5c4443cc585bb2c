use nanotile::exec::{audit_trace, run_tiled};
use nanotile::kernels::{infer_untiled, Arithmetic};
use nanotile::l2plan::{plan_two_stack, validate_plan, L2Config};
use nanotile::net::{build_dronet, load_image, load_weights, save_weights, GrayImage, WeightStore};
use nanotile::Error;

#[test]
fn files_to_tiled_prediction() {
    let g = build_dronet();
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.pdrn");
    let ip = dir.path().join("f.pgm");
    let w = WeightStore::random(&g, 21);
    save_weights(&w, &wp).unwrap();
    let mut img = GrayImage::filled(300, 260, 0);
    for (i, p) in img.pixels.iter_mut().enumerate() {
        *p = (i * 7 % 251) as u8;
    }
    std::fs::write(&ip, img.to_pgm()).unwrap();

    let w2 = load_weights(&wp, &g).unwrap();
    assert_eq!(w2.to_bytes(), w.to_bytes());
    let x = load_image(&ip).unwrap();
    assert_eq!(x.dims(), (1, 200, 200));

    let untiled = infer_untiled(&g, &w2, &x, Arithmetic::Q412).unwrap();
    let real = infer_untiled(&g, &w2, &x, Arithmetic::Real).unwrap();
    assert!((untiled.steering - real.steering).abs() < 0.1);
    let (out, mem) = run_tiled(&g, &w2, &x, 24 * 1024).unwrap();
    assert_eq!(out.prediction, untiled);
    let audit = audit_trace(&out.trace, &mem);
    assert!(audit.ok(), "{}", audit.to_text());
    assert_eq!(audit.macs, out.trace.macs());
}

#[test]
fn l2_plan_is_valid() {
    let g = build_dronet();
    let p = plan_two_stack(&g, &L2Config::default()).unwrap();
    assert!(validate_plan(&p, &g).unwrap().is_empty());
    assert!(p.fits());
}

#[test]
fn bad_inputs_are_distinct_errors() {
    let g = build_dronet();
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.pdrn");
    save_weights(&WeightStore::zeros(&g), &wp).unwrap();
    let bytes = std::fs::read(&wp).unwrap();
    std::fs::write(&wp, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_weights(&wp, &g), Err(Error::Truncated)));
    assert!(matches!(load_weights(dir.path().join("none"), &g), Err(Error::Io(_))));
    let ip = dir.path().join("x.pgm");
    std::fs::write(&ip, b"P2\n2 2\n255\n0 0 0 0").unwrap();
    assert!(matches!(load_image(&ip), Err(Error::PgmHeader(_))));
}
