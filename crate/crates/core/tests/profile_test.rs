use dometac::config::PipelineConfig;
use dometac::pipeline::{FrameProcessor, ProcessOptions, ProcessorParts};
use dometac::sim::{render_frame, render_sequence, ContactScenario, HardnessClass, IndenterShape, SensorBuild, SensorModel};
use dometac::wrench::Wrench;
use nalgebra::Vector3;
use std::time::Instant;

#[test]
fn profile_stages() {
    let model = SensorModel::assemble(SensorBuild::default()).unwrap();
    let sc = ContactScenario::ramp(
        10,
        Wrench::new(Vector3::new(1.0, 0.5, 6.0), Vector3::new(5.0, -4.0, 2.0)),
        0.8,
        IndenterShape::Sphere { radius_mm: 5.0 },
        Vector3::new(0.0, 0.0, -1.0),
        HardnessClass::Hard,
        0.05,
    );
    let t0 = Instant::now();
    for k in 0..6 { let _ = render_frame(&model, &sc, k % 10); }
    println!("render_frame: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / 6.0);

    let (frames, _) = render_sequence(&model, &sc).unwrap();
    let cfg = PipelineConfig::standard();
    let mut proc = FrameProcessor::new(ProcessorParts::matching_model(&model, &cfg));
    proc.process(&frames[0], &ProcessOptions::default()).unwrap();
    let t1 = Instant::now();
    for k in 1..10 { proc.process(&frames[k], &ProcessOptions::default()).unwrap(); }
    println!("process: {:.1} ms", t1.elapsed().as_secs_f64() * 1e3 / 9.0);

    // stage splits
    use dometac::imageproc::*;
    use dometac::camera::*;
    let map = undistort_map(&model.intrinsics, &model.distortion);
    let t = Instant::now();
    for _ in 0..10 { let _ = undistort_frame(&frames[3], &map).unwrap(); }
    println!("undistort: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 10.0);
    let u = undistort_frame(&frames[3], &map).unwrap();
    let t = Instant::now();
    for _ in 0..10 { let _ = gaussian_blur(&u, 1.0); }
    println!("blur: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 10.0);
    let b = gaussian_blur(&u, 1.0);
    let m = circular_mask(&b);
    let t = Instant::now();
    for _ in 0..10 { let _ = sharpen(&m, 0.5, 1.0); }
    println!("sharpen: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 10.0);
    let s = sharpen(&m, 0.5, 1.0);
    let t = Instant::now();
    for _ in 0..10 { let _ = to_gray(&s); }
    println!("gray: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 10.0);
    let g = to_gray(&s);
    let t = Instant::now();
    for _ in 0..10 { let _ = extract_markers(&g, MarkerKind::White, &cfg.white_markers).unwrap(); }
    println!("white extract: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / 10.0);
}

#[test]
fn profile_pipeline_steps() {
    use dometac::flow::*;
    let model = SensorModel::assemble(SensorBuild::default()).unwrap();
    let sc = ContactScenario::ramp(
        10,
        Wrench::new(Vector3::new(1.0, 0.5, 6.0), Vector3::new(5.0, -4.0, 2.0)),
        0.8,
        IndenterShape::Sphere { radius_mm: 5.0 },
        Vector3::new(0.0, 0.0, -1.0),
        HardnessClass::Hard,
        0.05,
    );
    let (frames, _) = render_sequence(&model, &sc).unwrap();
    let cfg = PipelineConfig::standard();
    use dometac::imageproc::*;
    use dometac::camera::*;
    let map = undistort_map(&model.intrinsics, &model.distortion);

    let u = undistort_frame(&frames[3], &map).unwrap();
    let b = gaussian_blur(&u, 1.0);
    let m = circular_mask(&b);
    let s = sharpen(&m, 0.5, 1.0);
    let g = to_gray(&s);
    let t = Instant::now();
    for _ in 0..10 { let _ = circular_mask(&b); }
    println!("mask: {:.2} ms", t.elapsed().as_secs_f64() * 1e2);
    let t = Instant::now();
    for _ in 0..10 { let _ = prepare_pyramid(&g, 3).unwrap(); }
    println!("prepare_pyramid: {:.2} ms", t.elapsed().as_secs_f64() * 1e2);

    // LK on ~190 points
    let black = extract_markers(&g, MarkerKind::Black, &cfg.black_markers).unwrap();
    println!("black count {}", black.len());
    let prev_p = prepare_pyramid(&g, 3).unwrap();
    let g2 = {
        let u = undistort_frame(&frames[4], &map).unwrap();
        let b = gaussian_blur(&u, 1.0);
        let m = circular_mask(&b);
        to_gray(&sharpen(&m, 0.5, 1.0))
    };
    let next_p = prepare_pyramid(&g2, 3).unwrap();
    let t = Instant::now();
    for _ in 0..10 { let _ = lk_track_prepared(&prev_p, &next_p, &black.centroids, &LkConfig::default()).unwrap(); }
    println!("lk_track_prepared: {:.2} ms", t.elapsed().as_secs_f64() * 1e2);

    let t = Instant::now();
    for _ in 0..10 { let _ = extract_markers(&g, MarkerKind::Black, &cfg.black_markers).unwrap(); }
    println!("black extract: {:.2} ms", t.elapsed().as_secs_f64() * 1e2);
}
