use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splatfield::camera::CameraView;
use splatfield::raster::{render, render_backward, RenderSettings};
use splatfield::scene::random_init;
use splatfield::tensor::FeatureMap;

fn forward_by_dim(c: &mut Criterion) {
    let view = CameraView::orbit(0.4, 0.5, 3.0, 128, 128).unwrap();
    let mut group = c.benchmark_group("render_forward");
    for dim in [8, 32, 128] {
        let cloud = random_init(2000, dim, 1.0, 0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(dim), &cloud, |b, cloud| {
            b.iter(|| render(cloud, &view, &RenderSettings::default()).unwrap())
        });
    }
    group.finish();
}

fn backward_by_dim(c: &mut Criterion) {
    let view = CameraView::orbit(0.4, 0.5, 3.0, 128, 128).unwrap();
    let mut group = c.benchmark_group("render_backward");
    for dim in [8, 32, 128] {
        let cloud = random_init(2000, dim, 1.0, 0).unwrap();
        let (out, state) = render(&cloud, &view, &RenderSettings::default()).unwrap();
        let d_img = FeatureMap::filled(out.image.height, out.image.width, &[1.0; 3]);
        let d_feat = FeatureMap::filled(out.image.height, out.image.width, &vec![1.0; dim]);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &cloud, |b, cloud| {
            b.iter(|| render_backward(cloud, &state, &d_img, &d_feat).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_by_dim, backward_by_dim);
criterion_main!(benches);
