use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use frad_core::fixtures::{aspirin_heavy, propyl_cyclohexane};
use frad_core::geometry::internal_coords;
use frad_core::geometry::noise::perturb;
use frad_core::geometry::rotate_torsion;
use frad_core::linearize::{analytic_c_rn, score_target, TargetKind};
use frad_core::net::{forward, loss_and_grad, property_and_forces, Denoise, Hyper, ModelParams, Objective, ObjectiveKind, Sample};
use frad_core::pes::{generate_dataset, minimize, GenConfig, MinimizeOptions};
use frad_core::{FradRng, NoiseSpec};

fn geometry(c: &mut Criterion) {
    let (mol, x) = propyl_cyclohexane();
    let rb = mol.rotatable()[0].clone();
    c.bench_function("rotate_torsion", |b| b.iter(|| rotate_torsion(black_box(&x), &rb, 0.3).unwrap()));
    c.bench_function("internal_coords", |b| b.iter(|| internal_coords(black_box(&mol), &x).unwrap()));
    let spec = NoiseSpec::rn(2.0, 0.04);
    let mut rng = FradRng::new(0, 0);
    c.bench_function("perturb_rn", |b| b.iter(|| perturb(&mol, &x, &spec, &mut rng).unwrap()));
}

fn linearize(c: &mut Criterion) {
    let (mol, x) = aspirin_heavy();
    c.bench_function("analytic_c_rn", |b| b.iter(|| analytic_c_rn(black_box(&mol), &x).unwrap()));
    let lin = analytic_c_rn(&mol, &x).unwrap();
    let rec = perturb(&mol, &x, &NoiseSpec::rn(2.0, 0.04), &mut FradRng::new(1, 0)).unwrap();
    let var = vec![4.0; lin.m()];
    c.bench_function("hybrid_score_target", |b| {
        b.iter(|| score_target(TargetKind::Hybrid, &rec.x_fin, &x, &lin.c, &var, 0.04).unwrap())
    });
}

fn pes(c: &mut Criterion) {
    let (ds, _) = generate_dataset(&GenConfig { count: 1, ..Default::default() }, 2).unwrap();
    let e = &ds.entries[0];
    let start = perturb(&e.molecule().unwrap(), &e.coords, &NoiseSpec::rn(0.5, 0.02), &mut FradRng::new(3, 0))
        .unwrap()
        .x_fin;
    let mut g = c.benchmark_group("pes");
    g.sample_size(10);
    g.bench_function("minimize", |b| b.iter(|| minimize(&e.ff, &start, &MinimizeOptions::default()).unwrap()));
    g.finish();
}

fn net(c: &mut Criterion) {
    let p = ModelParams::init(Hyper::default(), &mut FradRng::new(0, 0)).unwrap();
    let (mol, x) = aspirin_heavy();
    c.bench_function("forward", |b| b.iter(|| forward(&p, mol.atoms(), black_box(&x)).unwrap()));
    c.bench_function("property_and_forces", |b| b.iter(|| property_and_forces(&p, mol.atoms(), &x).unwrap()));
    let s = Sample {
        id: 0,
        atoms: mol.atoms().to_vec(),
        denoise: Some(Denoise {
            x_fin: x.clone(),
            target: vec![0.01; 3 * mol.n_atoms()],
            tau: 0.04,
        }),
        supervised: None,
    };
    let obj = Objective::new(ObjectiveKind::Frad);
    c.bench_function("loss_and_grad_frad", |b| b.iter(|| loss_and_grad(&p, std::slice::from_ref(&s), &obj).unwrap()));
}

criterion_group!(benches, geometry, linearize, pes, net);
criterion_main!(benches);
