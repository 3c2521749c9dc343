use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sracp_core::bev::{build_occupancy, occlusion_map, transmittance, BlindZoneMask, OccupancyField};
use sracp_core::fusion::SurrogateFeatures;
use sracp_core::payload::{serialize_payload, PayloadHeader};
use sracp_core::protocol::SensorConfig;
use sracp_core::scenario::{generate_scene, raycast_points, ScenarioKind, ScenarioParams};
use sracp_core::selection::{capacity_cells, compute_gain, select_cells, BudgetSpec, GateMode};
use sracp_core::{GridSpec, Pose2D};

fn ego_occupancy() -> (SensorConfig, OccupancyField) {
    let sensor = SensorConfig::default();
    let scene = generate_scene(ScenarioKind::UnprotectedLeftTurn, 0, &ScenarioParams::default()).unwrap();
    let points = raycast_points(&scene, scene.ego, 0, &sensor.fov, sensor.rays, 0).unwrap();
    let pose = Pose2D::new(scene.object_at(scene.ego, 0).unwrap().position, 0.0);
    let field = build_occupancy(&points, &pose, &sensor.grid, sensor.kernel_radius).unwrap();
    (sensor, field)
}

/// Smooth pseudo-random plane in [0, 1].
fn plane(grid: &GridSpec, phase: f64) -> Vec<f64> {
    (0..grid.len())
        .map(|i| 0.5 + 0.5 * ((i as f64 * 0.618_034 + phase).sin() * (i as f64 * 0.001).cos()))
        .collect()
}

fn bev(c: &mut Criterion) {
    let (sensor, field) = ego_occupancy();
    let far = sensor.grid.len() - 1;
    c.bench_function("transmittance/corner_cell", |b| {
        b.iter(|| transmittance(black_box(&field), far, &sensor.raycast))
    });
    c.bench_function("occlusion_map/192x192", |b| {
        b.iter(|| occlusion_map(black_box(&field), &sensor.fov, &sensor.raycast, 0.5).unwrap())
    });
}

fn selection(c: &mut Criterion) {
    let grid = SensorConfig::default().grid;
    let blind = BlindZoneMask::from_probabilities(grid, plane(&grid, 2.0), 0.5).unwrap();
    let gain = compute_gain(&plane(&grid, 0.0), &plane(&grid, 1.0), &blind, 0.5).unwrap();
    let mut group = c.benchmark_group("select_cells");
    for bytes in [1024u64, 10240] {
        let k = capacity_cells(&BudgetSpec::default().with_bytes(bytes));
        group.bench_with_input(BenchmarkId::from_parameter(bytes), &k, |b, &k| {
            b.iter(|| select_cells(black_box(&gain), k, GateMode::Union))
        });
    }
    group.finish();

    let budget = BudgetSpec::default().with_bytes(10240);
    let features = SurrogateFeatures::new(
        grid,
        budget.channels as usize,
        plane(&grid, 0.0),
        plane(&grid, 1.0),
        plane(&grid, 2.0),
    )
    .unwrap();
    let mask = select_cells(&gain, capacity_cells(&budget), GateMode::Union);
    let header = PayloadHeader {
        sender: 1,
        frame: 0,
        grid_hash: grid.hash(),
    };
    c.bench_function("serialize_payload/10KB", |b| {
        b.iter(|| serialize_payload(black_box(&features), &mask, &budget, header).unwrap())
    });
}

criterion_group!(benches, bev, selection);
criterion_main!(benches);
