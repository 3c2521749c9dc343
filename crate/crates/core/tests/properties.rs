//! Cross-module invariants and brute-force oracles on small inputs.

use proptest::prelude::*;
use sracp_core::bev::{
    occlusion_map, ray_sample_count, stabilize_blind_zone, transmittance, transmittance_segment, BlindZoneMask,
    FovSpec, OccupancyField, RaycastParams,
};
use sracp_core::eval::{average_precision, risk_ap};
use sracp_core::fusion::{fuse, FeatureField, FeatureSource};
use sracp_core::payload::{deserialize_payload, serialize_payload, PayloadHeader};
use sracp_core::protocol::GroundTruth;
use sracp_core::risk::{
    dangerous_set, distance_risk, intersection_risk, rasterize_risk_map, speed_risk, total_risk, ObjectState,
    RiskMatrix, RiskWeights,
};
use sracp_core::fusion::DetectionBox;
use sracp_core::selection::{capacity_cells, compute_gain, select_cells, BudgetSpec, GateMode, SelectionMask};
use sracp_core::{GridSpec, Pose2D};

fn grid(n: usize) -> GridSpec {
    let half = n as f64 * 0.2;
    GridSpec::centered(half, 0.4, (0.0, 4.0)).unwrap()
}

fn field(n: usize, values: Vec<f64>) -> OccupancyField {
    OccupancyField::from_values(grid(n), values).unwrap()
}

fn occupancy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![3 => Just(0.0), 1 => 0.0..=1.0f64], n * n)
}

/// Independent march: explicit row/column arithmetic for every sample.
fn transmittance_oracle(g: &GridSpec, values: &[f64], target: usize, lambda: f64, step: f64) -> f64 {
    let (tr, tc) = (target / g.cols(), target % g.cols());
    let cs = g.cell_size();
    let cx = g.x_range().0 + (tc as f64 + 0.5) * cs;
    let cy = g.y_range().0 + (tr as f64 + 0.5) * cs;
    let range = cx.hypot(cy);
    let theta = cy.atan2(cx);
    let k_max = (range / step).round() as usize;
    let mut depth = 0.0;
    for k in 0..=k_max {
        let s = k as f64 * step;
        let (x, y) = (s * theta.cos(), s * theta.sin());
        let col = ((x - g.x_range().0) / cs).floor();
        let row = ((y - g.y_range().0) / cs).floor();
        if col < 0.0 || row < 0.0 || col >= g.cols() as f64 || row >= g.rows() as f64 {
            continue;
        }
        let idx = row as usize * g.cols() + col as usize;
        if idx != target {
            depth += values[idx];
        }
    }
    (-lambda * step * depth).exp()
}

proptest! {
    #[test]
    fn transmittance_matches_oracle(n in 4usize..=32, seed in any::<u64>(), lambda in 0.1..4.0f64) {
        let g = grid(n);
        let values: Vec<f64> = (0..g.len()).map(|i| ((seed ^ (i as u64 * 0x9e37)) % 7) as f64 / 7.0).collect();
        let f = field(n, values.clone());
        let params = RaycastParams::new(lambda, 0.2).unwrap();
        for target in 0..g.len() {
            let t = transmittance(&f, target, &params);
            let o = transmittance_oracle(&g, &values, target, lambda, 0.2);
            prop_assert!((t - o).abs() <= 1e-6, "cell {target}: {t} vs {o}");
        }
    }

    #[test]
    fn adding_occupancy_never_raises_transmittance(values in occupancy(16), cell in 0usize..256, extra in 0.0..1.0f64) {
        let params = RaycastParams::new(2.0, 0.2).unwrap();
        let before = field(16, values.clone());
        let mut more = values;
        more[cell] = (more[cell] + extra).min(1.0);
        let after = field(16, more);
        for target in 0..256 {
            prop_assert!(transmittance(&after, target, &params) <= transmittance(&before, target, &params));
        }
    }

    #[test]
    fn split_rays_compose(values in occupancy(16), target in 0usize..256, split in 0.0..1.0f64) {
        let f = field(16, values);
        let params = RaycastParams::new(2.0, 0.2).unwrap();
        let k = ray_sample_count(f.grid(), target, &params) - 1;
        let m = ((k as f64) * split) as usize;
        let full = transmittance(&f, target, &params);
        let a = transmittance_segment(&f, target, &params, 0..=m);
        let b = if m < k { transmittance_segment(&f, target, &params, m + 1..=k) } else { 1.0 };
        prop_assert!((full - a * b).abs() <= 1e-9);
    }

    #[test]
    fn occlusion_probabilities_are_bounded_and_fov_dominates(values in occupancy(16), range in 0.5..5.0f64, tau in 0.05..0.95f64) {
        let f = field(16, values);
        let fov = FovSpec::full_circle(range);
        let params = RaycastParams::new(2.0, 0.2).unwrap();
        let mask = occlusion_map(&f, &fov, &params, tau).unwrap();
        for idx in 0..256 {
            let p = mask.occ_prob()[idx];
            prop_assert!((0.0..=1.0).contains(&p));
            if !fov.contains(f.grid().cell_center(idx)) {
                prop_assert_eq!(p, 1.0);
                prop_assert!(mask.is_occluded(idx));
            }
            prop_assert_eq!(mask.is_occluded(idx), p > tau);
        }
    }

    #[test]
    fn identical_history_is_a_fixed_point(blind in proptest::collection::vec(any::<bool>(), 256), k in 1usize..5, tau in 0.01..0.99f64) {
        let g = grid(16);
        let probs = blind.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        let mask = BlindZoneMask::from_parts(g, blind, probs).unwrap();
        let pose = Pose2D::new([3.0, -1.0], 0.0);
        let history: Vec<_> = (0..k).map(|_| (mask.clone(), pose)).collect();
        let out = stabilize_blind_zone(&history, &pose, tau).unwrap();
        prop_assert_eq!(out.occluded(), mask.occluded());
    }
}

fn obj(id: u32, p: [f64; 2], v: [f64; 2]) -> ObjectState {
    ObjectState {
        id,
        position: p,
        velocity: v,
        length: 4.5,
        width: 1.8,
        height: 1.5,
        yaw: 0.0,
        is_connected: false,
    }
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-100.0..100.0f64, -100.0..100.0f64]
}

proptest! {
    #[test]
    fn risk_terms_are_bounded(p in point(), q in point(), v in point(), w in point(),
                              others in proptest::collection::vec((point(), point()), 0..5),
                              lam in 0.001..1.0f64) {
        prop_assert!((0.0..=1.0).contains(&distance_risk(p, q, lam)));
        prop_assert!((0.0..=1.0).contains(&intersection_risk(p, &[q], lam)));
        let o = obj(1, p, v);
        let e = obj(0, q, w);
        let mut scene: Vec<_> = others.iter().enumerate().map(|(i, (a, b))| obj(i as u32 + 2, *a, *b)).collect();
        scene.push(o.clone());
        let s = speed_risk(&o, &e, &scene, 0.01);
        prop_assert!((0.0..1.0).contains(&s));
    }

    #[test]
    fn decays_are_strictly_decreasing(d1 in 0.0..200.0f64, dd in 0.01..50.0f64, lam in 0.01..0.5f64) {
        let d2 = d1 + dd;
        prop_assert!(distance_risk([d1, 0.0], [0.0, 0.0], lam) > distance_risk([d2, 0.0], [0.0, 0.0], lam));
        prop_assert!(intersection_risk([0.0, d1], &[[0.0, 0.0]], lam) > intersection_risk([0.0, d2], &[[0.0, 0.0]], lam));
    }

    #[test]
    fn speed_risk_is_galilean(vs in proptest::collection::vec(point(), 2..6), shift in point()) {
        let ego = obj(0, [0.0, 0.0], vs[0]);
        let scene: Vec<_> = vs.iter().enumerate().skip(1).map(|(i, v)| obj(i as u32, [i as f64 * 5.0, 0.0], *v)).collect();
        let moved = |o: &ObjectState| ObjectState { velocity: [o.velocity[0] + shift[0], o.velocity[1] + shift[1]], ..o.clone() };
        let ego2 = moved(&ego);
        let scene2: Vec<_> = scene.iter().map(moved).collect();
        for (a, b) in scene.iter().zip(&scene2) {
            let r1 = speed_risk(a, &ego, &scene, 0.01);
            let r2 = speed_risk(b, &ego2, &scene2, 0.01);
            prop_assert!((r1 - r2).abs() <= 1e-9 * (1.0 + r1.abs()));
        }
    }

    #[test]
    fn total_risk_is_monotone(c in [0.0..1.0f64, 0.0..1.0, 0.0..1.0], bump in 0.0..1.0f64, which in 0usize..3) {
        let w = RiskWeights::default();
        let mut up = c;
        up[which] += bump;
        prop_assert!(total_risk((up[0], up[1], up[2]), &w) >= total_risk((c[0], c[1], c[2]), &w));
    }

    #[test]
    fn dangerous_set_shrinks(rhos in proptest::collection::vec(0.0..=1.0f64, 0..10), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m = RiskMatrix { ego: 0, entries: rhos.iter().enumerate().map(|(i, r)| (i as u32 + 1, *r)).collect() };
        prop_assert!(dangerous_set(&m, hi).is_subset(&dangerous_set(&m, lo)));
    }

    #[test]
    fn risk_raster_matches_point_in_box(objs in proptest::collection::vec((point(), -3.2..3.2f64, 1.0..6.0f64, 0.5..3.0f64), 0..6)) {
        let g = GridSpec::centered(12.8, 0.4, (0.0, 4.0)).unwrap();
        let objects: Vec<ObjectState> = objs.iter().enumerate().map(|(i, (p, yaw, l, w))| ObjectState {
            position: [p[0] / 8.0, p[1] / 8.0], yaw: *yaw, length: *l, width: *w, ..obj(i as u32 + 1, [0.0; 2], [i as f64, 0.0])
        }).collect();
        let ego = obj(0, [0.0, 0.0], [0.0, 0.0]);
        let weights = RiskWeights::default();
        let map = rasterize_risk_map(&objects, &ego, &[[1.0, 1.0]], &weights, &g);
        let ctx = sracp_core::risk::RiskContext { scene_objects: &objects, intersections: &[[1.0, 1.0]] };
        for idx in 0..g.len() {
            let c = g.cell_center(idx);
            let expect = objects
                .iter()
                .filter(|o| o.contains(c))
                .map(|o| sracp_core::risk::object_risk(o, &ego, ctx, &weights))
                .fold(0.0, f64::max);
            prop_assert_eq!(map.get(idx), expect);
        }
    }
}

fn gain_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, f64)> {
    let plane = || proptest::collection::vec(prop_oneof![1 => Just(0.0), 3 => 0.0..=1.0f64], 16);
    (plane(), plane(), proptest::collection::vec(any::<bool>(), 16), 0.0..=1.0f64)
}

fn small_gain(sp: &[f64], risk: &[f64], blind: Vec<bool>, alpha: f64) -> sracp_core::selection::GainMap {
    let g = GridSpec::new((0.0, 1.6), (0.0, 1.6), 0.4, (0.0, 4.0)).unwrap();
    let probs = blind.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let mask = BlindZoneMask::from_parts(g, blind, probs).unwrap();
    compute_gain(sp, risk, &mask, alpha).unwrap()
}

fn subset_sums(scores: &[f64], k: usize) -> f64 {
    // Best sum over every subset of at most k cells, by enumeration.
    let n = scores.len();
    let mut best = 0.0f64;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize > k {
            continue;
        }
        let s: f64 = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| scores[i]).sum();
        best = best.max(s);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_is_subset_optimal((sp, risk, blind, alpha) in gain_inputs(), k in 0usize..6) {
        let gain = small_gain(&sp, &risk, blind, alpha);
        for gate in [GateMode::SpatialOnly, GateMode::RiskOnly, GateMode::Union] {
            let scores = match gate {
                GateMode::SpatialOnly => gain.spatial(),
                GateMode::RiskOnly => gain.risk(),
                GateMode::Union => gain.combined(),
            };
            let mask = select_cells(&gain, k, gate);
            prop_assert!(mask.len() <= k);
            let got: f64 = mask.selected().iter().map(|&i| scores[i]).sum();
            prop_assert!((got - subset_sums(scores, k)).abs() <= 1e-12);
        }
    }

    #[test]
    fn union_dominates_single_gates_on_combined_gain((sp, risk, blind, alpha) in gain_inputs(), k in 0usize..16) {
        let gain = small_gain(&sp, &risk, blind, alpha);
        let sum = |m: &SelectionMask| m.selected().iter().map(|&i| gain.combined()[i]).sum::<f64>();
        let union = sum(&select_cells(&gain, k, GateMode::Union));
        prop_assert!(union + 1e-12 >= sum(&select_cells(&gain, k, GateMode::SpatialOnly)));
        prop_assert!(union + 1e-12 >= sum(&select_cells(&gain, k, GateMode::RiskOnly)));
    }
}

proptest! {
    #[test]
    fn capacity_is_monotone_and_exact(b in 0u64..20_000, extra in 0u64..5000, channels in 3u64..128) {
        let spec = BudgetSpec { b_bytes: b, channels, ..BudgetSpec::default() };
        let k = capacity_cells(&spec);
        prop_assert!(capacity_cells(&spec.with_bytes(b + extra)) >= k);
        if b >= spec.h_hdr {
            prop_assert!(spec.h_hdr + k as u64 * spec.b_cell() <= b);
            prop_assert!(spec.h_hdr + (k as u64 + 1) * spec.b_cell() > b);
        }
    }

    #[test]
    fn payload_length_is_exact(b in 24u64..4000, cells in proptest::collection::btree_set(0usize..256, 0..40)) {
        let g = grid(16);
        let spec = BudgetSpec::default().with_bytes(b);
        let features = FeatureField::zeros(g, 64);
        let cells: Vec<usize> = cells.into_iter().collect();
        let mask = SelectionMask::from_cells(g, cells.iter().copied()).unwrap();
        let header = PayloadHeader { sender: 3, frame: 1, grid_hash: g.hash() };
        match serialize_payload(&features, &mask, &spec, header) {
            Ok(bytes) => {
                prop_assert!(bytes.len() as u64 <= b);
                prop_assert_eq!(bytes.len() as u64, spec.h_hdr + cells.len() as u64 * spec.b_cell());
                let back = deserialize_payload(&bytes, &g, &spec).unwrap();
                prop_assert_eq!(back.indices().iter().map(|&i| i as usize).collect::<Vec<_>>(), cells);
            }
            Err(_) => prop_assert!(cells.len() > capacity_cells(&spec)),
        }
    }
}

fn feature_field(g: GridSpec, values: &[f64]) -> FeatureField {
    let mut f = FeatureField::zeros(g, 4);
    for (i, v) in values.iter().enumerate() {
        f.set(i % 4, i / 4, *v);
    }
    f
}

proptest! {
    #[test]
    fn fusion_is_convex_and_local(ego in proptest::collection::vec(0.0..=1.0f64, 64),
                                  partners in proptest::collection::vec(
                                      (proptest::collection::vec(0.0..=1.0f64, 64), proptest::collection::btree_set(0usize..16, 0..8)), 0..4)) {
        let g = GridSpec::new((0.0, 1.6), (0.0, 1.6), 0.4, (0.0, 4.0)).unwrap();
        let ego_f = feature_field(g, &ego);
        let spec = BudgetSpec { b_bytes: 10_000, channels: 4, ..BudgetSpec::default() };
        let mut inputs = Vec::new();
        let mut touched = std::collections::BTreeSet::new();
        for (j, (vals, cells)) in partners.iter().enumerate() {
            let f = feature_field(g, vals);
            let mask = SelectionMask::from_cells(g, cells.iter().copied()).unwrap();
            let header = PayloadHeader { sender: j as u32 + 1, frame: 0, grid_hash: g.hash() };
            let bytes = serialize_payload(&f, &mask, &spec, header).unwrap();
            inputs.push((deserialize_payload(&bytes, &g, &spec).unwrap(), mask));
            touched.extend(cells.iter().copied());
        }
        let fused = fuse(&ego_f, &inputs).unwrap();
        let mut buf = [0.0f32; 4];
        for idx in 0..16 {
            fused.write_cell(idx, &mut buf);
            if !touched.contains(&idx) {
                prop_assert_eq!(&buf[..], ego_f.cell(idx));
                continue;
            }
            let w = &fused.provenance.cells[&idx];
            let total = w.ego + w.partners.iter().map(|p| p.1).sum::<f64>();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for c in 0..4 {
                let mut lo = ego_f.get(c, idx);
                let mut hi = lo;
                for (payload, mask) in &inputs {
                    if mask.is_selected(idx) {
                        let v = payload.cells().find(|(i, _)| *i == idx).unwrap().1[c];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let v = buf[c] as f64;
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}

fn det(x: f64, score: f64) -> DetectionBox {
    DetectionBox { center: [x, 0.0], length: 4.0, width: 2.0, yaw: 0.0, score, risk: 0.0 }
}

fn gt(id: u32, x: f64, risk: f64) -> GroundTruth {
    GroundTruth { id, center: [x, 0.0], length: 4.0, width: 2.0, yaw: 0.0, risk }
}

proptest! {
    #[test]
    fn risk_ap_restricts_monotonically(
        truth in proptest::collection::vec((0u32..8, 0.01..1.0f64), 1..6),
        dets in proptest::collection::vec((0u32..10, 0.0..3.0f64, 0.0..1.0f64), 0..8),
        t1 in 0.0..0.99f64, t2 in 0.0..0.99f64,
    ) {
        let truth: Vec<GroundTruth> = truth.iter().enumerate().map(|(i, (_, r))| gt(i as u32, i as f64 * 20.0, *r)).collect();
        let dets: Vec<DetectionBox> = dets.iter().map(|(slot, dx, s)| det(*slot as f64 * 20.0 + dx, *s)).collect();
        let ap = average_precision(&dets, &truth, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(risk_ap(&dets, &truth, 0.5, 0.0), Some(ap));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let count = |t: f64| truth.iter().filter(|g| g.risk > t).count();
        prop_assert!(count(hi) <= count(lo));
        match risk_ap(&dets, &truth, 0.5, hi) {
            None => prop_assert_eq!(count(hi), 0),
            Some(v) => prop_assert!((0.0..=1.0).contains(&v)),
        }
    }
}
