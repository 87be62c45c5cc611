use alto::ad::ParamSet;
use alto::convert::{interpolate_bilinear, interpolate_trilinear, scatter_mean, GridMode};
use alto::geometry::{normalize_cloud, Point};
use alto::io;
use alto::mesh::{lattice_nodes, marching_cubes, metric_iou, refine_vertices, Mesh, OccupancyVolume};
use alto::train::{bce_loss, Checkpoint, TrainConfig, TrainState};
use alto::{DType, Tensor};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0]
}

fn point() -> impl Strategy<Value = Point> {
    [unit(), unit(), unit()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_reproduces_affine_fields(res in 2usize..7, a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64,
                                              pts in prop::collection::vec(point(), 1..20)) {
        // Multilinear weights sum to one and reproduce linear functions exactly.
        let s = (res - 1) as f64;
        let mut plane = Tensor::zeros(&[res, res, 1]);
        let mut vol = Tensor::zeros(&[res, res, res, 1]);
        for i in 0..res {
            for j in 0..res {
                plane.set(&[i, j, 0], c + a * i as f64 / s + b * j as f64 / s);
                for k in 0..res {
                    vol.set(&[i, j, k, 0], c + a * i as f64 / s + b * j as f64 / s - a * k as f64 / s);
                }
            }
        }
        let uv: Vec<[f64; 2]> = pts.iter().map(|p| [p[0], p[1]]).collect();
        let p2 = interpolate_bilinear(&plane, &uv).unwrap();
        let p3 = interpolate_trilinear(&vol, &pts).unwrap();
        for (n, p) in pts.iter().enumerate() {
            prop_assert!((p2.data()[n] - (c + a * p[0] + b * p[1])).abs() < 1e-12);
            prop_assert!((p3.data()[n] - (c + a * p[0] + b * p[1] - a * p[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_mean_of_a_constant_is_that_constant(res in 2usize..6, v in -3.0..3.0f64,
                                                   pts in prop::collection::vec(point(), 1..30), tri in any::<bool>()) {
        let mode = if tri { GridMode::Triplane } else { GridMode::Volume };
        let grid = scatter_mean(&pts, &Tensor::full(&[pts.len(), 2], v), mode, res).unwrap();
        for plane in &grid.planes {
            let hit = plane.data().iter().filter(|x| **x != 0.0).count();
            prop_assert!(plane.data().iter().all(|&x| x == 0.0 || (x - v).abs() < 1e-12));
            prop_assert!(v == 0.0 || (hit >= 2 && hit <= 2 * pts.len()));
        }
    }

    #[test]
    fn bce_is_bounded_by_the_clamp(pred in prop::collection::vec(unit(), 1..40), seed in any::<u64>()) {
        let eps = 1e-6;
        let target: Vec<f64> = (0..pred.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let (sum, mean) = bce_loss(&pred, &target, eps).unwrap();
        prop_assert!(sum >= 0.0 && mean <= -eps.ln() + 1e-12);
        prop_assert!((mean * pred.len() as f64 - sum).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(0u8..2, 0..50), seed in any::<u64>()) {
        let pred: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let gt: Vec<f64> = (0..pred.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
        let x = metric_iou(&pred, &gt).unwrap();
        prop_assert_eq!(x, metric_iou(&gt, &pred).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(metric_iou(&pred, &pred).unwrap(), 1.0);
    }

    #[test]
    fn xyz_text_round_trips_exactly(pts in prop::collection::vec(prop::array::uniform3(-1e3..1e3f64), 0..30)) {
        prop_assert_eq!(io::parse_xyz(&io::format_xyz(&pts)).unwrap(), pts);
    }

    #[test]
    fn normalization_inverts(pts in prop::collection::vec(prop::array::uniform3(-50.0..50.0f64), 1..30), pad in 0.0..0.5f64) {
        let cloud = normalize_cloud(&pts, pad).unwrap();
        for (raw, p) in pts.iter().zip(&cloud.points) {
            prop_assert!(p.iter().all(|c| (pad / 2.0 - 1e-12..=1.0 - pad / 2.0 + 1e-12).contains(c)));
            let back = cloud.transform.inverse(*p);
            prop_assert!((0..3).all(|a| (back[a] - raw[a]).abs() < 1e-9));
        }
    }

    #[test]
    fn marching_cubes_on_closed_fields_is_watertight(res in 4usize..9, bits in prop::collection::vec(any::<bool>(), 512)) {
        // Random interior occupancy with an empty shell of boundary nodes.
        let vals: Vec<f64> = (0..res * res * res).map(|n| {
            let (i, j, k) = (n / (res * res), (n / res) % res, n % res);
            let border = [i, j, k].iter().any(|&x| x == 0 || x == res - 1);
            if border || !bits[n % 512] { 0.0 } else { 1.0 }
        }).collect();
        let m = marching_cubes(&OccupancyVolume::new(res, vals).unwrap(), 0.5).unwrap();
        prop_assert!(m.mesh.is_watertight());
        let obj = io::parse_obj(&io::format_obj(&m.mesh)).unwrap();
        prop_assert_eq!(&obj.triangles, &m.mesh.triangles);
        prop_assert_eq!(&obj.vertices, &m.mesh.vertices);
    }

    #[test]
    fn refinement_keeps_the_crossing_bracketed(r in 0.15..0.4f64, iters in 0usize..8) {
        let field = |p: &[Point]| -> alto::Result<Vec<f64>> {
            Ok(p.iter().map(|q| 1.0 / (1.0 + (40.0 * (alto::geometry::dist(*q, [0.5; 3]) - r)).exp())).collect())
        };
        let vol = OccupancyVolume::new(12, field(&lattice_nodes(12)).unwrap()).unwrap();
        let m = marching_cubes(&vol, 0.5).unwrap();
        let refined = refine_vertices(&m, field, 0.5, iters).unwrap();
        prop_assert_eq!(&refined.mesh.triangles, &m.mesh.triangles);
        for b in &refined.edges {
            let f = field(&[b.at(b.lo), b.at(b.hi)]).unwrap();
            prop_assert!(f[0] >= 0.5 && f[1] < 0.5 && b.lo <= b.t && b.t <= b.hi);
        }
        if iters == 0 {
            prop_assert_eq!(&refined.mesh.vertices, &m.mesh.vertices);
        }
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4),
                              step in 0u64..1000, f32_mode in any::<bool>()) {
        let dtype = if f32_mode { DType::F32 } else { DType::F64 };
        let mut ps = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, (0..n).map(|j| (j as f64 * 0.37 + i as f64).sin()).collect()).unwrap();
            ps.insert(format!("t{i}"), t.with_dtype(dtype));
        }
        let mut state = TrainState::new(ps, &TrainConfig::default()).unwrap();
        state.step = step;
        let bytes = Checkpoint::from_state(serde_json::json!({"step": step}), &state).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn empty_mesh_round_trips() {
    let empty = Mesh::new(vec![], vec![]).unwrap();
    assert!(io::parse_obj(&io::format_obj(&empty)).unwrap().is_empty());
}
