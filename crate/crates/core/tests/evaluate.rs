use deepssm_core::evaluate::{median, per_point_rmse, point_to_surface, rmse, rmse_report, surface_csv, time_inference};
use deepssm_core::networks::{Architecture, BaseDeepSsm, DeepSsm};
use deepssm_core::surface::Surface;
use deepssm_core::{CorrespondenceSet, Grid, ShapeModel, Volume};
use proptest::prelude::*;

fn set(id: &str, pts: Vec<[f64; 3]>) -> CorrespondenceSet {
    CorrespondenceSet::new(id, pts).unwrap()
}

#[test]
fn rmse_hand_cases() {
    let zero = set("t", vec![[0.0; 3]; 4]);
    assert_eq!(rmse(&set("p", vec![[3.0, 0.0, 0.0]; 4]), &zero).unwrap(), 1.0);
    assert_eq!(rmse(&zero, &zero).unwrap(), 0.0);
    assert!((rmse(&set("p", vec![[1.0, 1.0, 1.0]; 4]), &zero).unwrap() - 1.0).abs() < 1e-15);
    assert!(rmse(&zero, &set("s", vec![[0.0; 3]; 3])).is_err());
}

#[test]
fn per_point_mean_and_population_std() {
    let truth = vec![set("a", vec![[0.0; 3]; 2]), set("b", vec![[0.0; 3]; 2])];
    let pred = vec![set("a", vec![[0.0; 3]; 2]), set("b", vec![[2.0, 2.0, 2.0]; 2])];
    let f = per_point_rmse(&pred, &truth).unwrap();
    assert_eq!(f.mean, vec![1.0, 1.0]);
    assert_eq!(f.std, vec![1.0, 1.0]);
    let report = rmse_report(&pred, &truth).unwrap();
    assert_eq!(report.per_sample, vec![0.0, 2.0]);
    assert_eq!(report.average_rmse, 1.0);
    assert_eq!(report.to_csv(), "sample_id,rmse\na,0\nb,2\naverage,1\n");
}

#[test]
fn surface_distance_to_sphere() {
    let s = Surface::Ellipsoid { center: [0.0; 3], radii: [5.0; 3] };
    let d = point_to_surface(&set("x", vec![[6.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.0, 2.0, 0.0]]), &s).unwrap();
    assert!((d.mean - 4.0 / 3.0).abs() < 1e-12);
    assert!((d.max - 3.0).abs() < 1e-12);
    assert_eq!(surface_csv(&[d]).lines().next(), Some("sample_id,mean_distance,max_distance"));
}

#[test]
fn median_ignores_outliers() {
    assert_eq!(median(&[1.0, 100.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn inference_timing_is_positive() {
    let grid = Grid::centered(8, 2.0).unwrap();
    let shapes: Vec<_> = (0..4).map(|i| set(&i.to_string(), vec![[i as f64, 0.0, (i * i) as f64]; 12])).collect();
    let sm = ShapeModel::fit(&shapes, 2).unwrap();
    let arch = Architecture { conv_channels: vec![2], pool_after: vec![1], fc_features: vec![4], kernel: 3 };
    let model = DeepSsm::Base(BaseDeepSsm::new(arch, grid, &sm, 0).unwrap());
    let v = Volume::filled(grid, 0.5).unwrap();
    let t = time_inference(&model, &v, 3).unwrap();
    assert!(t > 0.0 && t < 5.0);
    assert!(time_inference(&model, &v, 0).is_err());
}

proptest! {
    #[test]
    fn rmse_matches_loop_oracle(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..30)) {
        let a = set("a", pts.iter().map(|p| [p.0, p.1, p.2]).collect());
        let b = set("b", pts.iter().map(|p| [p.3, p.4, p.5]).collect());
        let mut per_axis = [0.0; 3];
        for i in 0..a.len() {
            for k in 0..3 {
                per_axis[k] += (a.points[i][k] - b.points[i][k]).powi(2);
            }
        }
        let oracle = per_axis.iter().map(|s| (s / a.len() as f64).sqrt()).sum::<f64>() / 3.0;
        prop_assert!((rmse(&a, &b).unwrap() - oracle).abs() <= 1e-12);
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }
}
