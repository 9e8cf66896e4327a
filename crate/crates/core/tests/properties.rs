use mutomo_core::dataset::{decode_dataset, encode_dataset, Sample};
use mutomo_core::metrics::psnr;
use mutomo_core::phantom::{GridSpec, VoxelGrid};
use mutomo_core::raytrace::{ray_path, Ray};
use mutomo_core::{MuonEvent, Vec3};
use proptest::prelude::*;

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = Vec3> {
    (range.clone(), range.clone(), range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #[test]
    fn ray_path_covers_clipped_chord(o in vec3(-80.0..80.0), d in vec3(-1.0..1.0), r in 1usize..20) {
        prop_assume!(d.norm() > 1e-3);
        let ray = Ray::new(o, d);
        let spec = GridSpec::new(r, 100.0).unwrap();
        let total: f64 = ray_path(&ray, &spec).iter().map(|s| s.length).sum();
        let expected = ray.clip_cube(50.0).map_or(0.0, |(a, b)| b - a);
        prop_assert!((total - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-6f64..10.0, b in 1e-6f64..10.0, peak in 0.1f64..5.0) {
        prop_assume!(a < b);
        prop_assert!(psnr(a, peak).unwrap() > psnr(b, peak).unwrap());
    }

    #[test]
    fn dataset_round_trip(values in prop::collection::vec(0.0f64..4.0, 27), p in 100.0f64..1e5, pos in vec3(-100.0..100.0)) {
        let grid = VoxelGrid::from_values(3, 100.0, values).unwrap();
        let ev = MuonEvent {
            entry_position: pos,
            exit_position: -pos,
            entry_direction: Vec3::new(0.1, 0.2, -0.9).normalized(),
            exit_direction: Vec3::new(0.0, 0.2, -0.9).normalized(),
            momentum: p,
            true_momentum: p * 1.1,
        };
        let sample = Sample::quantized(grid, vec![ev; 2]).unwrap();
        let bytes = encode_dataset(std::slice::from_ref(&sample));
        let back = decode_dataset(&bytes, 100.0).unwrap();
        prop_assert_eq!(&back[0], &sample);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }
}
