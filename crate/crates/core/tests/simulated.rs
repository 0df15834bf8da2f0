use nalgebra::Vector3;
use radarloop::geometry::Se3Pose;
use radarloop::keyframing::{build_submaps, select_keyframes, KeyframeConfig, SurfaceConfig};
use radarloop::odometry::{integrate_odometry, RansacConfig};
use radarloop::registration::{register_p2d, RegistrationConfig};
use radarloop::sim::{
    generate_sequence, generate_world, ImuDrift, PathSpec, PathTemplate, Scenario, SensorModel, SequenceOptions, SimSequence,
};

fn sequence(sensor: SensorModel, drift: ImuDrift) -> SimSequence {
    let world = generate_world(3, Scenario::Forest);
    let path = PathSpec::new(PathTemplate::Waypoints {
        points: vec![[-16.0, -20.0], [20.0, -20.0], [20.0, 10.0]],
    });
    let opts = SequenceOptions {
        seed: 3,
        imu_drift: drift,
        ..Default::default()
    };
    generate_sequence(&world, &path, &sensor, &opts).unwrap()
}

#[test]
fn noiseless_odometry_follows_ground_truth() {
    let seq = sequence(SensorModel::default().noiseless(), ImuDrift::none());
    let odo = integrate_odometry(&seq.scans, &RansacConfig::default());
    assert!(odo.failed.iter().all(|f| !f));
    let g0 = seq.ground_truth.poses[0];
    for (est, gt) in odo.trajectory.poses.iter().zip(&seq.ground_truth.poses) {
        // first-order integration of a curved path; only the step size limits accuracy
        let (dt, da) = est.distance_to(&g0.between(gt));
        assert!(dt < 0.2 && da < 1e-6, "{dt} {da}");
    }
}

#[test]
fn noisy_odometry_drifts_moderately() {
    let seq = sequence(SensorModel::default(), ImuDrift::default());
    let odo = integrate_odometry(&seq.scans, &RansacConfig::default());
    let g0 = seq.ground_truth.poses[0];
    let end = g0.between(seq.ground_truth.poses.last().unwrap());
    let err = (odo.trajectory.poses.last().unwrap().translation - end.translation).norm();
    let length = seq.ground_truth.path_lengths().last().copied().unwrap();
    assert!(err > 0.0 && err < 0.05 * length, "{err} over {length} m");
}

#[test]
fn revisits_register_to_ground_truth() {
    let world = generate_world(3, Scenario::Forest);
    let opts = SequenceOptions { seed: 3, ..Default::default() };
    let seq = generate_sequence(&world, &PathSpec::default(), &SensorModel::default(), &opts).unwrap();
    let odo = integrate_odometry(&seq.scans, &RansacConfig::default());
    let kfs = select_keyframes(&odo.trajectory, &odo.inlier_clouds, &KeyframeConfig::default());
    let submaps = build_submaps(&kfs, 5, &SurfaceConfig::default());
    let gt: Vec<Se3Pose> = kfs.iter().map(|k| seq.ground_truth.poses[k.scan_index]).collect();
    let cfg = RegistrationConfig::default();
    let half = kfs.len() / 2;
    let offset = Se3Pose::from_yaw(3f64.to_radians(), Vector3::new(0.3, -0.2, 0.0));
    let mut errors = Vec::new();
    for q in (half + 5..kfs.len()).step_by(4) {
        // nearest first-lap keyframe
        let c = (5..half)
            .min_by(|&a, &b| {
                let d = |i: usize| (gt[i].translation - gt[q].translation).norm();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        let truth = gt[c].between(&gt[q]);
        let reg = register_p2d(&submaps[q].surface_points, &submaps[c].surface_points, &offset.compose(&truth), &cfg).unwrap();
        let (dt, da) = reg.relative_pose.distance_to(&truth);
        errors.push((dt, da.to_degrees()));
    }
    // angular noise at 20-40 m range limits accuracy on noisy revisits
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let dt = median(errors.iter().map(|e| e.0).collect());
    let da = median(errors.iter().map(|e| e.1).collect());
    assert!(errors.len() >= 20);
    assert!(dt < 0.35 && da < 3.0, "median {dt} m {da} deg");
}
