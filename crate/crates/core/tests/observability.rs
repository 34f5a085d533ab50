use kinecal::estimator::{build_system, lm_solve, JacobianMode, SolveOptions};
use kinecal::kinecore::{
    pack, DhLink, Frame, FrameKind, JointKind, Perturbation, RobotModel, ROOT_FRAME,
};
use kinecal::measurements::{Closure, Dataset, Kind, Measurement};
use kinecal::observability::*;
use kinecal::sensemodel::{ExternalDevice, MarkerPoint, PointRef};
use kinecal::simlab::*;
use nalgebra::{DMatrix, SymmetricEigen};

fn parallel_links() -> RobotModel {
    let dh = |id: &str, parent: &str, a: f64| Frame {
        id: id.into(),
        parent: parent.into(),
        kind: FrameKind::Dh(DhLink::new(a, 0.1, 0.0, 0.0, JointKind::Revolute)),
    };
    RobotModel::builder(
        "parallel",
        vec![dh("j1", ROOT_FRAME, 0.3), dh("j2", "j1", 0.2)],
    )
    .markers(vec![MarkerPoint {
        id: "tip".into(),
        frame: "j2".into(),
        position: [0.05, 0.0, 0.0],
        calibratable: false,
    }])
    .external_devices(vec![ExternalDevice {
        id: "trk".into(),
        translation: [0.0, 0.0, 0.0],
        rotation: [1.0, 0.0, 0.0, 0.0],
        noise_sigma: 1e-4,
        calibratable: false,
    }])
    .mask(&["j1.a", "j1.d", "j2.a", "j2.d"])
    .build()
    .unwrap()
}

#[test]
fn parallel_translations_leave_only_their_sum() {
    let model = parallel_links();
    let ms: Vec<Measurement> = sample_configurations(&[[-2.0, 2.0], [-2.0, 2.0]], 30, 1)
        .into_iter()
        .map(|q| {
            let p = model.fk(&q, "j2").unwrap() * nalgebra::Point3::new(0.05, 0.0, 0.0);
            Measurement {
                q,
                closure: Closure::External {
                    point: PointRef::marker("tip"),
                    device: "trk".into(),
                    measured: [p.x, p.y, p.z],
                },
            }
        })
        .collect();
    let d = Dataset::new(ms, [(Kind::External, 1e-4)].into(), Default::default()).unwrap();
    let p = pack(&model);
    let sys = build_system(&model, &p, &d, JacobianMode::CentralDiff).unwrap();

    // oracle: eigenvalues of J^T J, independent of the SVD path
    let jtj: DMatrix<f64> = sys.jacobian.transpose() * &sys.jacobian;
    let eig = SymmetricEigen::new(jtj);
    let max = eig.eigenvalues.max();
    let rank_deficit = eig.eigenvalues.iter().filter(|&&l| l < 1e-14 * max).count();
    assert_eq!(rank_deficit, 1);

    let null = find_unidentifiable(&sys.jacobian, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(null.len(), 1);
    let names: Vec<String> = null[0]
        .params
        .iter()
        .map(|&i| p.keys[i].to_string())
        .collect();
    assert_eq!(names, ["j1.d", "j2.d"]);
    let v: Vec<f64> = null[0]
        .params
        .iter()
        .map(|&i| null[0].direction[i])
        .collect();
    assert!(v[0] * v[1] < 0.0);
    assert!((v[0].abs() - v[1].abs()).abs() < 1e-6);
}

#[test]
fn self_contact_and_observation_together_rank_first() {
    let spec = ScenarioSpec {
        counts: [(Kind::SelfContact, 200), (Kind::SelfObservation, 200)].into(),
        sigmas: [(Kind::SelfContact, 5e-4), (Kind::SelfObservation, 1.0)].into(),
        perturbation: Perturbation {
            length: 5e-3,
            angle: 0.02,
        },
        seed: 21,
        ..ScenarioSpec::default()
    };
    let syn = synthesize(&spec).unwrap();
    let x0 = pack(&syn.nominal);
    let subset = |kinds: &[Kind], n: usize| {
        let ms = kinds
            .iter()
            .flat_map(|&k| {
                syn.dataset
                    .measurements
                    .iter()
                    .filter(move |m| m.kind() == k)
                    .take(n)
                    .cloned()
            })
            .collect();
        Dataset::new(ms, syn.dataset.sigmas.clone(), Default::default()).unwrap()
    };
    let mut reports = Vec::new();
    for (kinds, n) in [
        (vec![Kind::SelfContact], 200),
        (vec![Kind::SelfObservation], 200),
        (vec![Kind::SelfContact, Kind::SelfObservation], 100),
    ] {
        let d = subset(&kinds, n);
        let res = lm_solve(&syn.nominal, &d, &x0, &SolveOptions::default()).unwrap();
        let sys = build_system(&syn.nominal, &res.params, &d, JacobianMode::ForwardDiff).unwrap();
        reports.push((
            kinds,
            analyze(&sys.jacobian, sys.rows(), DEFAULT_RANK_TOL).unwrap(),
        ));
    }
    let ranking = compare_campaigns(reports).unwrap();
    assert_eq!(ranking.rows[0].label, "sc+so");
    assert!(ranking.rows[0].report.o3 > ranking.rows[1].report.o3);
    assert!(ranking.rows[0].report.o3 > ranking.rows[2].report.o3);
    assert_eq!(ranking.multi_dominates, Some(true));
}
