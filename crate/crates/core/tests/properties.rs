use nalgebra::{Matrix2x3, Vector2, Vector3};
use proptest::prelude::*;
use rrr_contact::classifier::{softmax, Prediction};
use rrr_contact::contact::{collision_wrench, CollisionProfile, ContactKind, ContactScenario, ContactSite};
use rrr_contact::controller::ModeKind;
use rrr_contact::evaluation::{confusion_matrix, sweep_grid, threshold_sweep, EvaluatedEpisode, Family, DFCR_MARGIN};
use rrr_contact::kinematics::ContactPoint;
use rrr_contact::observer::detect_contact;
use rrr_contact::reaction::select_reaction;
use rrr_contact::simulation::EpisodeSummary;

fn kind(clamp: bool) -> ContactKind {
    if clamp {
        ContactKind::Clamping
    } else {
        ContactKind::Collision
    }
}

fn collision(onset: f64, duration: f64, direction: [f64; 2]) -> ContactScenario {
    ContactScenario {
        archetype: 0,
        kind: ContactKind::Collision,
        site: ContactSite::Platform { offset: [0.0, 0.0] },
        direction,
        magnitude: 40.0,
        collision: Some(CollisionProfile { onset, duration, body_stiffness: 2000.0 }),
        clamp: None,
        config_id: 0,
        start_pose: [0.0; 3],
        approach_velocity: [0.0; 3],
        approach_start: 0.0,
        approach_duration: 1.0,
        duration: 1.5,
        detectable: true,
    }
}

fn summary(truth: ContactKind, prediction: Prediction, mode: ModeKind, pre: f64, post: f64) -> EpisodeSummary {
    EpisodeSummary {
        truth,
        detection_time: Some(0.3),
        reaction_time: Some(0.31),
        prediction: Some(prediction),
        mode,
        requested: mode,
        reaction_chain: 0,
        retraction_direction: Some([1.0, 0.0, 0.0]),
        opening_gradient: Some([-1.0, 0.0, 0.0]),
        pre_peak: pre,
        post_peak: post,
        end_time: 1.5,
        steps: 1500,
        stopped_early: false,
        fallback: None,
    }
}

prop_compose! {
    fn episode()(
        clamp in any::<bool>(),
        wrong in any::<bool>(),
        p in 0.5..1.0f64,
        pre in 1.0..50.0f64,
        post in 0.0..100.0f64,
        zg_post in 0.0..100.0f64,
    ) -> EvaluatedEpisode {
        let truth = kind(clamp);
        let class = if wrong { truth.other() } else { truth };
        let prediction = Prediction { class, p };
        let reaction = if class == ContactKind::Collision { ModeKind::Retraction } else { ModeKind::StructureOpening };
        EvaluatedEpisode {
            index: 0,
            archetype: 0,
            config_id: 0,
            truth,
            prediction,
            optimal: summary(truth, prediction, reaction, pre, post),
            zero_g: summary(truth, prediction, ModeKind::ZeroG, pre, zg_post),
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0..500.0f64, 1..8)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        if z.len() == 2 {
            prop_assert!(Prediction::from_probabilities([p[0], p[1]]).p >= 0.5);
        }
    }

    #[test]
    fn gate_falls_back_more_as_the_threshold_rises(
        p in 0.5..1.0f64, a in 0.5..1.0f64, b in 0.5..1.0f64, clamp in any::<bool>(),
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let pred = Prediction { class: kind(clamp), p };
        if select_reaction(true, &pred, lo) == ModeKind::ZeroG {
            prop_assert_eq!(select_reaction(true, &pred, hi), ModeKind::ZeroG);
        }
        prop_assert_eq!(select_reaction(false, &pred, lo), ModeKind::Nominal);
    }

    #[test]
    fn detection_is_any_axis_over_threshold(f in prop::array::uniform3(-30.0..30.0f64)) {
        let eps = [10.0, 10.0, 1.0];
        let d = detect_contact(&Vector3::from(f), &eps);
        prop_assert_eq!(d.any, (0..3).any(|i| f[i].abs() > eps[i]));
    }

    #[test]
    fn collision_wrench_vanishes_outside_the_window_without_penetration(
        onset in 0.1..1.0f64,
        duration in 0.01..0.2f64,
        angle in 0.0..std::f64::consts::TAU,
        t in 0.0..2.0f64,
        away in 0.0..0.05f64,
    ) {
        let d = Vector2::new(angle.cos(), angle.sin());
        let sc = collision(onset, duration, [d.x, d.y]);
        let anchor = Vector2::new(0.01, -0.02);
        // displaced along the force direction: the robot is not in the body
        let point = ContactPoint { position: anchor + away * d, jacobian: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0) };
        let c = collision_wrench(t, &sc, &point, Some(&anchor));
        if t < onset || t > onset + duration {
            prop_assert_eq!(c.wrench, Vector3::zeros());
            prop_assert!(!c.active);
        }
        prop_assert!(c.force >= 0.0);
    }

    #[test]
    fn confusion_rows_sum_to_one(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let pairs: Vec<_> = pairs.into_iter().map(|(t, p)| (kind(t), kind(p))).collect();
        let both = pairs.iter().any(|p| p.0 == ContactKind::Collision) && pairs.iter().any(|p| p.0 == ContactKind::Clamping);
        match confusion_matrix(pairs) {
            Ok(c) => {
                for row in c.rates {
                    prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
                }
            }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn sweep_shares_partition_and_fallback_is_monotone(episodes in prop::collection::vec(episode(), 1..60)) {
        let grid = sweep_grid();
        let rows = threshold_sweep(&episodes, &grid, DFCR_MARGIN).unwrap();
        prop_assert_eq!(rows.len(), grid.len() * Family::ALL.len());
        for r in rows.iter().filter(|r| r.episodes > 0) {
            let total = match r.family {
                Family::CorrectClamping | Family::CorrectCollision => r.optimal + r.sfr,
                _ => r.dfcr + r.ldfcr + r.sfr,
            };
            prop_assert!((total - 1.0).abs() < 1e-12, "{:?}", r);
        }
        for family in Family::ALL {
            let sfr: Vec<f64> = rows.iter().filter(|r| r.family == family && r.episodes > 0).map(|r| r.sfr).collect();
            prop_assert!(sfr.windows(2).all(|w| w[1] >= w[0]), "{:?}: {:?}", family, sfr);
        }
    }
}
