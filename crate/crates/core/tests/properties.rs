use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tanseg::dtw::{build_cost_matrix, decode_path, sdtw_backward, sdtw_forward};
use tanseg::inference::{segment_instance, Segmentation, SegmentParams};
use tanseg::model::{Architecture, Pooling, ScorerModel};
use tanseg::pseudolabel::SequentialLabel;
use tanseg::series::{split_stream, TemporalInstance};

fn label_and_scores() -> impl Strategy<Value = (SequentialLabel, Vec<f64>)> {
    (1usize..8).prop_flat_map(|l| {
        (
            prop::collection::vec(any::<bool>(), l),
            prop::collection::vec(0.001f64..0.999, l..40),
        )
            .prop_map(|(bits, scores)| (SequentialLabel::new(bits), scores))
    })
}

proptest! {
    #[test]
    fn decoded_cost_equals_hard_forward((z, s) in label_and_scores()) {
        let c = build_cost_matrix(&z, &s).unwrap();
        let path = decode_path(&c).unwrap();
        prop_assert_eq!(path.cost(&c).to_bits(), sdtw_forward(&c, 0.0).unwrap().0.to_bits());
        let owners = path.label_of_points();
        prop_assert_eq!(owners.len(), s.len());
        prop_assert_eq!(owners[0], 0);
        prop_assert_eq!(*owners.last().unwrap(), z.len() - 1);
        prop_assert!(owners.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn soft_value_never_exceeds_hard((z, s) in label_and_scores(), gamma in 1e-3f64..2.0) {
        let c = build_cost_matrix(&z, &s).unwrap();
        prop_assert!(sdtw_forward(&c, gamma).unwrap().0 <= sdtw_forward(&c, 0.0).unwrap().0);
    }

    #[test]
    fn soft_alignment_assigns_each_point_once((z, s) in label_and_scores(), gamma in 0.01f64..2.0) {
        let c = build_cost_matrix(&z, &s).unwrap();
        let (_, mut ws) = sdtw_forward(&c, gamma).unwrap();
        let e = sdtw_backward(&c, &mut ws).unwrap();
        for t in 0..s.len() {
            let col: f64 = (0..z.len()).map(|l| e.get(l, t)).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn points_and_segments_round_trip(points in prop::collection::vec(any::<bool>(), 0..80)) {
        let seg = Segmentation::from_points(&points);
        prop_assert_eq!(seg.to_points(), points.clone());
        let segs = seg.segments();
        prop_assert!(segs.windows(2).all(|w| w[0].label != w[1].label && w[1].start == w[0].end + 1));
        let runs = points.iter().enumerate().filter(|(i, &p)| p && (*i == 0 || !points[i - 1])).count();
        prop_assert_eq!(seg.anomalous().count(), runs);
    }

    #[test]
    fn anomalous_runs_are_bounded_by_pseudo_label(seed in 0u64..500, l in 1usize..10, tau in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture { d_in: 2, d_hidden: 4, n_layers: 3, pooling: Pooling::Avg, ..Architecture::default() };
        let model = ScorerModel::new(arch, &mut rng).unwrap();
        let t_len = 60;
        let values = (0..2 * t_len).map(|i| ((i as f64) * 0.37 + seed as f64).sin() * 2.0).collect();
        let x = TemporalInstance::new("p", 2, t_len, values).unwrap();
        let out = segment_instance(&model, &x, &SegmentParams { seq_len: l, tau, tau_star: 0.0 }).unwrap();
        let z = out.pseudo_label.unwrap();
        prop_assert!(out.segmentation.anomalous().count() <= z.ones());
        prop_assert_eq!(out.point_predictions.iter().any(|&p| p), z.ones() > 0);
    }

    #[test]
    fn stream_chunks_reassemble_a_prefix(t in 1usize..200, chunk in 1usize..60, d in 1usize..3) {
        let values: Vec<f64> = (0..d * t).map(|i| i as f64).collect();
        let stream = TemporalInstance::new("s", d, t, values).unwrap();
        let chunks = split_stream(&stream, chunk).unwrap();
        prop_assert_eq!(chunks.len(), t / chunk);
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.length(), chunk);
            for v in 0..d {
                prop_assert_eq!(c.variable(v), &stream.variable(v)[i * chunk..(i + 1) * chunk]);
            }
        }
    }
}
