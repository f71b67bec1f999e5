//! Point-level segmentation of unseen instances.
//!
//! Instances whose global score falls below the selected threshold are
//! reported as a single normal segment. Otherwise the pseudo-label is
//! aligned to the local scores with hard DTW and every point inherits the
//! bit of the label it is aligned to.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::{build_cost_matrix, decode_path};
use crate::error::Result;
use crate::model::ScorerModel;
use crate::pseudolabel::{normalize_activation, phi, SequentialLabel};
use crate::series::{csv_writer, flush, write_binary_series, write_record, Dataset, TemporalInstance};

/// Maximal run of points sharing a label, 1-based inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segmentation {
    segments: Vec<Segment>,
}

impl Segmentation {
    /// Collapses per-point predictions into maximal runs.
    pub fn from_points(points: &[bool]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &label) in points.iter().enumerate() {
            match segments.last_mut() {
                Some(seg) if seg.label == label => seg.end = i + 1,
                _ => segments.push(Segment {
                    start: i + 1,
                    end: i + 1,
                    label,
                }),
            }
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn anomalous(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.label)
    }

    pub fn to_points(&self) -> Vec<bool> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub seq_len: usize,
    /// Pseudo-labelling threshold.
    pub tau: f64,
    /// Instance-level decision threshold on the global score.
    pub tau_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutcome {
    pub segmentation: Segmentation,
    pub point_predictions: Vec<bool>,
    pub global_score: f64,
    pub predicted_label: bool,
    /// `None` when the instance was classified normal and no alignment ran.
    pub pseudo_label: Option<SequentialLabel>,
}

/// Segments one instance with a trained model.
pub fn segment_instance(model: &ScorerModel, instance: &TemporalInstance, params: &SegmentParams) -> Result<SegmentOutcome> {
    let pass = model.forward(instance)?;
    let global_score = pass.scores.global;
    let t_len = instance.length();
    if global_score < params.tau_star {
        let points = vec![false; t_len];
        return Ok(SegmentOutcome {
            segmentation: Segmentation::from_points(&points),
            point_predictions: points,
            global_score,
            predicted_label: false,
            pseudo_label: None,
        });
    }
    let raw = model.activation_raw(&pass.tape)?;
    let bits = phi(&normalize_activation(&raw), params.seq_len, params.tau)?;
    let path = decode_path(&build_cost_matrix(&bits, &pass.scores.local)?)?;
    let points: Vec<bool> = path.label_of_points().into_iter().map(|l| bits.bits()[l]).collect();
    Ok(SegmentOutcome {
        segmentation: Segmentation::from_points(&points),
        point_predictions: points,
        global_score,
        predicted_label: true,
        pseudo_label: Some(bits),
    })
}

/// Segments every instance in parallel. Results keep the dataset's id order;
/// a failing instance does not affect the others.
pub fn segment_dataset(
    model: &ScorerModel,
    dataset: &Dataset,
    params: &SegmentParams,
) -> Vec<(String, Result<SegmentOutcome>)> {
    dataset
        .items()
        .par_iter()
        .map(|it| (it.instance.id().to_string(), segment_instance(model, &it.instance, params)))
        .collect()
}

/// `id,start,end,label,global_score` for every segment.
pub fn write_segments_csv(path: &Path, results: &[(String, SegmentOutcome)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ["id", "start", "end", "label", "global_score"])?;
    for (id, out) in results {
        for s in out.segmentation.segments() {
            write_record(
                &mut w,
                path,
                [
                    id.clone(),
                    s.start.to_string(),
                    s.end.to_string(),
                    u8::from(s.label).to_string(),
                    out.global_score.to_string(),
                ],
            )?;
        }
    }
    flush(w, path)
}

/// `id,global_score,predicted_label,pseudo_label`.
pub fn write_instances_csv(path: &Path, results: &[(String, SegmentOutcome)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ["id", "global_score", "predicted_label", "pseudo_label"])?;
    for (id, out) in results {
        let bits = out.pseudo_label.as_ref().map(|b| b.to_string()).unwrap_or_default();
        write_record(
            &mut w,
            path,
            [
                id.clone(),
                out.global_score.to_string(),
                u8::from(out.predicted_label).to_string(),
                bits,
            ],
        )?;
    }
    flush(w, path)
}

/// Writes `<dir>/<id>.pred.csv` per instance.
pub fn write_point_predictions(dir: &Path, results: &[(String, SegmentOutcome)]) -> Result<()> {
    for (id, out) in results {
        write_binary_series(&dir.join(format!("{id}.pred.csv")), &out.point_predictions)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtw::CostMatrix;
    use crate::error::Error;
    use crate::model::{Architecture, Pooling};
    use crate::series::{LabeledInstance, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d_in: usize) -> ScorerModel {
        let arch = Architecture {
            d_in,
            d_hidden: 4,
            filter_size: 2,
            n_layers: 2,
            pooling: Pooling::Max,
            ..Architecture::default()
        };
        ScorerModel::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn ramp(id: &str, t: usize) -> TemporalInstance {
        TemporalInstance::new(id, 1, t, (0..t).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap()
    }

    #[test]
    fn runs_are_maximal() {
        let s = Segmentation::from_points(&[false, true, true, false, false, true]);
        let got: Vec<_> = s.segments().iter().map(|s| (s.start, s.end, s.label)).collect();
        assert_eq!(got, vec![(1, 1, false), (2, 3, true), (4, 5, false), (6, 6, true)]);
        assert_eq!(s.to_points(), vec![false, true, true, false, false, true]);
        assert!(Segmentation::from_points(&[]).segments().is_empty());
    }

    #[test]
    fn below_threshold_is_one_normal_segment() {
        let m = model(1);
        let params = SegmentParams {
            seq_len: 4,
            tau: 0.5,
            tau_star: 1.0,
        };
        let out = segment_instance(&m, &ramp("a", 20), &params).unwrap();
        assert!(!out.predicted_label);
        assert_eq!(
            out.segmentation.segments(),
            &[Segment {
                start: 1,
                end: 20,
                label: false
            }]
        );
        assert!(out.pseudo_label.is_none());
    }

    #[test]
    fn decoding_example() {
        let costs = CostMatrix::from_rows(&[vec![0.1, 2.0, 2.0], vec![2.0, 0.1, 0.2]]).unwrap();
        let bits = SequentialLabel::new(vec![false, true]);
        let path = decode_path(&costs).unwrap();
        let points: Vec<bool> = path.label_of_points().into_iter().map(|l| bits.bits()[l]).collect();
        let got: Vec<_> = Segmentation::from_points(&points)
            .segments()
            .iter()
            .map(|s| (s.start, s.end, s.label))
            .collect();
        assert_eq!(got, vec![(1, 1, false), (2, 3, true)]);
    }

    #[test]
    fn single_anomalous_label_covers_everything() {
        let m = model(1);
        let params = SegmentParams {
            seq_len: 1,
            tau: 0.5,
            tau_star: 0.0,
        };
        let out = segment_instance(&m, &ramp("a", 15), &params).unwrap();
        // the single interval contains the maximum of the normalized map
        assert_eq!(out.pseudo_label.unwrap().bits(), &[true]);
        assert_eq!(
            out.segmentation.segments(),
            &[Segment {
                start: 1,
                end: 15,
                label: true
            }]
        );
    }

    #[test]
    fn anomalous_runs_never_exceed_pseudo_label_ones() {
        let m = model(1);
        for l in 1..8 {
            let params = SegmentParams {
                seq_len: l,
                tau: 0.3,
                tau_star: 0.0,
            };
            let out = segment_instance(&m, &ramp("a", 40), &params).unwrap();
            assert!(out.segmentation.anomalous().count() <= out.pseudo_label.unwrap().ones());
        }
    }

    #[test]
    fn dataset_results_follow_id_order_and_isolate_failures() {
        let m = model(1);
        let items = ["c", "a", "b"]
            .iter()
            .map(|id| LabeledInstance {
                instance: ramp(id, if *id == "b" { 3 } else { 30 }),
                label: true,
                point_labels: None,
            })
            .collect();
        let ds = Dataset::new(Split::Test, items).unwrap();
        let params = SegmentParams {
            seq_len: 5,
            tau: 0.5,
            tau_star: 0.0,
        };
        let res = segment_dataset(&m, &ds, &params);
        let ids: Vec<_> = res.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(res[0].1.is_ok() && res[2].1.is_ok());
        assert!(matches!(res[1].1, Err(Error::Infeasible { .. })));

        let empty = Dataset::new(Split::Test, vec![]).unwrap();
        assert!(segment_dataset(&m, &empty, &params).is_empty());
    }
}
