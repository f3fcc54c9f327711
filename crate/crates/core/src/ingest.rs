//! Cohort parsing, feature-space fitting, vectorization and padded batching.
//!
//! Cohorts travel as line-delimited JSON, one patient per line:
//!
//! ```text
//! {"patient_id":"p000001","label":1,"events":[{"t":0.8,"code":7,"values":[0.1,-1.2]}]}
//! ```
//!
//! An optional `static` number array carries per-patient attributes that are
//! broadcast onto every event row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::numcore::Tensor2;

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Hours.
    pub t: f64,
    pub code: u32,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSequence {
    pub patient_id: String,
    pub label: u8,
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    pub static_features: Option<Vec<f64>>,
    pub events: Vec<Event>,
}

impl PatientSequence {
    /// Checks the record invariants: non-empty, strictly increasing times,
    /// binary label, consistent value lengths.
    pub fn validate(&self) -> Result<(), ParseErrorKind> {
        if self.label > 1 {
            return Err(ParseErrorKind::Label(u64::from(self.label)));
        }
        let first = self.events.first().ok_or(ParseErrorKind::Empty)?;
        let width = first.values.len();
        for (i, ev) in self.events.iter().enumerate() {
            if !ev.t.is_finite() || ev.values.iter().any(|v| !v.is_finite()) {
                return Err(ParseErrorKind::Malformed(format!("event {i} has a non-finite number")));
            }
            if ev.values.len() != width {
                return Err(ParseErrorKind::Schema {
                    event: i,
                    found: ev.values.len(),
                    expected: width,
                });
            }
            if i > 0 && ev.t <= self.events[i - 1].t {
                return Err(ParseErrorKind::Order { event: i });
            }
        }
        if let Some(s) = &self.static_features {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(ParseErrorKind::Malformed("non-finite static value".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("patient records always serialize")
    }
}

#[derive(Deserialize)]
struct RawRecord {
    patient_id: String,
    label: u64,
    #[serde(rename = "static", default)]
    static_features: Option<Vec<f64>>,
    events: Vec<Event>,
}

/// Parses one record. Line numbers are attached by [`parse_stream`].
pub fn parse_record(line: &str) -> Result<PatientSequence, ParseErrorKind> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| ParseErrorKind::Malformed(e.to_string()))?;
    if raw.label > 1 {
        return Err(ParseErrorKind::Label(raw.label));
    }
    let seq = PatientSequence {
        patient_id: raw.patient_id,
        label: raw.label as u8,
        static_features: raw.static_features,
        events: raw.events,
    };
    seq.validate()?;
    Ok(seq)
}

/// Parses every non-blank line. Bad lines are collected as errors carrying
/// their 1-based line number; the remaining lines are still processed.
pub fn parse_stream<'a, I>(lines: I) -> (Vec<PatientSequence>, Vec<Error>)
where
    I: IntoIterator<Item = &'a str>,
{
    let mut cohort = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(seq) => cohort.push(seq),
            Err(kind) => errors.push(Error::Parse { line: i + 1, kind }),
        }
    }
    (cohort, errors)
}

pub fn write_cohort(cohort: &[PatientSequence]) -> String {
    let mut out = String::new();
    for seq in cohort {
        out.push_str(&seq.to_line());
        out.push('\n');
    }
    out
}

/// Code vocabulary plus train-split normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub vocab_size: usize,
    pub cont_dim: usize,
    pub static_dim: usize,
    pub cont_mean: Vec<f64>,
    pub cont_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

impl FeatureSpace {
    pub fn d_in(&self) -> usize {
        self.vocab_size + self.cont_dim + self.static_dim
    }

    fn check(&self, seq: &PatientSequence) -> Result<()> {
        let static_len = seq.static_features.as_ref().map_or(0, Vec::len);
        if static_len != self.static_dim {
            return Err(Error::Schema(format!(
                "patient {} has {static_len} static values, expected {}",
                seq.patient_id, self.static_dim
            )));
        }
        for ev in &seq.events {
            if ev.values.len() != self.cont_dim {
                return Err(Error::Schema(format!(
                    "patient {} has {} continuous values, expected {}",
                    seq.patient_id,
                    ev.values.len(),
                    self.cont_dim
                )));
            }
            if ev.code as usize >= self.vocab_size {
                return Err(Error::Data(format!(
                    "patient {}: code {} outside vocabulary of {}",
                    seq.patient_id, ev.code, self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Fits normalization statistics over every event of a training cohort.
pub fn fit_feature_space(train: &[PatientSequence], vocab_size: usize) -> Result<FeatureSpace> {
    let first = train
        .first()
        .ok_or_else(|| Error::Data("cannot fit a feature space on an empty cohort".into()))?;
    let cont_dim = first.events.first().map_or(0, |e| e.values.len());
    let static_dim = first.static_features.as_ref().map_or(0, Vec::len);
    let probe = FeatureSpace {
        vocab_size,
        cont_dim,
        static_dim,
        cont_mean: Vec::new(),
        cont_std: Vec::new(),
        static_mean: Vec::new(),
        static_std: Vec::new(),
    };
    for seq in train {
        probe.check(seq)?;
    }
    let events: Vec<&[f64]> = train
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.values.as_slice()))
        .collect();
    let (cont_mean, cont_std) = mean_std(&events, cont_dim);
    let statics: Vec<&[f64]> = train
        .iter()
        .filter_map(|s| s.static_features.as_deref())
        .collect();
    let (static_mean, static_std) = if static_dim == 0 {
        (Vec::new(), Vec::new())
    } else {
        mean_std(&statics, static_dim)
    };
    Ok(FeatureSpace {
        cont_mean,
        cont_std,
        static_mean,
        static_std,
        ..probe
    })
}

/// One patient as model input: `x` is T × d_in, `dt[0] = 0` and
/// `dt[i] = t[i] − t[i−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizedSequence {
    pub x: Tensor2,
    pub dt: Vec<f64>,
    pub label: u8,
}

impl VectorizedSequence {
    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }
}

pub fn vectorize(seq: &PatientSequence, fs: &FeatureSpace) -> Result<VectorizedSequence> {
    fs.check(seq)?;
    if seq.events.is_empty() {
        return Err(Error::Data(format!("patient {} has no events", seq.patient_id)));
    }
    let d_in = fs.d_in();
    let static_z: Vec<f64> = seq
        .static_features
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .zip(fs.static_mean.iter().zip(&fs.static_std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    let mut data = Vec::with_capacity(seq.events.len() * d_in);
    let mut dt = Vec::with_capacity(seq.events.len());
    let mut prev = None;
    for ev in &seq.events {
        let mut onehot = vec![0.0; fs.vocab_size];
        onehot[ev.code as usize] = 1.0;
        data.extend(onehot);
        data.extend(
            ev.values
                .iter()
                .zip(fs.cont_mean.iter().zip(&fs.cont_std))
                .map(|(v, (m, s))| (v - m) / s),
        );
        data.extend_from_slice(&static_z);
        dt.push(match prev {
            None => 0.0,
            Some(p) => ev.t - p,
        });
        prev = Some(ev.t);
    }
    Ok(VectorizedSequence {
        x: Tensor2::new(seq.events.len(), d_in, data)?,
        dt,
        label: seq.label,
    })
}

/// Sequences zero-padded to a common length, with validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xs: Vec<Tensor2>,
    pub dts: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }
}

/// Pads to the longest sequence, preserving input order.
pub fn batch_pad(seqs: &[VectorizedSequence]) -> Result<Batch> {
    let t_max = seqs
        .iter()
        .map(VectorizedSequence::len)
        .max()
        .ok_or_else(|| Error::Data("cannot batch an empty list".into()))?;
    let d_in = seqs[0].x.cols();
    let mut batch = Batch {
        xs: Vec::with_capacity(seqs.len()),
        dts: Vec::with_capacity(seqs.len()),
        masks: Vec::with_capacity(seqs.len()),
        labels: Vec::with_capacity(seqs.len()),
    };
    for s in seqs {
        if s.x.cols() != d_in {
            return Err(Error::Shape {
                op: "batch_pad",
                left: format!("d_in {d_in}"),
                right: format!("d_in {}", s.x.cols()),
            });
        }
        let mut data = s.x.data().to_vec();
        data.resize(t_max * d_in, 0.0);
        let mut dt = s.dt.clone();
        dt.resize(t_max, 0.0);
        let mut mask = vec![true; s.len()];
        mask.resize(t_max, false);
        batch.xs.push(Tensor2::new(t_max, d_in, data)?);
        batch.dts.push(dt);
        batch.masks.push(mask);
        batch.labels.push(s.label);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64], codes: &[u32], values: &[f64]) -> PatientSequence {
        PatientSequence {
            patient_id: "p".into(),
            label: 1,
            static_features: None,
            events: times
                .iter()
                .zip(codes)
                .zip(values)
                .map(|((&t, &code), &v)| Event {
                    t,
                    code,
                    values: vec![v],
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_line() {
        let line = r#"{"patient_id":"a1","label":1,"static":[63.0,1.0],"events":[{"t":0.5,"code":3,"values":[1.25,-2.0]},{"t":2.0,"code":0,"values":[0.0,1e-3]}]}"#;
        let parsed = parse_record(line).unwrap();
        let again = parse_record(&parsed.to_line()).unwrap();
        assert_eq!(parsed, again);
        assert_eq!(parsed.to_line(), again.to_line());
    }

    #[test]
    fn equal_timestamps_rejected_with_line_number() {
        let lines = [
            r#"{"patient_id":"ok","label":0,"events":[{"t":1.0,"code":1,"values":[]}]}"#,
            r#"{"patient_id":"bad","label":0,"events":[{"t":1.0,"code":1,"values":[]},{"t":1.0,"code":2,"values":[]}]}"#,
        ];
        let (cohort, errors) = parse_stream(lines);
        assert_eq!(cohort.len(), 1);
        assert_eq!(errors.len(), 1);
        match &errors[0] {
            Error::Parse {
                line: 2,
                kind: ParseErrorKind::Order { event: 1 },
            } => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(errors[0].to_string().starts_with("line 2"));
    }

    #[test]
    fn truncated_line_does_not_stop_the_stream() {
        let good = r#"{"patient_id":"x","label":1,"events":[{"t":0.1,"code":4,"values":[2.0]}]}"#;
        let truncated = &good[..good.len() - 7];
        let text = format!("{good}\n{truncated}\n\n{good}\n");
        let (cohort, errors) = parse_stream(text.lines());
        assert_eq!(cohort.len(), 2);
        assert_eq!(errors.len(), 1);
        assert!(matches!(
            errors[0],
            Error::Parse {
                line: 2,
                kind: ParseErrorKind::Malformed(_)
            }
        ));
    }

    #[test]
    fn schema_and_label_errors() {
        let ragged = r#"{"patient_id":"r","label":0,"events":[{"t":1,"code":1,"values":[1]},{"t":2,"code":1,"values":[1,2]}]}"#;
        assert!(matches!(
            parse_record(ragged),
            Err(ParseErrorKind::Schema { event: 1, found: 2, expected: 1 })
        ));
        let label = r#"{"patient_id":"l","label":3,"events":[{"t":1,"code":1,"values":[]}]}"#;
        assert_eq!(parse_record(label), Err(ParseErrorKind::Label(3)));
        let empty = r#"{"patient_id":"e","label":0,"events":[]}"#;
        assert_eq!(parse_record(empty), Err(ParseErrorKind::Empty));
    }

    #[test]
    fn feature_space_statistics() {
        let fs = fit_feature_space(&[seq(&[1.0, 2.0], &[0, 1], &[0.0, 2.0])], 2).unwrap();
        assert_eq!(fs.cont_mean, vec![1.0]);
        assert_eq!(fs.cont_std, vec![1.0]);
        let v = vectorize(&seq(&[1.0, 2.0], &[0, 1], &[0.0, 2.0]), &fs).unwrap();
        assert_eq!(v.x.get(0, 2), -1.0);
        assert_eq!(v.x.get(1, 2), 1.0);

        let single = seq(&[1.0], &[0], &[2.0]);
        let fs = fit_feature_space(std::slice::from_ref(&single), 1).unwrap();
        assert_eq!(fs.cont_mean, vec![2.0]);
        assert_eq!(vectorize(&single, &fs).unwrap().x.get(0, 1), 0.0);
    }

    #[test]
    fn constant_feature_uses_std_floor() {
        let s = seq(&[1.0, 2.0, 3.0], &[0, 0, 0], &[5.0, 5.0, 5.0]);
        let fs = fit_feature_space(std::slice::from_ref(&s), 1).unwrap();
        assert_eq!(fs.cont_std, vec![STD_FLOOR]);
        let v = vectorize(&s, &fs).unwrap();
        assert!(v.x.data().iter().all(|x| x.is_finite()));
        assert_eq!(v.x.get(0, 1), 0.0);
    }

    #[test]
    fn fit_errors() {
        assert!(fit_feature_space(&[], 3).is_err());
        assert!(matches!(
            fit_feature_space(&[seq(&[1.0], &[5], &[0.0])], 3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn vectorize_one_hot_and_gaps() {
        let s = seq(&[2.0, 5.5, 6.0], &[3, 0, 4], &[0.0, 1.0, 2.0]);
        let fs = fit_feature_space(std::slice::from_ref(&s), 5).unwrap();
        let v = vectorize(&s, &fs).unwrap();
        assert_eq!(v.dt, vec![0.0, 3.5, 0.5]);
        assert_eq!(&v.x.row(0)[..5], &[0.0, 0.0, 0.0, 1.0, 0.0]);
        for i in 0..3 {
            assert_eq!(v.x.row(i)[..5].iter().sum::<f64>(), 1.0);
        }
        let mut out_of_vocab = s.clone();
        out_of_vocab.events[1].code = 5;
        assert!(vectorize(&out_of_vocab, &fs).is_err());
    }

    #[test]
    fn static_features_broadcast_to_every_row() {
        let mut a = seq(&[1.0, 2.0], &[0, 1], &[0.0, 2.0]);
        a.static_features = Some(vec![10.0]);
        let mut b = a.clone();
        b.static_features = Some(vec![20.0]);
        let fs = fit_feature_space(&[a.clone(), b], 2).unwrap();
        assert_eq!(fs.d_in(), 4);
        let v = vectorize(&a, &fs).unwrap();
        assert_eq!(v.x.get(0, 3), -1.0);
        assert_eq!(v.x.get(1, 3), -1.0);
    }

    #[test]
    fn padding() {
        let fs = FeatureSpace {
            vocab_size: 2,
            cont_dim: 1,
            static_dim: 0,
            cont_mean: vec![0.0],
            cont_std: vec![1.0],
            static_mean: vec![],
            static_std: vec![],
        };
        let a = vectorize(&seq(&[1.0, 2.0, 3.0], &[0, 1, 0], &[1.0, 1.0, 1.0]), &fs).unwrap();
        let b = vectorize(&seq(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1; 5], &[2.0; 5]), &fs).unwrap();
        let batch = batch_pad(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.t_max(), 5);
        let counts: Vec<usize> = batch
            .masks
            .iter()
            .map(|m| m.iter().filter(|v| **v).count())
            .collect();
        assert_eq!(counts, vec![3, 5]);
        assert!(batch.xs[0].data()[3 * 3..].iter().all(|v| *v == 0.0));

        let same = batch_pad(&[b.clone(), b.clone()]).unwrap();
        assert!(same.masks.iter().flatten().all(|m| *m));
        let one = batch_pad(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.xs[0], a.x);
        assert!(one.masks[0].iter().all(|m| *m));
        assert!(batch_pad(&[]).is_err());
    }
}
