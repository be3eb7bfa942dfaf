//! Gridded multi-attribute series: storage, splitting, windowing and scaling.

mod format;
mod synth;

pub use format::{load_grid_csv, parse_grid, save_grid_csv, write_grid};
pub use synth::{synthesize, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

/// Guard added to the min-max range so constant attributes stay finite.
pub const NORMALIZER_EPS: f64 = 1e-8;

/// Values over (time, region, attribute) on a rows×cols grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSeries {
    pub rows: usize,
    pub cols: usize,
    pub interval_minutes: u32,
    pub attribute_names: Vec<String>,
    /// Flat `[t][region][attribute]` storage.
    values: Vec<f64>,
    /// Timestep of `values[0]` within the series this one was cut from.
    pub start_step: usize,
}

impl GridSeries {
    pub fn new(
        rows: usize,
        cols: usize,
        interval_minutes: u32,
        attribute_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        let regions = rows * cols;
        let attrs = attribute_names.len();
        if regions == 0 || attrs == 0 {
            return Err(DataError::Invalid(
                "grid and attribute list must be nonempty".into(),
            ));
        }
        if !values.len().is_multiple_of(regions * attrs) {
            return Err(DataError::Invalid(format!(
                "{} values do not fill whole timesteps of {regions} regions x {attrs} attributes",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DataError::Invalid(format!(
                "value {v} is negative or not finite"
            )));
        }
        Ok(Self {
            rows,
            cols,
            interval_minutes,
            attribute_names,
            values,
            start_step: 0,
        })
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn timesteps(&self) -> usize {
        self.values.len() / (self.regions() * self.attributes())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, region: usize, attr: usize) -> f64 {
        self.values[(t * self.regions() + region) * self.attributes() + attr]
    }

    /// Timesteps `[start, stop)` as a new series remembering its offset.
    pub fn slice_time(&self, start: usize, stop: usize) -> GridSeries {
        let step = self.regions() * self.attributes();
        GridSeries {
            values: self.values[start * step..stop * step].to_vec(),
            start_step: self.start_step + start,
            attribute_names: self.attribute_names.clone(),
            ..*self
        }
    }

    /// Sub-series with the given attributes, in the given order.
    pub fn select_attributes(&self, indices: &[usize]) -> Result<GridSeries, DataError> {
        let count = self.attributes();
        if indices.is_empty() {
            return Err(DataError::Invalid("attribute selection is empty".into()));
        }
        let mut seen = vec![false; count];
        for &i in indices {
            if i >= count {
                return Err(DataError::AttributeIndex { index: i, count });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Invalid(format!("attribute {i} selected twice")));
            }
        }
        let cells = self.timesteps() * self.regions();
        let mut values = Vec::with_capacity(cells * indices.len());
        for cell in 0..cells {
            for &i in indices {
                values.push(self.values[cell * count + i]);
            }
        }
        Ok(GridSeries {
            values,
            attribute_names: indices
                .iter()
                .map(|&i| self.attribute_names[i].clone())
                .collect(),
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> GridSeries {
        GridSeries {
            rows: self.rows,
            cols: self.cols,
            interval_minutes: self.interval_minutes,
            attribute_names: Vec::new(),
            values: Vec::new(),
            start_step: self.start_step,
        }
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> GridSeries {
        let c = self.attributes();
        GridSeries {
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i % c, v))
                .collect(),
            attribute_names: self.attribute_names.clone(),
            ..self.clone_meta()
        }
    }
}

/// Chronological 7:1:2 split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: GridSeries,
    pub val: GridSeries,
    pub test: GridSeries,
}

impl Splits {
    pub fn get(&self, which: SplitKind) -> &GridSeries {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(DataError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Cuts at `floor(0.7 T)` and `floor(0.8 T)`; fails unless every part
/// holds at least one `input_len + horizon` window.
pub fn split(series: &GridSeries, input_len: usize, horizon: usize) -> Result<Splits, DataError> {
    let total = series.timesteps();
    let first = total * 7 / 10;
    let second = total * 8 / 10;
    let need = input_len + horizon;
    let sizes = [first, second - first, total - second];
    if sizes.iter().any(|&s| s < need) {
        return Err(DataError::TooShort(format!(
            "{total} timesteps split into {sizes:?}, each part needs at least {need}"
        )));
    }
    Ok(Splits {
        train: series.slice_time(0, first),
        val: series.slice_time(first, second),
        test: series.slice_time(second, total),
    })
}

/// One supervised example: `T×N×C` history and the following `H×N×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x: Tensor,
    pub y: Tensor,
    /// First input timestep, in the coordinates of the unsplit series.
    pub origin: usize,
}

impl WindowSample {
    pub fn attributes(&self) -> usize {
        self.x.shape()[2]
    }
}

fn block(series: &GridSeries, start: usize, len: usize) -> Tensor {
    let step = series.regions() * series.attributes();
    let data = series.values[start * step..(start + len) * step].to_vec();
    Tensor::new(vec![len, series.regions(), series.attributes()], data).expect("block fills shape")
}

/// Sliding windows; `max(0, len - T - H + 1)` of them at stride 1.
pub fn windows(
    series: &GridSeries,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Vec<WindowSample> {
    let total = series.timesteps();
    let span = input_len + horizon;
    if total < span || stride == 0 {
        return Vec::new();
    }
    (0..=total - span)
        .step_by(stride)
        .map(|o| WindowSample {
            x: block(series, o, input_len),
            y: block(series, o + input_len, horizon),
            origin: series.start_step + o,
        })
        .collect()
}

/// Per-attribute min-max scaling fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &GridSeries) -> Result<Self, DataError> {
        let c = train.attributes();
        if train.values.is_empty() {
            return Err(DataError::Invalid(
                "cannot fit a normalizer on an empty split".into(),
            ));
        }
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for (i, &v) in train.values.iter().enumerate() {
            let a = i % c;
            min[a] = min[a].min(v);
            max[a] = max[a].max(v);
        }
        Ok(Self { min, max })
    }

    pub fn attributes(&self) -> usize {
        self.min.len()
    }

    #[inline]
    pub fn scale(&self, attr: usize) -> f64 {
        self.max[attr] - self.min[attr] + NORMALIZER_EPS
    }

    #[inline]
    pub fn transform_value(&self, attr: usize, v: f64) -> f64 {
        (v - self.min[attr]) / self.scale(attr)
    }

    #[inline]
    pub fn invert_value(&self, attr: usize, v: f64) -> f64 {
        v * self.scale(attr) + self.min[attr]
    }

    pub fn apply(&self, series: &GridSeries) -> GridSeries {
        series.map_values(|a, v| self.transform_value(a, v))
    }

    pub fn invert(&self, series: &GridSeries) -> GridSeries {
        series.map_values(|a, v| self.invert_value(a, v))
    }

    pub fn select(&self, indices: &[usize]) -> Normalizer {
        Normalizer {
            min: indices.iter().map(|&i| self.min[i]).collect(),
            max: indices.iter().map(|&i| self.max[i]).collect(),
        }
    }
}

/// Windows of one split, ready for training.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub windows: Vec<WindowSample>,
    pub input_len: usize,
    pub horizon: usize,
    pub regions: usize,
    pub attributes: usize,
}

impl WindowSet {
    pub fn from_series(series: &GridSeries, input_len: usize, horizon: usize) -> Self {
        Self {
            windows: windows(series, input_len, horizon, 1),
            input_len,
            horizon,
            regions: series.regions(),
            attributes: series.attributes(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Restricts every window to the listed attributes.
    pub fn select_attributes(&self, indices: &[usize]) -> Result<WindowSet, DataError> {
        for &i in indices {
            if i >= self.attributes {
                return Err(DataError::AttributeIndex {
                    index: i,
                    count: self.attributes,
                });
            }
        }
        let pick = |t: &Tensor| {
            let [len, n, c] = t.shape()[..] else {
                unreachable!()
            };
            let mut data = Vec::with_capacity(len * n * indices.len());
            for cell in 0..len * n {
                for &i in indices {
                    data.push(t.data()[cell * c + i]);
                }
            }
            Tensor::new(vec![len, n, indices.len()], data).expect("selected block")
        };
        Ok(WindowSet {
            windows: self
                .windows
                .iter()
                .map(|w| WindowSample {
                    x: pick(&w.x),
                    y: pick(&w.y),
                    origin: w.origin,
                })
                .collect(),
            attributes: indices.len(),
            ..*self
        })
    }

    /// Every input and target value lies in [0, 1].
    pub fn check_normalized(&self) -> Result<(), DataError> {
        for w in &self.windows {
            for &v in w.x.data().iter().chain(w.y.data()) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::NotNormalized(v));
                }
            }
        }
        Ok(())
    }

    /// Stacks windows into model inputs `[B·C, T, N]` and targets `[B·C, N, H]`,
    /// sequence `b·C + c` holding attribute `c` of window `b`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (t, h, n, c) = (self.input_len, self.horizon, self.regions, self.attributes);
        let s = indices.len() * c;
        let mut x = vec![0.0; s * t * n];
        let mut y = vec![0.0; s * n * h];
        for (b, &wi) in indices.iter().enumerate() {
            let w = &self.windows[wi];
            let (wx, wy) = (w.x.data(), w.y.data());
            for a in 0..c {
                let seq = b * c + a;
                for ti in 0..t {
                    for r in 0..n {
                        x[(seq * t + ti) * n + r] = wx[(ti * n + r) * c + a];
                    }
                }
                for r in 0..n {
                    for hi in 0..h {
                        y[(seq * n + r) * h + hi] = wy[(hi * n + r) * c + a];
                    }
                }
            }
        }
        (
            Tensor::new(vec![s, t, n], x).expect("input batch"),
            Tensor::new(vec![s, n, h], y).expect("target batch"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(steps: usize, rows: usize, cols: usize, attrs: usize) -> GridSeries {
        let n = steps * rows * cols * attrs;
        GridSeries::new(
            rows,
            cols,
            60,
            (0..attrs).map(|i| format!("a{i}")).collect(),
            (0..n).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_fractions() {
        let s = ramp(100, 1, 2, 1);
        let parts = split(&s, 2, 2).unwrap();
        assert_eq!(parts.train.timesteps(), 70);
        assert_eq!(parts.val.timesteps(), 10);
        assert_eq!(parts.test.timesteps(), 20);
        assert_eq!(parts.val.start_step, 70);
        assert_eq!(parts.test.start_step, 80);
    }

    #[test]
    fn split_rejects_short_series() {
        assert!(matches!(
            split(&ramp(10, 1, 1, 1), 12, 12),
            Err(DataError::TooShort(_))
        ));
    }

    #[test]
    fn window_counts_and_targets() {
        let s = ramp(5, 1, 2, 1);
        assert_eq!(windows(&s, 3, 2, 1).len(), 1);
        let s = ramp(9, 1, 2, 1);
        let w = windows(&s, 3, 2, 1);
        assert_eq!(w.len(), 5);
        for win in &w {
            for h in 0..2 {
                for r in 0..2 {
                    assert_eq!(win.y.at(&[h, r, 0]), s.get(win.origin + 3 + h, r, 0));
                }
            }
        }
        assert!(windows(&ramp(4, 1, 1, 1), 3, 2, 1).is_empty());
    }

    #[test]
    fn splits_do_not_leak() {
        let s = ramp(200, 1, 1, 1);
        let parts = split(&s, 4, 3).unwrap();
        let last_train = windows(&parts.train, 4, 3, 1)
            .iter()
            .map(|w| w.origin + 6)
            .max()
            .unwrap();
        let first_val = windows(&parts.val, 4, 3, 1)
            .iter()
            .map(|w| w.origin)
            .min()
            .unwrap();
        let last_val = windows(&parts.val, 4, 3, 1)
            .iter()
            .map(|w| w.origin + 6)
            .max()
            .unwrap();
        let first_test = windows(&parts.test, 4, 3, 1)
            .iter()
            .map(|w| w.origin)
            .min()
            .unwrap();
        assert!(last_train < first_val);
        assert!(last_val < first_test);
    }

    #[test]
    fn window_first_rows_rebuild_prefix() {
        let s = ramp(12, 2, 2, 2);
        let w = windows(&s, 3, 2, 1);
        let rebuilt: Vec<f64> = w
            .iter()
            .flat_map(|win| win.x.data()[..8].to_vec())
            .collect();
        assert_eq!(rebuilt, s.values()[..w.len() * 8]);
    }

    #[test]
    fn normalizer_guards_constant_and_does_not_clip() {
        let s = GridSeries::new(
            1,
            1,
            60,
            vec!["c".into(), "r".into()],
            vec![3., 0., 3., 10., 3., 5.],
        )
        .unwrap();
        let norm = Normalizer::fit(&s).unwrap();
        let scaled = norm.apply(&s);
        for t in 0..3 {
            assert_eq!(scaled.get(t, 0, 0), 0.0);
        }
        assert!((scaled.get(1, 0, 1) - 1.0).abs() < 1e-8);
        assert!(norm.transform_value(1, 12.0) > 1.0);
    }

    #[test]
    fn normalizer_round_trip() {
        let s = ramp(20, 2, 2, 3);
        let norm = Normalizer::fit(&s).unwrap();
        let back = norm.invert(&norm.apply(&s));
        for (a, b) in back.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn select_attributes_cases() {
        let s = ramp(4, 1, 2, 3);
        assert_eq!(s.select_attributes(&[0, 1, 2]).unwrap(), s);
        let one = s.select_attributes(&[0]).unwrap();
        assert_eq!(one.attributes(), 1);
        assert_eq!(one.get(2, 1, 0), s.get(2, 1, 0));
        assert!(matches!(
            s.select_attributes(&[3]),
            Err(DataError::AttributeIndex { index: 3, count: 3 })
        ));
        assert!(s.select_attributes(&[1, 1]).is_err());
        let a = s.select_attributes(&[0, 2]).unwrap();
        let b = s.select_attributes(&[1]).unwrap();
        assert_eq!(a.attributes() + b.attributes(), s.attributes());
    }

    #[test]
    fn batch_layout_matches_windows() {
        let s = ramp(10, 1, 3, 2);
        let set = WindowSet::from_series(&s, 3, 2);
        let (x, y) = set.batch(&[4, 1]);
        assert_eq!(x.shape(), &[4, 3, 3]);
        assert_eq!(y.shape(), &[4, 3, 2]);
        let w = &set.windows[1];
        // seq 3 = window 1, attribute 1
        assert_eq!(x.at(&[3, 2, 1]), w.x.at(&[2, 1, 1]));
        assert_eq!(y.at(&[3, 0, 1]), w.y.at(&[1, 0, 1]));
    }
}
