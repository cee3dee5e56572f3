//! Dataset transforms applied before fitting.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Dataset, TimeSeriesSample};
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// Natural logarithm of every value; requires positive data.
    Log,
    /// Maps each feature of each series onto `[0, 1]`. Constant features map
    /// to 0.
    MinMaxPerSeries,
    /// First differences `y_{k+1} − y_k`, stamped at `t_{k+1}` and shifted back
    /// to start at 0. Drops one sample per series.
    Diff,
    /// Divides each feature by its largest absolute value over the dataset.
    GlobalMaxScale,
    /// `a·y + b`.
    Affine(f64, f64),
    /// Divides timestamps by the given unit, or by the largest terminal time
    /// in the dataset when none is given.
    RescaleTimeUnit(Option<f64>),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Log => f.write_str("log"),
            Self::MinMaxPerSeries => f.write_str("minmax-per-series"),
            Self::Diff => f.write_str("diff"),
            Self::GlobalMaxScale => f.write_str("global-max-scale"),
            Self::Affine(a, b) => write!(f, "affine({a},{b})"),
            Self::RescaleTimeUnit(None) => f.write_str("rescale-time-unit"),
            Self::RescaleTimeUnit(Some(c)) => write!(f, "rescale-time-unit({c})"),
        }
    }
}

fn bad(msg: String) -> Error {
    Error::InvalidOption(msg)
}

fn number(s: &str, whole: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| bad(format!("transform `{whole}`: `{s}` is not a number")))
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(&s[open + 1..s.len() - 1])),
            Some(_) => return Err(bad(format!("transform `{s}`: unbalanced parenthesis"))),
            None => (s, None),
        };
        let args: Vec<&str> = args.map(|a| a.split(',').collect()).unwrap_or_default();
        match (name.trim().to_ascii_lowercase().as_str(), args.as_slice()) {
            ("log", []) => Ok(Self::Log),
            ("minmax-per-series", []) => Ok(Self::MinMaxPerSeries),
            ("diff", []) => Ok(Self::Diff),
            ("global-max-scale", []) => Ok(Self::GlobalMaxScale),
            ("affine", [a, b]) => Ok(Self::Affine(number(a, s)?, number(b, s)?)),
            ("rescale-time-unit", []) => Ok(Self::RescaleTimeUnit(None)),
            ("rescale-time-unit", [c]) => {
                let c = number(c, s)?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(bad(format!("transform `{s}`: time unit must be positive")));
                }
                Ok(Self::RescaleTimeUnit(Some(c)))
            }
            _ => Err(bad(format!("unknown transform `{s}`"))),
        }
    }
}

/// Parses a comma separated transform list such as
/// `log,minmax-per-series,affine(0.25,-0.25)`.
pub fn parse_transforms(list: &str) -> Result<Vec<Transform>> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in list.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(list[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !list[start..].trim().is_empty() {
        out.push(list[start..].parse()?);
    }
    Ok(out)
}

fn map_values<T: Real>(series: &mut [TimeSeriesSample<T>], f: impl Fn(T) -> T) {
    for s in series {
        s.observations.apply(|v| *v = f(*v));
    }
}

fn apply_one<T: Real>(series: &mut Vec<TimeSeriesSample<T>>, transform: Transform) -> Result<()> {
    match transform {
        Transform::Log => {
            for s in series.iter() {
                for k in 0..s.len() {
                    if s.observations.row(k).iter().any(|&v| !(v > T::zero())) {
                        return Err(Error::NonPositiveForLog { id: s.id.clone(), k: k + 1 });
                    }
                }
            }
            map_values(series, |v| v.ln());
        }
        Transform::MinMaxPerSeries => {
            for s in series.iter_mut() {
                for mut col in s.observations.column_iter_mut() {
                    let lo = col.min();
                    let span = col.max() - lo;
                    col.apply(|v| *v = if span > T::zero() { (*v - lo) / span } else { T::zero() });
                }
            }
        }
        Transform::Diff => {
            for s in series.iter_mut() {
                let len = s.len();
                if len < 2 {
                    return Err(Error::TooShort { id: s.id.clone() });
                }
                let later = s.observations.rows(1, len - 1).into_owned();
                let earlier = s.observations.rows(0, len - 1);
                s.observations = later - earlier;
                s.timestamps.remove(0);
                s.shift_to_origin();
            }
        }
        Transform::GlobalMaxScale => {
            let n = series.first().map_or(0, |s| s.obs_dim());
            for j in 0..n {
                let top = series.iter().map(|s| s.observations.column(j).amax()).fold(T::zero(), |a, b| a.max(b));
                if top > T::zero() {
                    for s in series.iter_mut() {
                        s.observations.column_mut(j).apply(|v| *v /= top);
                    }
                }
            }
        }
        Transform::Affine(a, b) => {
            let (a, b) = (lit::<T>(a), lit::<T>(b));
            map_values(series, |v| a * v + b);
        }
        Transform::RescaleTimeUnit(unit) => {
            let unit = match unit {
                Some(c) => lit(c),
                None => series.iter().filter_map(|s| s.timestamps.last().copied()).fold(T::zero(), |a, b| a.max(b)),
            };
            if unit > T::zero() {
                for s in series.iter_mut() {
                    for t in &mut s.timestamps {
                        *t /= unit;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Applies the transforms in order and revalidates the result.
pub fn preprocess<T: Real>(dataset: Dataset<T>, transforms: &[Transform]) -> Result<Dataset<T>> {
    let mut series = dataset.into_series();
    for &t in transforms {
        apply_one(&mut series, t)?;
    }
    Dataset::new(series)
}
