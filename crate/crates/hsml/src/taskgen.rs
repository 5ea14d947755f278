//! Toy-regression task sampling.
//!
//! Four function families over x in [-5, 5], each with coefficients drawn
//! uniformly from fixed ranges. A task is a sampled function plus a support
//! set (for adaptation) and a query set (for the meta objective); targets are
//! exact function values with no observation noise.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const X_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Sinusoid,
    Line,
    Cubic,
    Quadratic,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::Sinusoid,
        FamilyKind::Line,
        FamilyKind::Cubic,
        FamilyKind::Quadratic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Sinusoid => "sinusoid",
            FamilyKind::Line => "line",
            FamilyKind::Cubic => "cubic",
            FamilyKind::Quadratic => "quadratic",
        }
    }
}

/// A sampled function: family tag plus concrete coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// y = A sin(w x) + b
    Sinusoid { amplitude: f64, frequency: f64, offset: f64 },
    /// y = A x + b
    Line { slope: f64, intercept: f64 },
    /// y = A x^3 + b x^2 + c x + d
    Cubic { a: f64, b: f64, c: f64, d: f64 },
    /// y = A x^2 + b x + c
    Quadratic { a: f64, b: f64, c: f64 },
}

impl Family {
    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Sinusoid { .. } => FamilyKind::Sinusoid,
            Family::Line { .. } => FamilyKind::Line,
            Family::Cubic { .. } => FamilyKind::Cubic,
            Family::Quadratic { .. } => FamilyKind::Quadratic,
        }
    }

    /// Draws coefficients from the family's fixed uniform ranges.
    pub fn sample(kind: FamilyKind, rng: &mut Rng) -> Family {
        match kind {
            FamilyKind::Sinusoid => Family::Sinusoid {
                amplitude: rng.range(0.1, 5.0),
                frequency: rng.range(0.8, 1.2),
                offset: rng.range(0.0, std::f64::consts::TAU),
            },
            FamilyKind::Line => Family::Line {
                slope: rng.range(-3.0, 3.0),
                intercept: rng.range(-3.0, 3.0),
            },
            FamilyKind::Cubic => Family::Cubic {
                a: rng.range(-0.1, 0.1),
                b: rng.range(-0.2, 0.2),
                c: rng.range(-2.0, 2.0),
                d: rng.range(-3.0, 3.0),
            },
            FamilyKind::Quadratic => Family::Quadratic {
                a: rng.range(-0.2, 0.2),
                b: rng.range(-2.0, 2.0),
                c: rng.range(-3.0, 3.0),
            },
        }
    }

    /// Exact closed-form value at x.
    pub fn evaluate(&self, x: f64) -> f64 {
        match self {
            Family::Sinusoid { amplitude, frequency, offset } => {
                amplitude * (frequency * x).sin() + offset
            }
            Family::Line { slope, intercept } => slope * x + intercept,
            Family::Cubic { a, b, c, d } => ((a * x + b) * x + c) * x + d,
            Family::Quadratic { a, b, c } => (a * x + b) * x + c,
        }
    }
}

/// One regression episode: the ground-truth function with its support and
/// query sets, drawn i.i.d. from x ~ U[-5, 5].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Task {
    #[serde(flatten)]
    pub family: Family,
    pub support: Vec<(f64, f64)>,
    pub query: Vec<(f64, f64)>,
}

impl Task {
    pub fn kind(&self) -> FamilyKind {
        self.family.kind()
    }
}

/// Samples a task: family uniform over the active set, then coefficients,
/// then support inputs, then query inputs.
pub fn sample_task(
    rng: &mut Rng,
    active: &[FamilyKind],
    n_tr: usize,
    n_te: usize,
) -> Result<Task> {
    if active.is_empty() {
        return Err(Error::NoActiveFamilies);
    }
    assert!(n_tr >= 1, "support set must have at least one example");
    let kind = active[rng.index(active.len())];
    let family = Family::sample(kind, rng);
    let draw = |rng: &mut Rng, n: usize, family: &Family| -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let x = rng.range(X_RANGE.0, X_RANGE.1);
                (x, family.evaluate(x))
            })
            .collect()
    };
    let support = draw(rng, n_tr, &family);
    let query = draw(rng, n_te, &family);
    Ok(Task {
        family,
        support,
        query,
    })
}

/// A continual-training schedule: each stage activates additional families at
/// its iteration threshold. Thresholds must be strictly increasing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StreamSchedule {
    pub stages: Vec<(u64, Vec<FamilyKind>)>,
}

impl StreamSchedule {
    pub fn new(stages: Vec<(u64, Vec<FamilyKind>)>) -> Result<Self> {
        for w in stages.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(vec![format!(
                    "schedule thresholds must be strictly increasing: {} then {}",
                    w[0].0, w[1].0
                )]));
            }
        }
        Ok(StreamSchedule { stages })
    }

    /// Union of every stage whose threshold has been reached, in first-seen order.
    pub fn active_families(&self, iteration: u64) -> Vec<FamilyKind> {
        let mut active = Vec::new();
        for (threshold, fams) in &self.stages {
            if *threshold <= iteration {
                for f in fams {
                    if !active.contains(f) {
                        active.push(*f);
                    }
                }
            }
        }
        active
    }
}

/// Serializes tasks as JSON records (family, coefficients, points) for
/// external plotting.
pub fn tasks_to_json(tasks: &[Task]) -> Result<String> {
    Ok(serde_json::to_string_pretty(tasks)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_tasks() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        let ta = sample_task(&mut a, &FamilyKind::ALL, 5, 10).unwrap();
        let tb = sample_task(&mut b, &FamilyKind::ALL, 5, 10).unwrap();
        assert_eq!(ta.family, tb.family);
        assert_eq!(ta.support, tb.support);
        assert_eq!(ta.query, tb.query);
    }

    #[test]
    fn empty_family_set_is_an_error() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            sample_task(&mut rng, &[], 5, 10),
            Err(Error::NoActiveFamilies)
        ));
    }

    #[test]
    fn forced_sinusoid_hits_unit_peak() {
        let f = Family::Sinusoid {
            amplitude: 1.0,
            frequency: 1.0,
            offset: 0.0,
        };
        assert!((f.evaluate(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn line_and_degenerate_polynomials() {
        let line = Family::Line {
            slope: 2.0,
            intercept: 1.0,
        };
        assert_eq!(line.evaluate(3.0), 7.0);
        let cubic = Family::Cubic {
            a: 0.0,
            b: 0.0,
            c: 1.0,
            d: 0.0,
        };
        assert_eq!(cubic.evaluate(2.0), 2.0);
        let quad = Family::Quadratic {
            a: 0.2,
            b: 0.0,
            c: -3.0,
        };
        assert!((quad.evaluate(5.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_amplitudes_match_uniform_moments() {
        let mut rng = Rng::new(7);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let f = Family::sample(FamilyKind::Sinusoid, &mut rng);
            let Family::Sinusoid { amplitude, .. } = f else {
                unreachable!()
            };
            min = min.min(amplitude);
            max = max.max(amplitude);
            sum += amplitude;
        }
        assert!(min >= 0.1);
        assert!(max <= 5.0);
        let mean = sum / n as f64;
        assert!((mean - 2.55).abs() < 0.05, "mean amplitude {mean}");
    }

    #[test]
    fn schedule_union_semantics() {
        use FamilyKind::*;
        let s = StreamSchedule::new(vec![
            (0, vec![Sinusoid, Line]),
            (15_000, vec![Quadratic]),
            (30_000, vec![Cubic]),
        ])
        .unwrap();
        assert_eq!(s.active_families(0), vec![Sinusoid, Line]);
        assert_eq!(s.active_families(15_000), vec![Sinusoid, Line, Quadratic]);
        assert_eq!(s.active_families(29_999), vec![Sinusoid, Line, Quadratic]);
        assert_eq!(
            s.active_families(30_000),
            vec![Sinusoid, Line, Quadratic, Cubic]
        );
    }

    #[test]
    fn schedule_thresholds_must_increase() {
        use FamilyKind::*;
        assert!(StreamSchedule::new(vec![(5, vec![Line]), (5, vec![Cubic])]).is_err());
    }

    #[test]
    fn targets_reproduce_the_closed_form_bit_exactly() {
        let mut rng = Rng::new(5150);
        for _ in 0..50 {
            let t = sample_task(&mut rng, &FamilyKind::ALL, 5, 7).unwrap();
            for (x, y) in t.support.iter().chain(t.query.iter()) {
                assert_eq!(y.to_bits(), t.family.evaluate(*x).to_bits());
            }
        }
    }

    #[test]
    fn coefficients_stay_inside_declared_ranges() {
        let mut rng = Rng::new(31);
        for _ in 0..2000 {
            match Family::sample(FamilyKind::ALL[rng.index(4)], &mut rng) {
                Family::Sinusoid { amplitude, frequency, offset } => {
                    assert!((0.1..=5.0).contains(&amplitude));
                    assert!((0.8..=1.2).contains(&frequency));
                    assert!((0.0..=std::f64::consts::TAU).contains(&offset));
                }
                Family::Line { slope, intercept } => {
                    assert!((-3.0..=3.0).contains(&slope));
                    assert!((-3.0..=3.0).contains(&intercept));
                }
                Family::Cubic { a, b, c, d } => {
                    assert!((-0.1..=0.1).contains(&a));
                    assert!((-0.2..=0.2).contains(&b));
                    assert!((-2.0..=2.0).contains(&c));
                    assert!((-3.0..=3.0).contains(&d));
                }
                Family::Quadratic { a, b, c } => {
                    assert!((-0.2..=0.2).contains(&a));
                    assert!((-2.0..=2.0).contains(&b));
                    assert!((-3.0..=3.0).contains(&c));
                }
            }
        }
    }

    #[test]
    fn task_json_round_trips() {
        let mut rng = Rng::new(9);
        let t = sample_task(&mut rng, &[FamilyKind::Quadratic], 5, 3).unwrap();
        let json = tasks_to_json(std::slice::from_ref(&t)).unwrap();
        let back: Vec<Task> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].family, t.family);
        assert_eq!(back[0].support, t.support);
    }
}
