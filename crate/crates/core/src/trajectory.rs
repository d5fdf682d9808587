//! Time-parameterized reference motions: obstacle centers and tracking targets.

use std::sync::Arc;

/// Position and its first three time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub acc: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl Kinematics {
    pub fn at_rest(pos: Vec<f64>) -> Self {
        let n = pos.len();
        Self {
            pos,
            vel: vec![0.0; n],
            acc: vec![0.0; n],
            jerk: vec![0.0; n],
        }
    }
}

/// A point moving through configuration space, e.g. an obstacle center.
pub trait PointTrajectory: Send + Sync {
    fn dim(&self) -> usize;
    fn kinematics(&self, t: f64) -> Kinematics;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint(pub Vec<f64>);

impl PointTrajectory for FixedPoint {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn kinematics(&self, _t: f64) -> Kinematics {
        Kinematics::at_rest(self.0.clone())
    }
}

/// A full-state reference `x_t(t)` with its first two time derivatives.
pub trait Reference: Send + Sync {
    fn dim(&self) -> usize;
    /// `[x_t, ẋ_t, ẍ_t]`.
    fn derivatives(&self, t: f64) -> [Vec<f64>; 3];
}

/// The identically-zero reference.
#[derive(Debug, Clone, Copy)]
pub struct Origin(pub usize);

impl Reference for Origin {
    fn dim(&self) -> usize {
        self.0
    }

    fn derivatives(&self, _t: f64) -> [Vec<f64>; 3] {
        [vec![0.0; self.0], vec![0.0; self.0], vec![0.0; self.0]]
    }
}

/// Second-order reference `x_t = [r(t); ṙ(t)]` built from a point trajectory.
#[derive(Clone)]
pub struct StackedReference(pub Arc<dyn PointTrajectory>);

impl Reference for StackedReference {
    fn dim(&self) -> usize {
        2 * self.0.dim()
    }

    fn derivatives(&self, t: f64) -> [Vec<f64>; 3] {
        let k = self.0.kinematics(t);
        let cat = |a: &[f64], b: &[f64]| a.iter().chain(b).copied().collect::<Vec<_>>();
        [
            cat(&k.pos, &k.vel),
            cat(&k.vel, &k.acc),
            cat(&k.acc, &k.jerk),
        ]
    }
}
