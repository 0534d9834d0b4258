//! 3D thin-plate spline with the biharmonic kernel `U(r) = r`.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// A fitted spline mapping `source` control points exactly onto `target`.
///
/// Any affine map between the control sets is reproduced exactly.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    controls: Vec<Point3>,
    weights: Vec<Point3>,
    linear: Matrix3<f64>,
    offset: Vector3<f64>,
}

impl ThinPlateSpline {
    pub fn fit(source: &[Point3], target: &[Point3]) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::MismatchedCardinality {
                left: source.len(),
                right: target.len(),
            });
        }
        let n = source.len();
        if n < 4 {
            return Err(Error::SingularTps(format!(
                "need at least 4 control points, got {n}"
            )));
        }
        let scale = source.iter().map(|p| p.amax()).fold(1.0f64, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                if (source[i] - source[j]).norm() <= 1e-12 * scale {
                    return Err(Error::SingularTps(format!(
                        "control points {i} and {j} coincide"
                    )));
                }
            }
        }

        let dim = n + 4;
        let mut lhs = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DMatrix::<f64>::zeros(dim, 3);
        for i in 0..n {
            for j in 0..n {
                lhs[(i, j)] = (source[i] - source[j]).norm();
            }
            lhs[(i, n)] = 1.0;
            lhs[(n, i)] = 1.0;
            for a in 0..3 {
                lhs[(i, n + 1 + a)] = source[i][a];
                lhs[(n + 1 + a, i)] = source[i][a];
                rhs[(i, a)] = target[i][a];
            }
        }
        let solution = lhs
            .full_piv_lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularTps("control points are coplanar".into()))?;
        if !solution.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularTps("non-finite solution".into()));
        }

        let weights = (0..n)
            .map(|i| Point3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]))
            .collect();
        let offset = Vector3::new(solution[(n, 0)], solution[(n, 1)], solution[(n, 2)]);
        let mut linear = Matrix3::zeros();
        for a in 0..3 {
            for out in 0..3 {
                linear[(out, a)] = solution[(n + 1 + a, out)];
            }
        }
        Ok(Self {
            controls: source.to_vec(),
            weights,
            linear,
            offset,
        })
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        let mut out = self.offset + self.linear * p;
        for (c, w) in self.controls.iter().zip(&self.weights) {
            out += w * (p - c).norm();
        }
        out
    }
}
