//! Halfspace constraint sets, ball tightening, and gauge scaling.
//!
//! State constraints are intersections of halfspaces pinned to one time
//! step. Robustifying against a deviation ball shrinks each offset by the
//! ball radius times the dual norm of the row normal. Gauge polytopes are
//! polyhedral inner approximations of the unit ball used to express
//! "trajectory stays within scale alpha" as linear rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::NormKind;

/// Numerical slack for vertex feasibility and recession-direction tests.
const GEOM_TOL: f64 = 1e-9;

/// One halfspace row: `normal · x <= offset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Halfspace { normal, offset }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.normal
            .iter()
            .zip(x.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            - self.offset
    }

    fn normal_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.normal)
    }
}

/// Support function of the `norm`-ball of radius one in direction `dir`,
/// i.e. the dual norm of `dir`. Errors on an all-zero direction.
pub fn support_ball(norm: NormKind, dir: &DVector<f64>) -> Result<f64> {
    if dir.iter().all(|v| *v == 0.0) {
        return Err(Error::Config("support direction must be nonzero".into()));
    }
    Ok(norm.dual_norm(dir))
}

/// Intersection of halfspaces imposed on the state at one time step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeConstraint {
    /// Step the constraint applies to (terminal constraints use the horizon).
    pub time: usize,
    pub rows: Vec<Halfspace>,
}

impl PolytopeConstraint {
    pub fn new(time: usize, rows: Vec<Halfspace>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("constraint needs at least one row".into()));
        }
        let dim = rows[0].normal.len();
        if rows.iter().any(|r| r.normal.len() != dim) {
            return Err(Error::Config("constraint rows disagree on dimension".into()));
        }
        if rows.iter().any(|r| r.normal.iter().all(|v| *v == 0.0)) {
            return Err(Error::Config("constraint row has a zero normal".into()));
        }
        Ok(PolytopeConstraint { time, rows })
    }

    /// Symmetric box `|x_i| <= bound` at `time` (2n rows).
    pub fn symmetric_box(time: usize, dim: usize, bound: f64) -> Self {
        let mut rows = Vec::with_capacity(2 * dim);
        for i in 0..dim {
            let mut plus = vec![0.0; dim];
            plus[i] = 1.0;
            rows.push(Halfspace::new(plus.clone(), bound));
            let mut minus = vec![0.0; dim];
            minus[i] = -1.0;
            rows.push(Halfspace::new(minus, bound));
        }
        PolytopeConstraint { time, rows }
    }

    /// Exact membership (non-strict, no tolerance).
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.rows.iter().all(|r| r.eval(x) <= 0.0)
    }

    /// Largest row residual; negative means strictly inside.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .map(|r| r.eval(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Shrinks the set so that every point of the result plus any
    /// `norm`-ball vector of length `radius` still lies in the original:
    /// each offset drops by `radius` times the dual norm of its row normal.
    /// The result may be empty; see [`PolytopeConstraint::is_obviously_empty`].
    pub fn tighten_by_ball(&self, radius: f64, norm: NormKind) -> Result<PolytopeConstraint> {
        if !(radius >= 0.0) {
            return Err(Error::Config("tightening radius must be nonnegative".into()));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let h = support_ball(norm, &r.normal_vec())?;
                Ok(Halfspace::new(r.normal.clone(), r.offset - radius * h))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PolytopeConstraint {
            time: self.time,
            rows,
        })
    }

    /// Cheap emptiness probe: looks for an antiparallel row pair whose
    /// offsets exclude each other. Sufficient but not necessary; the
    /// trajectory optimizer's feasibility phase is the authoritative test.
    pub fn is_obviously_empty(&self) -> bool {
        for (i, a) in self.rows.iter().enumerate() {
            let na = a.normal_vec();
            let la = na.norm();
            if la == 0.0 {
                continue;
            }
            for b in self.rows.iter().skip(i + 1) {
                let nb = b.normal_vec();
                let lb = nb.norm();
                if lb == 0.0 {
                    continue;
                }
                // antiparallel: na/la == −nb/lb
                if (&na / la + nb / lb).amax() < 1e-12 && a.offset / la + b.offset / lb < -1e-12 {
                    return true;
                }
            }
        }
        false
    }
}

/// Polyhedral inner approximations of the state and control unit balls,
/// used to write "x within scale alpha of the ball" as linear rows. All
/// offsets must be positive (the sets contain the origin) and each block
/// must verifiably fit inside the unit ball of the configured norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitBallPolytope {
    pub state_rows: Vec<Halfspace>,
    pub control_rows: Vec<Halfspace>,
}

impl UnitBallPolytope {
    /// Default inner approximation: a symmetric box with half-width 1 for
    /// the inf norm, 1/sqrt(n) for the two norm, and 1/n for the one norm
    /// (exact `[-1, 1]` in one dimension for every kind).
    pub fn boxed(norm: NormKind, state_dim: usize, control_dim: usize) -> Self {
        let half_width = |dim: usize| -> f64 {
            if dim <= 1 {
                1.0
            } else {
                match norm {
                    NormKind::Inf => 1.0,
                    NormKind::Two => 1.0 / (dim as f64).sqrt(),
                    NormKind::One => 1.0 / dim as f64,
                }
            }
        };
        let block = |dim: usize| {
            PolytopeConstraint::symmetric_box(0, dim, half_width(dim)).rows
        };
        UnitBallPolytope {
            state_rows: block(state_dim),
            control_rows: block(control_dim),
        }
    }

    /// Checks both blocks: positive offsets, bounded sets, and every vertex
    /// inside the unit ball of `norm` (the maximum of a norm over a bounded
    /// polytope is attained at a vertex).
    pub fn verify_contained(&self, norm: NormKind) -> Result<()> {
        for (name, rows) in [("state", &self.state_rows), ("control", &self.control_rows)] {
            if rows.is_empty() {
                return Err(Error::Config(format!("{name} gauge block has no rows")));
            }
            if rows.iter().any(|r| r.offset <= 0.0) {
                return Err(Error::Config(format!(
                    "{name} gauge offsets must be positive (set must contain the origin)"
                )));
            }
            let verts = enumerate_vertices(rows)?;
            for v in &verts {
                let n = norm.norm(v);
                if n > 1.0 + GEOM_TOL {
                    return Err(Error::Config(format!(
                        "{name} gauge vertex has norm {n} > 1; not inside the unit ball"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest scale alpha >= 0 with `v` inside alpha times the state block.
    pub fn state_gauge(&self, v: &DVector<f64>) -> Result<f64> {
        minimal_gauge(&self.state_rows, v)
    }

    /// Smallest scale beta >= 0 with `v` inside beta times the control block.
    pub fn control_gauge(&self, v: &DVector<f64>) -> Result<f64> {
        minimal_gauge(&self.control_rows, v)
    }
}

/// True iff every row satisfies `normal · v <= scale * offset` exactly.
pub fn gauge_membership(rows: &[Halfspace], v: &DVector<f64>, scale: f64) -> bool {
    rows.iter().all(|r| {
        r.normal
            .iter()
            .zip(v.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            <= scale * r.offset
    })
}

/// Smallest `alpha >= 0` with `v` in `alpha * {x : rows}`; requires all
/// offsets positive.
pub fn minimal_gauge(rows: &[Halfspace], v: &DVector<f64>) -> Result<f64> {
    let mut alpha = 0.0f64;
    for r in rows {
        if r.offset <= 0.0 {
            return Err(Error::Config(
                "gauge rows need positive offsets (set must contain the origin)".into(),
            ));
        }
        let dot: f64 = r.normal.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        alpha = alpha.max(dot / r.offset);
    }
    Ok(alpha)
}

/// Enumerates the vertices of `{x : rows}`. Errors when the set is
/// unbounded (rank-deficient normals or a nonzero recession direction) or
/// has no vertex.
fn enumerate_vertices(rows: &[Halfspace]) -> Result<Vec<DVector<f64>>> {
    let dim = rows[0].normal.len();
    let g = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].normal[j]);

    // A line in the set would make it unbounded: normals must span R^n.
    if g.clone().svd(false, false).rank(1e-10) < dim {
        return Err(Error::Config(
            "gauge/constraint set is unbounded (normals do not span the space)".into(),
        ));
    }

    // Pointed recession cone check: any extreme recession ray has dim-1
    // linearly independent active rows, so testing the null directions of
    // all (dim-1)-subsets is exhaustive.
    let mut ray_candidates: Vec<DVector<f64>> = Vec::new();
    if dim == 1 {
        ray_candidates.push(DVector::from_element(1, 1.0));
        ray_candidates.push(DVector::from_element(1, -1.0));
    } else {
        for subset in subsets(rows.len(), dim - 1) {
            // null vector of the (dim-1) x dim normal block by cofactor
            // expansion; zero exactly when the block is rank-deficient
            let mut d = DVector::zeros(dim);
            for j in 0..dim {
                let minor = DMatrix::from_fn(dim - 1, dim - 1, |r, c| {
                    let col = if c < j { c } else { c + 1 };
                    rows[subset[r]].normal[col]
                });
                let det = minor.lu().determinant();
                d[j] = if j % 2 == 0 { det } else { -det };
            }
            let len = d.norm();
            if len > 1e-10 {
                d /= len;
                ray_candidates.push(d.clone());
                ray_candidates.push(-d);
            }
        }
    }
    for d in &ray_candidates {
        if rows.iter().all(|r| r.normal_vec().dot(d) <= GEOM_TOL) {
            return Err(Error::Config(
                "gauge/constraint set is unbounded (recession direction found)".into(),
            ));
        }
    }

    // Vertices: feasible solutions of dim active rows.
    let mut verts: Vec<DVector<f64>> = Vec::new();
    for subset in subsets(rows.len(), dim) {
        let a = DMatrix::from_fn(dim, dim, |i, j| rows[subset[i]].normal[j]);
        let b = DVector::from_fn(dim, |i, _| rows[subset[i]].offset);
        let lu = a.lu();
        if let Some(x) = lu.solve(&b) {
            if !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            if rows.iter().all(|r| r.eval(&x) <= GEOM_TOL)
                && !verts.iter().any(|v| (v - &x).amax() < 1e-9)
            {
                verts.push(x);
            }
        }
    }
    if verts.is_empty() {
        return Err(Error::Config("gauge/constraint set has no vertices (empty?)".into()));
    }
    Ok(verts)
}

/// All k-element index subsets of 0..n in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
